//! Discrete model geometries: node sets, volume weights, geodesic distances
//! and curvature fields for a fixed time slice.
//!
//! Supported kinds are the symmetric model spaces the laboratory works on.
//! Sphere grids cluster nodes by latitude with uniform longitude; the
//! quadrature weights integrate the area form exactly over each latitude
//! band, so zonal step functions are integrated exactly. Warped profiles are
//! represented on the 1-dimensional rotational quotient: a node stands for a
//! whole fiber orbit and volume weights carry the fiber area.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_NODES_PER_AXIS: usize = 8;

/// Surface area of the unit (k)-sphere, k = fiber dimension.
pub fn unit_sphere_area(k: usize) -> f64 {
    match k {
        0 => 2.0,
        1 => 2.0 * std::f64::consts::PI,
        2 => 4.0 * std::f64::consts::PI,
        3 => 2.0 * std::f64::consts::PI * std::f64::consts::PI,
        _ => unreachable!("fiber dimension above 3 is not constructed"),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Circle,
    LineSegmentWithAbsorbingEnds,
    FlatTorusGrid,
    SphereLatitudeGrid,
    WarpedProfileGrid,
    /// Product of a latitude-grid sphere and a circle (shrinking cylinder).
    SphereCircleProduct,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Kind::Circle => "circle",
            Kind::LineSegmentWithAbsorbingEnds => "line-segment-with-absorbing-ends",
            Kind::FlatTorusGrid => "flat-torus-grid",
            Kind::SphereLatitudeGrid => "sphere-latitude-grid",
            Kind::WarpedProfileGrid => "warped-profile-grid",
            Kind::SphereCircleProduct => "sphere-circle-product",
        };
        f.write_str(s)
    }
}

/// Node set of a discretized model manifold.
///
/// Nodes are laid out row-major over `shape`. `coords[a]` holds the per-axis
/// coordinates (angles or positions); they are strictly increasing within
/// each axis.
#[derive(Debug, Clone)]
pub struct Discretization {
    pub kind: Kind,
    /// Manifold dimension n (may exceed the number of grid axes for warped
    /// quotients, where fibers are implicit).
    pub dim: usize,
    pub shape: Vec<usize>,
    pub coords: Vec<Vec<f64>>,
    pub periodic: Vec<bool>,
}

impl Discretization {
    pub fn node_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn node_multi_index(&self, node: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        let mut rem = node;
        for a in (0..self.shape.len()).rev() {
            idx[a] = rem % self.shape[a];
            rem /= self.shape[a];
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        let mut idx = 0;
        for (a, &m) in multi.iter().enumerate() {
            idx = idx * self.shape[a] + m;
        }
        idx
    }

    fn validate(&self) -> Result<()> {
        for (a, (&n, &p)) in self.shape.iter().zip(&self.periodic).enumerate() {
            if p && n < MIN_NODES_PER_AXIS {
                return Err(Error::ResolutionTooLow { axis: axis_name(a), got: n, min: MIN_NODES_PER_AXIS });
            }
            if n < MIN_NODES_PER_AXIS {
                return Err(Error::ResolutionTooLow { axis: axis_name(a), got: n, min: MIN_NODES_PER_AXIS });
            }
        }
        for c in &self.coords {
            if c.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::InvalidArgument("axis coordinates not strictly increasing".into()));
            }
        }
        if self.dim == 0 {
            return Err(Error::InvalidArgument("manifold dimension must be at least 1".into()));
        }
        Ok(())
    }
}

fn axis_name(a: usize) -> &'static str {
    ["axis0", "axis1", "axis2"][a.min(2)]
}

/// Metric content of one time slice.
#[derive(Debug, Clone)]
pub enum MetricData {
    Circle { len: f64 },
    Line { half_len: f64 },
    Torus { len: [f64; 2] },
    Sphere { radius: f64 },
    /// Rotational quotient: `phi` is the gauge density (arclength element is
    /// `phi dx`), `psi` the fiber radius. `psi` vanishes exactly at the poles.
    Warped { phi: Vec<f64>, psi: Vec<f64> },
    SphereCircle { radius: f64, circle_len: f64 },
}

/// One time slice: discretization, metric data and positive volume weights.
#[derive(Debug, Clone)]
pub struct MetricSlice {
    pub disc: Arc<Discretization>,
    pub metric: MetricData,
    /// Per-node volume weights, units length^n. Always positive.
    pub weights: Vec<f64>,
    pub time: f64,
}

impl MetricSlice {
    pub fn total_volume(&self) -> f64 {
        self.weights.iter().sum()
    }

    /// Representative mesh width used for tolerance policies and time steps.
    /// For latitude grids this is the meridian spacing; azimuthal crowding
    /// near the poles is a chart artifact and does not enter.
    pub fn mesh_width(&self) -> f64 {
        match &self.metric {
            MetricData::Circle { len } => len / self.disc.shape[0] as f64,
            MetricData::Line { half_len } => 2.0 * half_len / self.disc.shape[0] as f64,
            MetricData::Torus { len } => {
                let h0 = len[0] / self.disc.shape[0] as f64;
                let h1 = len[1] / self.disc.shape[1] as f64;
                h0.max(h1)
            }
            MetricData::Sphere { radius } => {
                radius * std::f64::consts::PI / self.disc.shape[0] as f64
            }
            MetricData::Warped { phi, .. } => {
                let nx = self.disc.shape[0];
                let dx = 1.0 / (nx - 1) as f64;
                let mut h: f64 = 0.0;
                for i in 0..nx - 1 {
                    h = h.max(0.5 * (phi[i] + phi[i + 1]) * dx);
                }
                h
            }
            MetricData::SphereCircle { radius, circle_len } => {
                let hs = radius * std::f64::consts::PI / self.disc.shape[0] as f64;
                let hc = circle_len / self.disc.shape[2] as f64;
                hs.max(hc)
            }
        }
    }

    /// Arclength positions along the gauge axis of a warped slice.
    pub fn warped_arclength(&self) -> Vec<f64> {
        match &self.metric {
            MetricData::Warped { phi, .. } => {
                let nx = self.disc.shape[0];
                let dx = 1.0 / (nx - 1) as f64;
                let mut s = vec![0.0; nx];
                for i in 1..nx {
                    s[i] = s[i - 1] + 0.5 * (phi[i - 1] + phi[i]) * dx;
                }
                s
            }
            _ => panic!("warped_arclength on a non-warped slice"),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.weights.len() != self.disc.node_count() {
            return Err(Error::InvalidArgument("weight vector length mismatch".into()));
        }
        if self.weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::InvalidArgument("volume weights must be positive".into()));
        }
        if let MetricData::Warped { psi, .. } = &self.metric {
            let n = psi.len();
            if psi[0] != 0.0 || psi[n - 1] != 0.0 {
                return Err(Error::PoleCondition("psi must vanish exactly at the poles".into()));
            }
            if psi[1..n - 1].iter().any(|&p| !(p > 0.0)) {
                return Err(Error::PoleCondition("psi must be positive away from the poles".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMethod {
    Analytic,
    GraphShortestPath,
}

/// Dense table of pairwise geodesic distances.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    pub n: usize,
    pub method: DistanceMethod,
    data: Vec<f64>,
}

impl DistanceTable {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn diameter(&self) -> f64 {
        self.data.iter().cloned().fold(0.0, f64::max)
    }

    /// Scale every entry by `c` (a homothety of the slice).
    pub fn scaled(&self, c: f64) -> DistanceTable {
        DistanceTable { n: self.n, method: self.method, data: self.data.iter().map(|d| d * c).collect() }
    }
}

/// Scalar curvature, curvature norm and Ricci eigenvalue bounds per node.
///
/// `rm_norm` uses the maximum absolute sectional curvature as the norm
/// convention, which is exactly computable on the model spaces.
#[derive(Debug, Clone)]
pub struct CurvatureFields {
    pub scalar: Vec<f64>,
    pub rm_norm: Vec<f64>,
    pub ricci_min: Vec<f64>,
    pub ricci_max: Vec<f64>,
}

impl CurvatureFields {
    pub fn scalar_min(&self) -> f64 {
        self.scalar.iter().cloned().fold(f64::INFINITY, f64::min)
    }

    pub fn rm_max(&self) -> f64 {
        self.rm_norm.iter().cloned().fold(0.0, f64::max)
    }
}

/// Geometry section of a scenario configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum GeometryDescriptor {
    Circle { len: f64, nodes: usize },
    LineSegmentWithAbsorbingEnds { half_len: f64, nodes: usize },
    FlatTorusGrid { len: [f64; 2], nodes: [usize; 2] },
    SphereLatitudeGrid { radius: f64, nodes: [usize; 2] },
    WarpedProfileGrid { dim: usize, nodes: usize, profile: WarpedProfileSpec },
    SphereCircleProduct { radius: f64, circle_len: f64, nodes: [usize; 3] },
}

/// Initial warped profile: either a named preset or explicit samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "kebab-case")]
pub enum WarpedProfileSpec {
    /// Round sphere of the given radius in warped coordinates.
    Round { radius: f64 },
    /// Two bulbs of radius `bulb` joined by a neck of radius `neck * bulb`.
    Dumbbell { bulb: f64, neck: f64 },
    /// Explicit samples of (phi, psi) on the uniform gauge grid.
    Samples { phi: Vec<f64>, psi: Vec<f64> },
}

/// Build the node set and the time-zero metric slice for a descriptor.
pub fn build_geometry(spec: &GeometryDescriptor) -> Result<(Arc<Discretization>, MetricSlice)> {
    match spec {
        GeometryDescriptor::Circle { len, nodes } => {
            check_positive("len", *len)?;
            let disc = Arc::new(Discretization {
                kind: Kind::Circle,
                dim: 1,
                shape: vec![*nodes],
                coords: vec![uniform_coords(0.0, *len, *nodes, true)],
                periodic: vec![true],
            });
            disc.validate()?;
            let h = len / *nodes as f64;
            let slice = MetricSlice {
                disc,
                metric: MetricData::Circle { len: *len },
                weights: vec![h; *nodes],
                time: 0.0,
            };
            slice.validate()?;
            Ok((slice.disc.clone(), slice))
        }
        GeometryDescriptor::LineSegmentWithAbsorbingEnds { half_len, nodes } => {
            check_positive("half_len", *half_len)?;
            let h = 2.0 * half_len / *nodes as f64;
            let coords: Vec<f64> = (0..*nodes).map(|i| -half_len + (i as f64 + 0.5) * h).collect();
            let disc = Arc::new(Discretization {
                kind: Kind::LineSegmentWithAbsorbingEnds,
                dim: 1,
                shape: vec![*nodes],
                coords: vec![coords],
                periodic: vec![false],
            });
            disc.validate()?;
            let slice = MetricSlice {
                disc,
                metric: MetricData::Line { half_len: *half_len },
                weights: vec![h; *nodes],
                time: 0.0,
            };
            slice.validate()?;
            Ok((slice.disc.clone(), slice))
        }
        GeometryDescriptor::FlatTorusGrid { len, nodes } => {
            check_positive("len[0]", len[0])?;
            check_positive("len[1]", len[1])?;
            let disc = Arc::new(Discretization {
                kind: Kind::FlatTorusGrid,
                dim: 2,
                shape: nodes.to_vec(),
                coords: vec![
                    uniform_coords(0.0, len[0], nodes[0], true),
                    uniform_coords(0.0, len[1], nodes[1], true),
                ],
                periodic: vec![true, true],
            });
            disc.validate()?;
            let w = (len[0] / nodes[0] as f64) * (len[1] / nodes[1] as f64);
            let slice = MetricSlice {
                disc,
                metric: MetricData::Torus { len: *len },
                weights: vec![w; nodes[0] * nodes[1]],
                time: 0.0,
            };
            slice.validate()?;
            Ok((slice.disc.clone(), slice))
        }
        GeometryDescriptor::SphereLatitudeGrid { radius, nodes } => {
            check_positive("radius", *radius)?;
            let (disc, weights) = sphere_grid(nodes[0], nodes[1], *radius)?;
            let slice = MetricSlice {
                disc,
                metric: MetricData::Sphere { radius: *radius },
                weights,
                time: 0.0,
            };
            slice.validate()?;
            Ok((slice.disc.clone(), slice))
        }
        GeometryDescriptor::WarpedProfileGrid { dim, nodes, profile } => {
            if !(2..=3).contains(dim) {
                return Err(Error::UnsupportedKind(format!("warped profile with n = {dim}")));
            }
            let (phi, psi) = profile_samples(profile, *nodes)?;
            let slice = warped_slice(*dim, phi, psi, 0.0)?;
            Ok((slice.disc.clone(), slice))
        }
        GeometryDescriptor::SphereCircleProduct { radius, circle_len, nodes } => {
            check_positive("radius", *radius)?;
            check_positive("circle_len", *circle_len)?;
            let (sph, _) = sphere_grid(nodes[0], nodes[1], *radius)?;
            let disc = Arc::new(Discretization {
                kind: Kind::SphereCircleProduct,
                dim: 3,
                shape: vec![nodes[0], nodes[1], nodes[2]],
                coords: vec![
                    sph.coords[0].clone(),
                    sph.coords[1].clone(),
                    uniform_coords(0.0, *circle_len, nodes[2], true),
                ],
                periodic: vec![false, true, true],
            });
            disc.validate()?;
            let weights = sphere_circle_weights(&disc, *radius, *circle_len);
            let slice = MetricSlice {
                disc,
                metric: MetricData::SphereCircle { radius: *radius, circle_len: *circle_len },
                weights,
                time: 0.0,
            };
            slice.validate()?;
            Ok((slice.disc.clone(), slice))
        }
    }
}

fn check_positive(name: &'static str, value: f64) -> Result<()> {
    if value > 0.0 {
        Ok(())
    } else {
        Err(Error::NonPositiveSize { name, value })
    }
}

fn uniform_coords(start: f64, len: f64, n: usize, periodic: bool) -> Vec<f64> {
    let h = if periodic { len / n as f64 } else { len / (n - 1) as f64 };
    (0..n).map(|i| start + i as f64 * h).collect()
}

fn sphere_grid(ntheta: usize, nphi: usize, radius: f64) -> Result<(Arc<Discretization>, Vec<f64>)> {
    let dtheta = std::f64::consts::PI / ntheta as f64;
    let thetas: Vec<f64> = (0..ntheta).map(|i| (i as f64 + 0.5) * dtheta).collect();
    let disc = Arc::new(Discretization {
        kind: Kind::SphereLatitudeGrid,
        dim: 2,
        shape: vec![ntheta, nphi],
        coords: vec![thetas, uniform_coords(0.0, 2.0 * std::f64::consts::PI, nphi, true)],
        periodic: vec![false, true],
    });
    disc.validate()?;
    Ok((disc.clone(), sphere_weights(&disc, radius)))
}

/// Band-exact quadrature weights: each latitude band contributes its exact
/// area, split uniformly over the longitudes.
pub(crate) fn sphere_weights(disc: &Discretization, radius: f64) -> Vec<f64> {
    let (ntheta, nphi) = (disc.shape[0], disc.shape[1]);
    let dtheta = std::f64::consts::PI / ntheta as f64;
    let dphi = 2.0 * std::f64::consts::PI / nphi as f64;
    let mut w = Vec::with_capacity(ntheta * nphi);
    for i in 0..ntheta {
        let lo = i as f64 * dtheta;
        let hi = lo + dtheta;
        let band = radius * radius * (lo.cos() - hi.cos()) * dphi;
        for _ in 0..nphi {
            w.push(band);
        }
    }
    w
}

pub(crate) fn sphere_circle_weights(disc: &Discretization, radius: f64, circle_len: f64) -> Vec<f64> {
    let (ntheta, nphi, nz) = (disc.shape[0], disc.shape[1], disc.shape[2]);
    let dtheta = std::f64::consts::PI / ntheta as f64;
    let dphi = 2.0 * std::f64::consts::PI / nphi as f64;
    let dz = circle_len / nz as f64;
    let mut w = Vec::with_capacity(ntheta * nphi * nz);
    for i in 0..ntheta {
        let lo = i as f64 * dtheta;
        let band = radius * radius * ((lo).cos() - (lo + dtheta).cos()) * dphi * dz;
        for _ in 0..nphi * nz {
            w.push(band);
        }
    }
    w
}

fn profile_samples(spec: &WarpedProfileSpec, nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let nx = nodes;
    if nx < MIN_NODES_PER_AXIS {
        return Err(Error::ResolutionTooLow { axis: "axis0", got: nx, min: MIN_NODES_PER_AXIS });
    }
    let xs: Vec<f64> = (0..nx).map(|i| i as f64 / (nx - 1) as f64).collect();
    match spec {
        WarpedProfileSpec::Round { radius } => {
            check_positive("radius", *radius)?;
            // psi = rho sin(pi x), arclength rho*pi*x: phi = rho*pi.
            let phi = vec![radius * std::f64::consts::PI; nx];
            let psi = xs.iter().map(|&x| radius * (std::f64::consts::PI * x).sin()).collect();
            Ok((phi, fix_poles(psi)))
        }
        WarpedProfileSpec::Dumbbell { bulb, neck } => {
            check_positive("bulb", *bulb)?;
            if !(*neck > 0.0 && *neck < 1.0) {
                return Err(Error::InvalidArgument("neck must lie in (0,1)".into()));
            }
            // Two spherical bulbs joined by a pinched waist; the broad
            // modulation keeps psi smooth with |dpsi/ds| = 1 at the poles.
            let total_len = 2.0 * std::f64::consts::PI * bulb;
            let phi = vec![total_len; nx];
            let psi = xs
                .iter()
                .map(|&x| {
                    let base = (std::f64::consts::PI * x).sin();
                    let waist = 1.0 - (1.0 - neck) * (-((x - 0.5) / 0.28).powi(2)).exp();
                    2.0 * bulb * base * waist
                })
                .collect();
            Ok((phi, fix_poles(psi)))
        }
        WarpedProfileSpec::Samples { phi, psi } => {
            if phi.len() != nx || psi.len() != nx {
                return Err(Error::InvalidArgument("profile sample length mismatch".into()));
            }
            Ok((phi.clone(), psi.clone()))
        }
    }
}

fn fix_poles(mut psi: Vec<f64>) -> Vec<f64> {
    let n = psi.len();
    psi[0] = 0.0;
    psi[n - 1] = 0.0;
    psi
}

/// Assemble a warped metric slice with positive pole-cell weights.
pub fn warped_slice(dim: usize, phi: Vec<f64>, psi: Vec<f64>, time: f64) -> Result<MetricSlice> {
    let nx = phi.len();
    if psi.len() != nx {
        return Err(Error::InvalidArgument("phi/psi length mismatch".into()));
    }
    if phi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidArgument("phi must be positive".into()));
    }
    let disc = Arc::new(Discretization {
        kind: Kind::WarpedProfileGrid,
        dim,
        shape: vec![nx],
        coords: vec![(0..nx).map(|i| i as f64 / (nx - 1) as f64).collect()],
        periodic: vec![false],
    });
    disc.validate()?;
    let weights = warped_weights(dim, &phi, &psi);
    let slice = MetricSlice { disc, metric: MetricData::Warped { phi, psi }, weights, time };
    slice.validate()?;
    Ok(slice)
}

/// Cell-integrated volume weights on the rotational quotient. Interior cells
/// use a Simpson rule on the fiber area; pole half-cells integrate the linear
/// closure psi ~ s exactly, which keeps every weight positive.
pub(crate) fn warped_weights(dim: usize, phi: &[f64], psi: &[f64]) -> Vec<f64> {
    let nx = phi.len();
    let k = dim - 1;
    let omega = unit_sphere_area(k);
    let dx = 1.0 / (nx - 1) as f64;
    let fiber = |p: f64| omega * p.powi(k as i32);
    let mut w = vec![0.0; nx];
    for i in 1..nx - 1 {
        let pl = 0.5 * (psi[i - 1] + psi[i]);
        let pr = 0.5 * (psi[i] + psi[i + 1]);
        let area = (fiber(pl) + 4.0 * fiber(psi[i]) + fiber(pr)) / 6.0;
        w[i] = area * phi[i] * dx;
    }
    // Pole half-cells: psi grows linearly from 0, so the fiber area integral
    // over the half cell is fiber(psi_half)/(k+1) * (ds/2).
    let p_half0 = 0.5 * (psi[0] + psi[1]);
    w[0] = fiber(p_half0) / (k as f64 + 1.0) * phi[0] * (0.5 * dx);
    let p_half1 = 0.5 * (psi[nx - 2] + psi[nx - 1]);
    w[nx - 1] = fiber(p_half1) / (k as f64 + 1.0) * phi[nx - 1] * (0.5 * dx);
    w
}

/// Pairwise geodesic distances for a slice. Homogeneous kinds use closed
/// forms; warped quotients use chain shortest paths along the gauge axis,
/// which carry an O(h) metric error recorded by the method tag.
pub fn geodesic_distance(slice: &MetricSlice) -> DistanceTable {
    let n = slice.disc.node_count();
    let mut data = vec![0.0; n * n];
    match &slice.metric {
        MetricData::Circle { len } => {
            let xs = &slice.disc.coords[0];
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] = circle_dist(xs[i], xs[j], *len);
                }
            }
            DistanceTable { n, method: DistanceMethod::Analytic, data }
        }
        MetricData::Line { .. } => {
            let xs = &slice.disc.coords[0];
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] = (xs[i] - xs[j]).abs();
                }
            }
            DistanceTable { n, method: DistanceMethod::Analytic, data }
        }
        MetricData::Torus { len } => {
            let (n0, n1) = (slice.disc.shape[0], slice.disc.shape[1]);
            let xs = &slice.disc.coords[0];
            let ys = &slice.disc.coords[1];
            for i0 in 0..n0 {
                for i1 in 0..n1 {
                    let i = i0 * n1 + i1;
                    for j0 in 0..n0 {
                        let dx = circle_dist(xs[i0], xs[j0], len[0]);
                        for j1 in 0..n1 {
                            let dy = circle_dist(ys[i1], ys[j1], len[1]);
                            data[i * n + j0 * n1 + j1] = (dx * dx + dy * dy).sqrt();
                        }
                    }
                }
            }
            DistanceTable { n, method: DistanceMethod::Analytic, data }
        }
        MetricData::Sphere { radius } => {
            let (nt, np) = (slice.disc.shape[0], slice.disc.shape[1]);
            let th = &slice.disc.coords[0];
            let ph = &slice.disc.coords[1];
            let (sin_t, cos_t): (Vec<f64>, Vec<f64>) =
                th.iter().map(|t| (t.sin(), t.cos())).unzip();
            for i0 in 0..nt {
                for i1 in 0..np {
                    let i = i0 * np + i1;
                    for j0 in 0..nt {
                        for j1 in 0..np {
                            let cosg = cos_t[i0] * cos_t[j0]
                                + sin_t[i0] * sin_t[j0] * (ph[i1] - ph[j1]).cos();
                            data[i * n + j0 * np + j1] = radius * cosg.clamp(-1.0, 1.0).acos();
                        }
                    }
                    data[i * n + i] = 0.0;
                }
            }
            DistanceTable { n, method: DistanceMethod::Analytic, data }
        }
        MetricData::Warped { .. } => {
            let s = slice.warped_arclength();
            for i in 0..n {
                for j in 0..n {
                    data[i * n + j] = (s[i] - s[j]).abs();
                }
            }
            DistanceTable { n, method: DistanceMethod::GraphShortestPath, data }
        }
        MetricData::SphereCircle { radius, circle_len } => {
            let (nt, np, nz) = (slice.disc.shape[0], slice.disc.shape[1], slice.disc.shape[2]);
            let th = &slice.disc.coords[0];
            let ph = &slice.disc.coords[1];
            let zs = &slice.disc.coords[2];
            for i0 in 0..nt {
                for i1 in 0..np {
                    for i2 in 0..nz {
                        let i = (i0 * np + i1) * nz + i2;
                        for j0 in 0..nt {
                            for j1 in 0..np {
                                let cosg = th[i0].cos() * th[j0].cos()
                                    + th[i0].sin() * th[j0].sin() * (ph[i1] - ph[j1]).cos();
                                let ds = radius * cosg.clamp(-1.0, 1.0).acos();
                                for j2 in 0..nz {
                                    let dz = circle_dist(zs[i2], zs[j2], *circle_len);
                                    data[i * n + (j0 * np + j1) * nz + j2] =
                                        (ds * ds + dz * dz).sqrt();
                                }
                            }
                        }
                        data[i * n + i] = 0.0;
                    }
                }
            }
            DistanceTable { n, method: DistanceMethod::Analytic, data }
        }
    }
}

fn circle_dist(a: f64, b: f64, len: f64) -> f64 {
    let d = (a - b).abs() % len;
    d.min(len - d)
}

/// One row of the geodesic distance table in O(N), without materializing
/// the full table.
pub fn geodesic_row(slice: &MetricSlice, node: usize) -> Vec<f64> {
    let disc = &slice.disc;
    let n = disc.node_count();
    let mut row = vec![0.0; n];
    match &slice.metric {
        MetricData::Circle { len } => {
            let xs = &disc.coords[0];
            for j in 0..n {
                row[j] = circle_dist(xs[node], xs[j], *len);
            }
        }
        MetricData::Line { .. } => {
            let xs = &disc.coords[0];
            for j in 0..n {
                row[j] = (xs[node] - xs[j]).abs();
            }
        }
        MetricData::Torus { len } => {
            let n1 = disc.shape[1];
            let (i0, i1) = (node / n1, node % n1);
            let xs = &disc.coords[0];
            let ys = &disc.coords[1];
            for j0 in 0..disc.shape[0] {
                let dx = circle_dist(xs[i0], xs[j0], len[0]);
                for j1 in 0..n1 {
                    let dy = circle_dist(ys[i1], ys[j1], len[1]);
                    row[j0 * n1 + j1] = (dx * dx + dy * dy).sqrt();
                }
            }
        }
        MetricData::Sphere { radius } => {
            let np = disc.shape[1];
            let (i0, i1) = (node / np, node % np);
            let th = &disc.coords[0];
            let ph = &disc.coords[1];
            let (st, ct) = (th[i0].sin(), th[i0].cos());
            for j0 in 0..disc.shape[0] {
                let (sj, cj) = (th[j0].sin(), th[j0].cos());
                for j1 in 0..np {
                    let cosg = ct * cj + st * sj * (ph[i1] - ph[j1]).cos();
                    row[j0 * np + j1] = radius * cosg.clamp(-1.0, 1.0).acos();
                }
            }
            row[node] = 0.0;
        }
        MetricData::Warped { .. } => {
            let s_arc = slice.warped_arclength();
            for j in 0..n {
                row[j] = (s_arc[node] - s_arc[j]).abs();
            }
        }
        MetricData::SphereCircle { .. } => {
            let full = geodesic_distance(slice);
            row.copy_from_slice(full.row(node));
        }
    }
    row
}

/// Curvature fields of a slice: closed forms on homogeneous kinds, finite
/// differences of the profile on warped kinds with one-sided pole stencils.
pub fn curvature_fields(slice: &MetricSlice) -> Result<CurvatureFields> {
    let n = slice.disc.node_count();
    match &slice.metric {
        MetricData::Circle { .. } | MetricData::Line { .. } | MetricData::Torus { .. } => {
            Ok(CurvatureFields {
                scalar: vec![0.0; n],
                rm_norm: vec![0.0; n],
                ricci_min: vec![0.0; n],
                ricci_max: vec![0.0; n],
            })
        }
        MetricData::Sphere { radius } => {
            let dim = slice.disc.dim as f64;
            let sec = 1.0 / (radius * radius);
            let r = dim * (dim - 1.0) * sec;
            let ric = (dim - 1.0) * sec;
            Ok(CurvatureFields {
                scalar: vec![r; n],
                rm_norm: vec![sec; n],
                ricci_min: vec![ric; n],
                ricci_max: vec![ric; n],
            })
        }
        MetricData::SphereCircle { radius, .. } => {
            let sec = 1.0 / (radius * radius);
            Ok(CurvatureFields {
                scalar: vec![2.0 * sec; n],
                rm_norm: vec![sec; n],
                ricci_min: vec![0.0; n],
                ricci_max: vec![sec; n],
            })
        }
        MetricData::Warped { phi, psi } => warped_curvature(slice, phi, psi),
    }
}

fn warped_curvature(slice: &MetricSlice, phi: &[f64], psi: &[f64]) -> Result<CurvatureFields> {
    let nx = phi.len();
    let dim = slice.disc.dim;
    let s = slice.warped_arclength();
    check_pole_closure(&s, psi)?;

    // First and second arclength derivatives on the nonuniform arclength
    // grid; one-sided stencils at the poles.
    let dpsi = d1_nonuniform(&s, psi);
    let d2psi = d2_nonuniform(&s, psi);

    let mut scalar = vec![0.0; nx];
    let mut rm = vec![0.0; nx];
    let mut ric_min = vec![0.0; nx];
    let mut ric_max = vec![0.0; nx];
    let k = (dim - 1) as f64;
    for i in 0..nx {
        let (k_rad, k_sph) = if i == 0 || i == nx - 1 {
            // Smooth closure: both sectional curvatures agree at the pole.
            let j = if i == 0 { 1 } else { nx - 2 };
            let kr = -d2psi[j] / psi[j];
            (kr, kr)
        } else {
            let kr = -d2psi[i] / psi[i];
            let ks = (1.0 - dpsi[i] * dpsi[i]) / (psi[i] * psi[i]);
            (kr, ks)
        };
        let k_sph_eff = if dim >= 3 { k_sph } else { 0.0 };
        scalar[i] = 2.0 * k * k_rad + k * (k - 1.0) * k_sph_eff;
        rm[i] = if dim >= 3 { k_rad.abs().max(k_sph.abs()) } else { k_rad.abs() };
        let ric_rad = k * k_rad;
        let ric_sph = k_rad + (k - 1.0) * k_sph_eff;
        ric_min[i] = ric_rad.min(ric_sph);
        ric_max[i] = ric_rad.max(ric_sph);
    }
    Ok(CurvatureFields { scalar, rm_norm: rm, ricci_min: ric_min, ricci_max: ric_max })
}

fn check_pole_closure(s: &[f64], psi: &[f64]) -> Result<()> {
    let n = psi.len();
    let slope0 = (psi[1] - psi[0]) / (s[1] - s[0]);
    let slope1 = (psi[n - 1] - psi[n - 2]) / (s[n - 1] - s[n - 2]);
    // The smooth closure needs |dpsi/ds| = 1 at the poles; the one-sided
    // difference sees the slope half a cell in, so allow a curvature-sized
    // deviation.
    let tol = 0.2;
    if (slope0 - 1.0).abs() > tol || (slope1 + 1.0).abs() > tol {
        return Err(Error::PoleCondition(format!(
            "pole slopes ({slope0:.3}, {slope1:.3}) deviate from (+1, -1)"
        )));
    }
    Ok(())
}

pub(crate) fn d1_nonuniform(s: &[f64], f: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        let hl = s[i] - s[i - 1];
        let hr = s[i + 1] - s[i];
        d[i] = (f[i + 1] * hl * hl - f[i - 1] * hr * hr + f[i] * (hr * hr - hl * hl))
            / (hl * hr * (hl + hr));
    }
    d[0] = (f[1] - f[0]) / (s[1] - s[0]);
    d[n - 1] = (f[n - 1] - f[n - 2]) / (s[n - 1] - s[n - 2]);
    d
}

pub(crate) fn d2_nonuniform(s: &[f64], f: &[f64]) -> Vec<f64> {
    let n = s.len();
    let mut d = vec![0.0; n];
    for i in 1..n - 1 {
        let hl = s[i] - s[i - 1];
        let hr = s[i + 1] - s[i];
        d[i] = 2.0 * (f[i - 1] * hr + f[i + 1] * hl - f[i] * (hl + hr)) / (hl * hr * (hl + hr));
    }
    d[0] = d[1];
    d[n - 1] = d[n - 2];
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn sphere_total_volume_is_exact() {
        let (_, slice) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
            radius: 1.0,
            nodes: [64, 128],
        })
        .unwrap();
        assert_abs_diff_eq!(slice.total_volume(), 4.0 * std::f64::consts::PI, epsilon = 1e-6);
    }

    #[test]
    fn torus_total_volume_is_exact() {
        let (_, slice) = build_geometry(&GeometryDescriptor::FlatTorusGrid {
            len: [1.0, 1.0],
            nodes: [64, 64],
        })
        .unwrap();
        assert_abs_diff_eq!(slice.total_volume(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn circle_weights_are_uniform() {
        let (_, slice) =
            build_geometry(&GeometryDescriptor::Circle { len: 2.0 * std::f64::consts::PI, nodes: 256 })
                .unwrap();
        let expect = 2.0 * std::f64::consts::PI / 256.0;
        for &w in &slice.weights {
            assert_abs_diff_eq!(w, expect, epsilon = 1e-15);
        }
    }

    #[test]
    fn build_rejects_bad_parameters() {
        assert!(matches!(
            build_geometry(&GeometryDescriptor::Circle { len: -1.0, nodes: 64 }),
            Err(Error::NonPositiveSize { .. })
        ));
        assert!(matches!(
            build_geometry(&GeometryDescriptor::Circle { len: 1.0, nodes: 4 }),
            Err(Error::ResolutionTooLow { .. })
        ));
    }

    #[test]
    fn sphere_distances_match_closed_forms() {
        let (_, slice) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
            radius: 1.0,
            nodes: [16, 32],
        })
        .unwrap();
        let table = geodesic_distance(&slice);
        let disc = &slice.disc;
        // Node nearest the north pole against a node on the same meridian a
        // quarter circle away: distance is the colatitude difference.
        let i = disc.flat_index(&[0, 0]);
        let jrow = disc.shape[0] / 2;
        let j = disc.flat_index(&[jrow, 0]);
        let expect = disc.coords[0][jrow] - disc.coords[0][0];
        assert_abs_diff_eq!(table.get(i, j), expect, epsilon = 1e-12);
        // Antipodal pair within the grid: same row mirrored, opposite phi.
        let a = disc.flat_index(&[3, 0]);
        let b = disc.flat_index(&[disc.shape[0] - 1 - 3, disc.shape[1] / 2]);
        assert_abs_diff_eq!(table.get(a, b), std::f64::consts::PI, epsilon = 1e-12);
    }

    #[test]
    fn torus_wraps_distances() {
        let (_, slice) = build_geometry(&GeometryDescriptor::FlatTorusGrid {
            len: [1.0, 1.0],
            nodes: [16, 16],
        })
        .unwrap();
        let table = geodesic_distance(&slice);
        let disc = &slice.disc;
        let i = disc.flat_index(&[0, 0]);
        let j = disc.flat_index(&[12, 0]); // x = 0.75 -> wrap distance 0.25
        assert_abs_diff_eq!(table.get(i, j), 0.25, epsilon = 1e-12);
    }

    #[test]
    fn flat_kinds_have_zero_curvature() {
        let (_, slice) = build_geometry(&GeometryDescriptor::FlatTorusGrid {
            len: [1.0, 2.0],
            nodes: [16, 16],
        })
        .unwrap();
        let c = curvature_fields(&slice).unwrap();
        assert!(c.scalar.iter().all(|&r| r == 0.0));
        assert!(c.rm_norm.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn unit_sphere_curvature() {
        let (_, slice) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
            radius: 1.0,
            nodes: [16, 32],
        })
        .unwrap();
        let c = curvature_fields(&slice).unwrap();
        for i in 0..slice.disc.node_count() {
            assert_abs_diff_eq!(c.scalar[i], 2.0, epsilon = 1e-14);
            assert_abs_diff_eq!(c.rm_norm[i], 1.0, epsilon = 1e-14);
        }
    }

    #[test]
    fn warped_round_profile_matches_sphere_curvature() {
        let (_, slice) = build_geometry(&GeometryDescriptor::WarpedProfileGrid {
            dim: 2,
            nodes: 256,
            profile: WarpedProfileSpec::Round { radius: 1.0 },
        })
        .unwrap();
        let c = curvature_fields(&slice).unwrap();
        // Interior nodes: R = 2 on the unit round sphere, O(h^2) stencil.
        for i in 4..252 {
            assert_abs_diff_eq!(c.scalar[i], 2.0, epsilon = 5e-3);
        }
        // Total volume is 4 pi within O(h^2).
        assert_abs_diff_eq!(slice.total_volume(), 4.0 * std::f64::consts::PI, epsilon = 1e-3);
    }

    #[test]
    fn warped_pole_violation_is_reported() {
        let nx = 64;
        let phi = vec![1.0; nx];
        let mut psi: Vec<f64> = (0..nx)
            .map(|i| (std::f64::consts::PI * i as f64 / (nx - 1) as f64).sin() * 0.1)
            .collect();
        psi[0] = 0.0;
        psi[nx - 1] = 0.0;
        let slice = warped_slice(2, phi, psi, 0.0).unwrap();
        assert!(matches!(curvature_fields(&slice), Err(Error::PoleCondition(_))));
    }

    #[test]
    fn distance_table_metric_axioms_on_sampled_triples() {
        let (_, slice) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
            radius: 2.0,
            nodes: [12, 24],
        })
        .unwrap();
        let t = geodesic_distance(&slice);
        let n = t.n;
        let mut state = 12345u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 33) as usize % n
        };
        for _ in 0..2000 {
            let (i, j, k) = (next(), next(), next());
            assert_eq!(t.get(i, i), 0.0);
            assert!((t.get(i, j) - t.get(j, i)).abs() < 1e-12);
            assert!(t.get(i, k) <= t.get(i, j) + t.get(j, k) + 1e-9);
        }
    }
}
