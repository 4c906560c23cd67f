//! Flow scenarios: analytic model (super) Ricci flows and the numerically
//! stepped rotationally symmetric Ricci flow, plus curvature-scale and
//! scalar-minimum queries.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    build_geometry, curvature_fields, geodesic_distance, warped_slice, CurvatureFields,
    Discretization, DistanceTable, GeometryDescriptor, MetricData, MetricSlice,
    WarpedProfileSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FlowClass {
    Ricci,
    SuperRicciStatic,
}

impl std::fmt::Display for FlowClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FlowClass::Ricci => f.write_str("ricci"),
            FlowClass::SuperRicciStatic => f.write_str("super-ricci-static"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelTag {
    EuclideanLine,
    Circle,
    FlatTorus,
    ShrinkingSphere,
    ShrinkingCylinder,
    WarpedRotsym,
    StaticSphere,
}

impl std::fmt::Display for ModelTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelTag::EuclideanLine => "euclidean-line",
            ModelTag::Circle => "circle",
            ModelTag::FlatTorus => "flat-torus",
            ModelTag::ShrinkingSphere => "shrinking-sphere",
            ModelTag::ShrinkingCylinder => "shrinking-cylinder",
            ModelTag::WarpedRotsym => "warped-rotsym",
            ModelTag::StaticSphere => "static-sphere",
        };
        f.write_str(s)
    }
}

/// Model descriptor: which flow to build on which geometry.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum ModelSpec {
    EuclideanLine { half_len: f64, nodes: usize },
    Circle { len: f64, nodes: usize },
    FlatTorus { len: [f64; 2], nodes: [usize; 2] },
    ShrinkingSphere { radius: f64, nodes: [usize; 2] },
    StaticSphere { radius: f64, nodes: [usize; 2] },
    ShrinkingCylinder { radius: f64, circle_len: f64, nodes: [usize; 3] },
    WarpedRotsym { dim: usize, nodes: usize, profile: WarpedProfileSpec },
    /// Static warped profile, admissible as a super Ricci flow when its
    /// Ricci curvature is nonnegative.
    WarpedStatic { dim: usize, nodes: usize, profile: WarpedProfileSpec },
}

/// A time-indexed family of metric slices with curvature fields.
#[derive(Debug, Clone)]
pub struct FlowScenario {
    pub model: ModelTag,
    pub class: FlowClass,
    pub disc: Arc<Discretization>,
    pub times: Vec<f64>,
    pub slices: Vec<MetricSlice>,
    pub curvatures: Vec<CurvatureFields>,
    /// Per-time minimum of the scalar curvature.
    pub r_min: Vec<f64>,
    /// Discrete flow-equation residuals recorded while stepping (warped only).
    pub step_residuals: Vec<f64>,
}

impl FlowScenario {
    pub fn dim(&self) -> usize {
        self.disc.dim
    }

    pub fn interval(&self) -> (f64, f64) {
        (self.times[0], *self.times.last().unwrap())
    }

    pub fn contains_time(&self, t: f64) -> bool {
        let (a, b) = self.interval();
        t >= a - 1e-12 && t <= b + 1e-12
    }

    pub fn clamp_time(&self, t: f64) -> f64 {
        let (a, b) = self.interval();
        t.clamp(a, b)
    }

    /// Index of the nearest stored time.
    pub fn nearest_time_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut err = f64::INFINITY;
        for (k, &tk) in self.times.iter().enumerate() {
            let e = (tk - t).abs();
            if e < err {
                err = e;
                best = k;
            }
        }
        best
    }

    /// Metric slice at an arbitrary time inside the interval. Closed form
    /// for analytic models, profile interpolation for warped flows.
    pub fn slice_at(&self, t: f64) -> MetricSlice {
        let t = self.clamp_time(t);
        match self.model {
            ModelTag::EuclideanLine
            | ModelTag::Circle
            | ModelTag::FlatTorus
            | ModelTag::StaticSphere => {
                let mut s = self.slices[0].clone();
                s.time = t;
                s
            }
            ModelTag::ShrinkingSphere => {
                let rho0 = match &self.slices[0].metric {
                    MetricData::Sphere { radius } => *radius,
                    _ => unreachable!(),
                };
                let t0 = self.slices[0].time;
                let n = self.dim() as f64;
                let rho2 = rho0 * rho0 - 2.0 * (n - 1.0) * (t - t0);
                let radius = rho2.sqrt();
                let disc = self.disc.clone();
                let weights = crate::geometry::sphere_weights(&disc, radius);
                MetricSlice { disc, metric: MetricData::Sphere { radius }, weights, time: t }
            }
            ModelTag::ShrinkingCylinder => {
                let (rho0, clen) = match &self.slices[0].metric {
                    MetricData::SphereCircle { radius, circle_len } => (*radius, *circle_len),
                    _ => unreachable!(),
                };
                let t0 = self.slices[0].time;
                let rho2 = rho0 * rho0 - 2.0 * (t - t0);
                let radius = rho2.sqrt();
                let disc = self.disc.clone();
                let weights = crate::geometry::sphere_circle_weights(&disc, radius, clen);
                MetricSlice {
                    disc,
                    metric: MetricData::SphereCircle { radius, circle_len: clen },
                    weights,
                    time: t,
                }
            }
            ModelTag::WarpedRotsym if self.class == FlowClass::SuperRicciStatic => {
                let mut s = self.slices[0].clone();
                s.time = t;
                s
            }
            ModelTag::WarpedRotsym => {
                let k = match self.times.iter().position(|&tk| tk >= t - 1e-15) {
                    Some(0) => return self.slices[0].clone(),
                    Some(k) => k,
                    None => return self.slices.last().unwrap().clone(),
                };
                let (ta, tb) = (self.times[k - 1], self.times[k]);
                let lam = ((t - ta) / (tb - ta)).clamp(0.0, 1.0);
                let (pa, sa) = warped_profiles(&self.slices[k - 1]);
                let (pb, sb) = warped_profiles(&self.slices[k]);
                let phi: Vec<f64> =
                    pa.iter().zip(pb).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
                let psi: Vec<f64> =
                    sa.iter().zip(sb).map(|(a, b)| (1.0 - lam) * a + lam * b).collect();
                warped_slice(self.dim(), phi, psi, t).expect("interpolated warped slice")
            }
        }
    }

    /// Curvature fields at an arbitrary time.
    pub fn curvature_at(&self, t: f64) -> CurvatureFields {
        curvature_fields(&self.slice_at(t)).expect("curvature of an interior slice")
    }

    pub fn r_min_at(&self, t: f64) -> f64 {
        self.curvature_at(t).scalar_min()
    }

    /// Geodesic distance table at an arbitrary time.
    pub fn distance_at(&self, t: f64) -> DistanceTable {
        geodesic_distance(&self.slice_at(t))
    }

    /// Max of the discrete flow-equation residual across stored slice pairs.
    /// Analytic models satisfy the flow exactly; warped flows carry the
    /// recorded stepping residual.
    pub fn flow_residual(&self) -> f64 {
        match self.model {
            ModelTag::WarpedRotsym if self.class == FlowClass::SuperRicciStatic => 0.0,
            ModelTag::WarpedRotsym => {
                self.step_residuals.iter().cloned().fold(0.0, f64::max)
            }
            ModelTag::EuclideanLine | ModelTag::Circle | ModelTag::FlatTorus => 0.0,
            ModelTag::StaticSphere => 0.0, // super Ricci flow: residual not applicable
            ModelTag::ShrinkingSphere | ModelTag::ShrinkingCylinder => {
                let n = self.dim() as f64;
                let mut worst: f64 = 0.0;
                for k in 0..self.times.len() - 1 {
                    let dtk = self.times[k + 1] - self.times[k];
                    let (r0, r1) = (radius_of(&self.slices[k]), radius_of(&self.slices[k + 1]));
                    let d_g = (r1 * r1 - r0 * r0) / dtk;
                    let lam = if self.model == ModelTag::ShrinkingSphere { n - 1.0 } else { 1.0 };
                    worst = worst.max((d_g + 2.0 * lam).abs());
                }
                worst
            }
        }
    }
}

fn radius_of(slice: &MetricSlice) -> f64 {
    match &slice.metric {
        MetricData::Sphere { radius } => *radius,
        MetricData::SphereCircle { radius, .. } => *radius,
        _ => unreachable!(),
    }
}

fn warped_profiles(slice: &MetricSlice) -> (&[f64], &[f64]) {
    match &slice.metric {
        MetricData::Warped { phi, psi } => (phi, psi),
        _ => unreachable!(),
    }
}

fn validate_times(times: &[f64]) -> Result<()> {
    if times.len() < 2 || times.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::TimeGridNotIncreasing);
    }
    Ok(())
}

/// Build a flow scenario for a model tag over a time grid.
pub fn make_model_flow(spec: &ModelSpec, times: &[f64]) -> Result<FlowScenario> {
    validate_times(times)?;
    match spec {
        ModelSpec::EuclideanLine { half_len, nodes } => static_flow(
            ModelTag::EuclideanLine,
            FlowClass::Ricci,
            &GeometryDescriptor::LineSegmentWithAbsorbingEnds { half_len: *half_len, nodes: *nodes },
            times,
        ),
        ModelSpec::Circle { len, nodes } => static_flow(
            ModelTag::Circle,
            FlowClass::Ricci,
            &GeometryDescriptor::Circle { len: *len, nodes: *nodes },
            times,
        ),
        ModelSpec::FlatTorus { len, nodes } => static_flow(
            ModelTag::FlatTorus,
            FlowClass::Ricci,
            &GeometryDescriptor::FlatTorusGrid { len: *len, nodes: *nodes },
            times,
        ),
        ModelSpec::StaticSphere { radius, nodes } => static_flow(
            ModelTag::StaticSphere,
            FlowClass::SuperRicciStatic,
            &GeometryDescriptor::SphereLatitudeGrid { radius: *radius, nodes: *nodes },
            times,
        ),
        ModelSpec::ShrinkingSphere { radius, nodes } => {
            let (disc, slice0) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
                radius: *radius,
                nodes: *nodes,
            })?;
            let n = disc.dim as f64;
            let lambda = (n - 1.0) / (radius * radius);
            let extinction = 1.0 / (2.0 * lambda);
            guard_extinction(times, extinction)?;
            let mut flow = FlowScenario {
                model: ModelTag::ShrinkingSphere,
                class: FlowClass::Ricci,
                disc,
                times: times.to_vec(),
                slices: vec![MetricSlice { time: times[0], ..slice0 }],
                curvatures: vec![],
                r_min: vec![],
                step_residuals: vec![],
            };
            // Reference slice is at t = 0 regardless of the grid start.
            flow.slices[0].time = 0.0;
            let slices: Vec<MetricSlice> = times.iter().map(|&t| flow.slice_at(t)).collect();
            flow.slices = slices;
            finish_flow(flow)
        }
        ModelSpec::ShrinkingCylinder { radius, circle_len, nodes } => {
            let (disc, slice0) = build_geometry(&GeometryDescriptor::SphereCircleProduct {
                radius: *radius,
                circle_len: *circle_len,
                nodes: *nodes,
            })?;
            let extinction = radius * radius / 2.0;
            guard_extinction(times, extinction)?;
            let mut flow = FlowScenario {
                model: ModelTag::ShrinkingCylinder,
                class: FlowClass::Ricci,
                disc,
                times: times.to_vec(),
                slices: vec![MetricSlice { time: 0.0, ..slice0 }],
                curvatures: vec![],
                r_min: vec![],
                step_residuals: vec![],
            };
            let slices: Vec<MetricSlice> = times.iter().map(|&t| flow.slice_at(t)).collect();
            flow.slices = slices;
            finish_flow(flow)
        }
        ModelSpec::WarpedRotsym { dim, nodes, profile } => {
            let (_, slice0) = build_geometry(&GeometryDescriptor::WarpedProfileGrid {
                dim: *dim,
                nodes: *nodes,
                profile: profile.clone(),
            })?;
            warped_flow(slice0, times)
        }
        ModelSpec::WarpedStatic { dim, nodes, profile } => {
            let (_, slice0) = build_geometry(&GeometryDescriptor::WarpedProfileGrid {
                dim: *dim,
                nodes: *nodes,
                profile: profile.clone(),
            })?;
            let curv = curvature_fields(&slice0)?;
            let ric_min = curv.ricci_min.iter().cloned().fold(f64::INFINITY, f64::min);
            if ric_min < -1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "static warped profile has Ric >= {ric_min:.3e} < 0, not a super Ricci flow"
                )));
            }
            static_flow(
                ModelTag::WarpedRotsym,
                FlowClass::SuperRicciStatic,
                &GeometryDescriptor::WarpedProfileGrid {
                    dim: *dim,
                    nodes: *nodes,
                    profile: profile.clone(),
                },
                times,
            )
        }
    }
}

fn guard_extinction(times: &[f64], extinction: f64) -> Result<()> {
    let last = *times.last().unwrap();
    let gap = times[times.len() - 1] - times[times.len() - 2];
    if last > extinction - 2.0 * gap {
        return Err(Error::PastExtinction { t: last, extinction });
    }
    Ok(())
}

fn static_flow(
    model: ModelTag,
    class: FlowClass,
    geom: &GeometryDescriptor,
    times: &[f64],
) -> Result<FlowScenario> {
    let (disc, slice0) = build_geometry(geom)?;
    let slices: Vec<MetricSlice> =
        times.iter().map(|&t| MetricSlice { time: t, ..slice0.clone() }).collect();
    finish_flow(FlowScenario {
        model,
        class,
        disc,
        times: times.to_vec(),
        slices,
        curvatures: vec![],
        r_min: vec![],
        step_residuals: vec![],
    })
}

fn finish_flow(mut flow: FlowScenario) -> Result<FlowScenario> {
    flow.curvatures = flow
        .slices
        .iter()
        .map(|s| curvature_fields(s))
        .collect::<Result<Vec<_>>>()?;
    flow.r_min = flow.curvatures.iter().map(|c| c.scalar_min()).collect();
    Ok(flow)
}

/// State of the rotationally symmetric Ricci flow stepper.
#[derive(Debug, Clone)]
pub struct WarpedState {
    pub dim: usize,
    pub x: Vec<f64>,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub time: f64,
}

impl WarpedState {
    pub fn from_slice(slice: &MetricSlice) -> WarpedState {
        let (phi, psi) = warped_profiles(slice);
        WarpedState {
            dim: slice.disc.dim,
            x: slice.disc.coords[0].clone(),
            phi: phi.to_vec(),
            psi: psi.to_vec(),
            time: slice.time,
        }
    }

    pub fn min_interior_psi(&self) -> f64 {
        self.psi[1..self.psi.len() - 1].iter().cloned().fold(f64::INFINITY, f64::min)
    }

    /// Profile radius at the thinnest neck: the smallest interior local
    /// minimum of psi. Nodes next to the poles, where psi scales with the
    /// arclength, never qualify. Returns the maximum of psi when no neck
    /// exists (round-type profiles).
    pub fn neck_psi(&self) -> f64 {
        let n = self.psi.len();
        let mut neck = f64::INFINITY;
        for i in 2..n - 2 {
            if self.psi[i] <= self.psi[i - 1] && self.psi[i] <= self.psi[i + 1] {
                neck = neck.min(self.psi[i]);
            }
        }
        if neck.is_finite() {
            neck
        } else {
            self.psi.iter().cloned().fold(0.0, f64::max)
        }
    }

    pub fn arclength(&self) -> Vec<f64> {
        let nx = self.x.len();
        let dx = 1.0 / (nx - 1) as f64;
        let mut s = vec![0.0; nx];
        for i in 1..nx {
            s[i] = s[i - 1] + 0.5 * (self.phi[i - 1] + self.phi[i]) * dx;
        }
        s
    }

    /// Largest stable step. The reaction term stiffens like
    /// (n-2)(1-psi_s^2)/psi^2, the gauge density moves at rate
    /// (n-1) psi_ss / psi, and the explicit/implicit coupling is kept
    /// accurate by a mesh-squared cap.
    pub fn stability_bound(&self) -> f64 {
        let s = self.arclength();
        let n = self.psi.len();
        let h_min = s.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let mut bound = 2.0 * h_min * h_min;
        let dpsi = crate::geometry::d1_nonuniform(&s, &self.psi);
        let d2psi = crate::geometry::d2_nonuniform(&s, &self.psi);
        let pole_band = 4.min(n / 8);
        for i in 1..n - 1 {
            if i >= pole_band && i < n - pole_band {
                let rate_gauge = (self.dim as f64 - 1.0) * (d2psi[i] / self.psi[i]).abs();
                if rate_gauge > 0.0 {
                    bound = bound.min(0.2 / rate_gauge);
                }
                if self.dim > 2 {
                    let stiff = (self.dim as f64 - 2.0) * (1.0 - dpsi[i] * dpsi[i]).abs()
                        / (self.psi[i] * self.psi[i]);
                    if stiff > 0.0 {
                        bound = bound.min(0.2 / stiff);
                    }
                }
            }
        }
        bound
    }

    /// Neck radius below which the grid cannot resolve the profile.
    pub fn pinch_threshold(&self) -> f64 {
        let s = self.arclength();
        let h_mean = s[s.len() - 1] / (s.len() - 1) as f64;
        4.0 * h_mean
    }
}

/// One implicit step of the rotationally symmetric Ricci flow system.
/// Diffusion of psi is implicit in arclength, the (n-2) reaction term and
/// the gauge density update are explicit. Pole values stay pinned at zero.
pub fn step_warped_ricci(state: &WarpedState, dt: f64) -> Result<(WarpedState, f64)> {
    if dt == 0.0 {
        return Ok((state.clone(), 0.0));
    }
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::InvalidArgument("dt must be non-negative and finite".into()));
    }
    let bound = state.stability_bound();
    if dt > bound {
        return Err(Error::InvalidArgument(format!(
            "dt = {dt} exceeds the stability bound {bound}"
        )));
    }
    let neck = state.neck_psi();
    let threshold = state.pinch_threshold();
    if neck < threshold {
        return Err(Error::PinchingDetected { min_psi: neck, threshold });
    }

    let nx = state.x.len();
    let n = state.dim as f64;
    let dx = 1.0 / (nx - 1) as f64;
    let s = state.arclength();
    let psi = &state.psi;
    let phi = &state.phi;

    // Reaction at old time: -(n-2)(1 - psi_s^2)/psi on interior nodes.
    // Near the poles the smooth closure psi = s - c s^3 makes this term
    // equal (n-2) psi_ss up to O(s^3); the regular form avoids the 0/0
    // division whose drift would otherwise run away.
    let dpsi = crate::geometry::d1_nonuniform(&s, psi);
    let d2_old = crate::geometry::d2_nonuniform(&s, psi);
    let pole_band = 4.min(nx / 8);
    let mut rhs = vec![0.0; nx];
    for i in 1..nx - 1 {
        let reaction = if state.dim > 2 {
            if i < pole_band || i >= nx - pole_band {
                (n - 2.0) * d2_old[i]
            } else {
                -(n - 2.0) * (1.0 - dpsi[i] * dpsi[i]) / psi[i]
            }
        } else {
            0.0
        };
        rhs[i] = psi[i] + dt * reaction;
    }

    // Implicit arclength diffusion with Dirichlet poles:
    // (I - dt D_ss) psi_new = rhs, D_ss = (1/phi) d_x ((1/phi) d_x .).
    let m = nx - 2;
    let mut diag = vec![0.0; m];
    let mut off = vec![0.0; m - 1];
    let mut b = vec![0.0; m];
    for i in 1..nx - 1 {
        let cl = 1.0 / (0.5 * (phi[i - 1] + phi[i]) * dx);
        let cr = 1.0 / (0.5 * (phi[i] + phi[i + 1]) * dx);
        let wi = phi[i] * dx;
        diag[i - 1] = wi + dt * (cl + cr);
        if i < nx - 2 {
            off[i - 1] = -dt * cr;
        }
        b[i - 1] = wi * rhs[i];
    }
    crate::solver::solve_tridiag(&diag, &off, &mut b);
    let mut psi_new = vec![0.0; nx];
    psi_new[1..nx - 1].copy_from_slice(&b);


    // Gauge density: d_t phi = (n-1) (psi_ss / psi) phi, integrated with the
    // post-step curvature ratio; exponential form keeps phi positive. The
    // ratio is ill-conditioned where psi is pinned by the pole closure, so
    // the first well-resolved interior value extends to the pole region
    // (any local stencil noise there would otherwise feed back through the
    // gauge and lock in a curvature glitch).
    let d2 = crate::geometry::d2_nonuniform(&s, &psi_new);
    let mut q = vec![0.0; nx];
    for i in 1..nx - 1 {
        q[i] = d2[i] / psi_new[i];
    }
    for i in 0..3.min(nx / 2) {
        q[i] = q[3.min(nx - 2)];
        q[nx - 1 - i] = q[nx - 1 - 3.min(nx - 2)];
    }
    let mut phi_new: Vec<f64> =
        phi.iter().zip(&q).map(|(p, qi)| p * ((n - 1.0) * qi * dt).exp()).collect();
    // Pole gauge anchor: the smooth closure has d psi / d s = 1 at the
    // poles, so the gauge density there is slaved to the discrete slope of
    // psi instead of integrating its own feedback.
    {
        let band = 3.min(nx / 8);
        for i in 0..band {
            phi_new[i] = if i == 0 {
                (4.0 * psi_new[1] - psi_new[2]) / (2.0 * dx)
            } else {
                (psi_new[i + 1] - psi_new[i - 1]) / (2.0 * dx)
            };
            let j = nx - 1 - i;
            phi_new[j] = if i == 0 {
                (4.0 * psi_new[nx - 2] - psi_new[nx - 3]) / (2.0 * dx)
            } else {
                (psi_new[j - 1] - psi_new[j + 1]) / (2.0 * dx)
            };
        }
    }

    // Discrete flow residual of the step, measured on the psi equation.
    let mut resid: f64 = 0.0;
    for i in 1..nx - 1 {
        let reaction = if state.dim > 2 {
            if i < pole_band || i >= nx - pole_band {
                (n - 2.0) * d2_old[i]
            } else {
                -(n - 2.0) * (1.0 - dpsi[i] * dpsi[i]) / psi[i]
            }
        } else {
            0.0
        };
        let lhs = (psi_new[i] - psi[i]) / dt;
        let rhs_mid = 0.5 * (d2[i] + d2_old[i]) + reaction;
        resid = resid.max((lhs - rhs_mid).abs() / (rhs_mid.abs() + 1.0));
    }

    let new_state = WarpedState {
        dim: state.dim,
        x: state.x.clone(),
        phi: phi_new,
        psi: psi_new,
        time: state.time + dt,
    };
    Ok((new_state, resid))
}

fn warped_flow(slice0: MetricSlice, times: &[f64]) -> Result<FlowScenario> {
    let mut state = WarpedState::from_slice(&slice0);
    state.time = times[0];
    let disc = slice0.disc.clone();
    let mut slices = Vec::with_capacity(times.len());
    let mut residuals = Vec::new();
    slices.push(warped_slice(state.dim, state.phi.clone(), state.psi.clone(), state.time)?);
    for &target in &times[1..] {
        while state.time < target - 1e-14 {
            let dt = (0.5 * state.stability_bound()).min(target - state.time);
            let (next, resid) = step_warped_ricci(&state, dt)?;
            residuals.push(resid);
            state = next;
        }
        state.time = target;
        slices.push(warped_slice(state.dim, state.phi.clone(), state.psi.clone(), target)?);
    }
    finish_flow(FlowScenario {
        model: ModelTag::WarpedRotsym,
        class: FlowClass::Ricci,
        disc,
        times: times.to_vec(),
        slices,
        curvatures: vec![],
        r_min: vec![],
        step_residuals: residuals,
    })
}

/// Measured scalar-curvature minima and the maximum-principle lower bounds.
#[derive(Debug, Clone, Serialize)]
pub struct ScalarMinReport {
    pub times: Vec<f64>,
    pub measured: Vec<f64>,
    /// Lower bound seeded at the first time: (n/2) R0 / ((n/2) - R0 (t - t0)).
    pub bound_from_first: Vec<f64>,
    /// Universal lower bound -n / (2 (t - t0)).
    pub universal: Vec<f64>,
    /// Indices where the measured minimum undercuts the bound beyond tol.
    pub violations: Vec<usize>,
}

pub fn scalar_min_curve(flow: &FlowScenario, tol: f64) -> Result<ScalarMinReport> {
    if flow.class != FlowClass::Ricci {
        return Err(Error::InvalidArgument(
            "scalar minimum bounds require a ricci-class flow".into(),
        ));
    }
    let n = flow.dim() as f64;
    let t0 = flow.times[0];
    let r0 = flow.r_min[0];
    let mut bound = Vec::with_capacity(flow.times.len());
    let mut universal = Vec::with_capacity(flow.times.len());
    let mut violations = Vec::new();
    for (k, &t) in flow.times.iter().enumerate() {
        let denom = 0.5 * n - r0 * (t - t0);
        let b = if denom > 0.0 { 0.5 * n * r0 / denom } else { f64::INFINITY };
        bound.push(b);
        universal.push(if t > t0 { -0.5 * n / (t - t0) } else { f64::NEG_INFINITY });
        let scale = flow.r_min[k].abs().max(b.abs()).max(1.0);
        if flow.r_min[k] < b - tol * scale || flow.r_min[k] < universal[k] - tol * scale {
            violations.push(k);
        }
    }
    Ok(ScalarMinReport {
        times: flow.times.clone(),
        measured: flow.r_min.clone(),
        bound_from_first: bound,
        universal,
        violations,
    })
}

/// Curvature scale radius: the largest r with |Rm| <= r^-2 on the two-sided
/// parabolic neighborhood B(x,t,r) x ([t - r^2, t + r^2] intersected with I).
/// Returns +infinity when |Rm| vanishes on the whole flow.
pub fn curvature_scale(flow: &FlowScenario, node: usize, t: f64) -> Result<f64> {
    if !flow.contains_time(t) {
        let (lo, hi) = flow.interval();
        return Err(Error::TimeOutsideInterval { t, lo, hi });
    }
    let rm_global: f64 = flow.curvatures.iter().map(|c| c.rm_max()).fold(0.0, f64::max);
    if rm_global == 0.0 {
        return Ok(f64::INFINITY);
    }
    let dist = flow.distance_at(t);
    let (t_lo, t_hi) = flow.interval();
    let r_hi = dist.diameter().max(((t_hi - t_lo).max(1e-30)).sqrt()) * 2.0 + 1.0;

    let admissible = |r: f64| -> bool {
        let window_lo = (t - r * r).max(t_lo);
        let window_hi = (t + r * r).min(t_hi);
        let mut sample_times: Vec<f64> = vec![window_lo, window_hi];
        for &tk in &flow.times {
            if tk > window_lo && tk < window_hi {
                sample_times.push(tk);
            }
        }
        let ball: Vec<usize> =
            (0..dist.n).filter(|&j| dist.get(node, j) <= r).collect();
        let inv_r2 = 1.0 / (r * r);
        for &ts in &sample_times {
            let c = flow.curvature_at(ts);
            for &j in &ball {
                if c.rm_norm[j] > inv_r2 {
                    return false;
                }
            }
        }
        true
    };

    let mut lo = 1e-8;
    let mut hi = r_hi;
    if !admissible(lo) {
        return Ok(lo);
    }
    if admissible(hi) {
        return Ok(hi);
    }
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if admissible(mid) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// Export a warped profile as CSV with columns x, phi, psi.
pub fn profile_to_csv(state: &WarpedState) -> String {
    let mut out = String::from("x,phi,psi\n");
    for i in 0..state.x.len() {
        out.push_str(&format!("{},{},{}\n", state.x[i], state.phi[i], state.psi[i]));
    }
    out
}

/// Parse a warped profile CSV (columns x, phi, psi with a header row).
pub fn profile_from_csv(dim: usize, text: &str) -> Result<WarpedState> {
    let mut x = Vec::new();
    let mut phi = Vec::new();
    let mut psi = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (ln == 0 && line.starts_with('x')) {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("profile csv line {} malformed", ln + 1)));
        }
        let parse = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("profile csv line {} malformed", ln + 1)))
        };
        x.push(parse(parts[0])?);
        phi.push(parse(parts[1])?);
        psi.push(parse(parts[2])?);
    }
    if x.len() < crate::geometry::MIN_NODES_PER_AXIS {
        return Err(Error::ResolutionTooLow {
            axis: "axis0",
            got: x.len(),
            min: crate::geometry::MIN_NODES_PER_AXIS,
        });
    }
    Ok(WarpedState { dim, x, phi, psi, time: 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn time_grid(a: f64, b: f64, k: usize) -> Vec<f64> {
        (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect()
    }

    #[test]
    fn unit_sphere_extinction_is_guarded() {
        let spec = ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [16, 32] };
        let err = make_model_flow(&spec, &time_grid(0.0, 0.6, 12));
        assert!(matches!(err, Err(Error::PastExtinction { extinction, .. }) if (extinction - 0.5).abs() < 1e-12));
        assert!(make_model_flow(&spec, &time_grid(0.0, 0.4, 12)).is_ok());
    }

    #[test]
    fn flat_torus_flow_is_static_with_zero_rmin() {
        let spec = ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] };
        let flow = make_model_flow(&spec, &time_grid(0.0, 1.0, 8)).unwrap();
        assert!(flow.r_min.iter().all(|&r| r == 0.0));
        assert_eq!(flow.flow_residual(), 0.0);
    }

    #[test]
    fn static_sphere_is_super_ricci() {
        let spec = ModelSpec::StaticSphere { radius: 1.0, nodes: [16, 32] };
        let flow = make_model_flow(&spec, &time_grid(0.0, 1.0, 4)).unwrap();
        assert_eq!(flow.class, FlowClass::SuperRicciStatic);
        // Ric >= 0 at every node.
        assert!(flow.curvatures[0].ricci_min.iter().all(|&r| r >= 0.0));
    }

    #[test]
    fn shrinking_sphere_scalar_curvature_scaling() {
        let spec = ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [16, 32] };
        let flow = make_model_flow(&spec, &time_grid(0.0, 0.4, 8)).unwrap();
        for (k, &t) in flow.times.iter().enumerate() {
            let expect = 2.0 / (1.0 - 2.0 * t);
            assert_abs_diff_eq!(flow.r_min[k], expect, epsilon = 1e-12 * expect);
        }
        assert!(flow.flow_residual() < 1e-12);
    }

    #[test]
    fn scalar_min_curve_matches_equality_case() {
        let spec = ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [16, 32] };
        let flow = make_model_flow(&spec, &time_grid(0.0, 0.4, 8)).unwrap();
        let report = scalar_min_curve(&flow, 1e-9).unwrap();
        for k in 0..report.times.len() {
            assert_abs_diff_eq!(
                report.measured[k],
                report.bound_from_first[k],
                epsilon = 1e-10 * report.measured[k].abs()
            );
        }
        assert!(report.violations.is_empty());
    }

    #[test]
    fn curvature_scale_flat_torus_is_infinite() {
        let spec = ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] };
        let flow = make_model_flow(&spec, &time_grid(0.0, 1.0, 4)).unwrap();
        assert!(curvature_scale(&flow, 0, 0.5).unwrap().is_infinite());
    }

    #[test]
    fn curvature_scale_shrinking_sphere_solves_the_clip() {
        // r^-2 = max over [-r^2, r^2] of 1/(1-2s) = 1/(1-2 r^2) gives r = 1/sqrt(3).
        let spec = ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [16, 32] };
        let flow = make_model_flow(&spec, &time_grid(-1.0, 0.4, 28)).unwrap();
        let r = curvature_scale(&flow, 0, 0.0).unwrap();
        assert_abs_diff_eq!(r, 1.0 / 3f64.sqrt(), epsilon = 2e-4);
    }

    #[test]
    fn curvature_scale_static_sphere_is_one() {
        let spec = ModelSpec::StaticSphere { radius: 1.0, nodes: [16, 32] };
        let flow = make_model_flow(&spec, &time_grid(-2.0, 2.0, 8)).unwrap();
        let r = curvature_scale(&flow, 5, 0.0).unwrap();
        assert_abs_diff_eq!(r, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn curvature_scale_grows_when_interval_grows() {
        // Restricting the time interval clips the parabolic neighborhood, so
        // the admissible radius can only grow or stay under restriction.
        let spec = ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [12, 24] };
        let wide = make_model_flow(&spec, &time_grid(-1.0, 0.4, 28)).unwrap();
        let narrow = make_model_flow(&spec, &time_grid(-0.05, 0.05, 8)).unwrap();
        let r_wide = curvature_scale(&wide, 0, 0.0).unwrap();
        let r_narrow = curvature_scale(&narrow, 0, 0.0).unwrap();
        assert!(r_narrow >= r_wide - 1e-6);
    }

    #[test]
    fn warped_round_sphere_follows_the_shrinking_law() {
        let spec = ModelSpec::WarpedRotsym {
            dim: 2,
            nodes: 128,
            profile: WarpedProfileSpec::Round { radius: 1.0 },
        };
        let flow = make_model_flow(&spec, &time_grid(0.0, 0.3, 10)).unwrap();
        for (k, &t) in flow.times.iter().enumerate() {
            let expect = (1.0 - 2.0 * t).sqrt();
            let (_, psi) = warped_profiles(&flow.slices[k]);
            let mid = psi[psi.len() / 2];
            assert!((mid - expect).abs() < 0.01 * expect, "t={t} mid={mid} expect={expect}");
        }
    }

    #[test]
    fn warped_step_dt_zero_is_identity() {
        let (_, slice) = build_geometry(&GeometryDescriptor::WarpedProfileGrid {
            dim: 3,
            nodes: 64,
            profile: WarpedProfileSpec::Dumbbell { bulb: 1.0, neck: 0.3 },
        })
        .unwrap();
        let state = WarpedState::from_slice(&slice);
        let (next, resid) = step_warped_ricci(&state, 0.0).unwrap();
        assert_eq!(next.psi, state.psi);
        assert_eq!(next.phi, state.phi);
        assert_eq!(resid, 0.0);
    }

    #[test]
    fn dumbbell_neck_shrinks_monotonically() {
        let (_, slice) = build_geometry(&GeometryDescriptor::WarpedProfileGrid {
            dim: 3,
            nodes: 128,
            profile: WarpedProfileSpec::Dumbbell { bulb: 1.0, neck: 0.25 },
        })
        .unwrap();
        let mut state = WarpedState::from_slice(&slice);
        let mut mins = vec![state.neck_psi()];
        loop {
            let dt = 0.5 * state.stability_bound();
            match step_warped_ricci(&state, dt) {
                Ok((next, _)) => {
                    state = next;
                    mins.push(state.neck_psi());
                    if state.time > 0.05 {
                        break;
                    }
                }
                Err(Error::PinchingDetected { .. }) => break,
                Err(e) => panic!("unexpected stepper error: {e}"),
            }
        }
        assert!(mins.len() > 3);
        for w in mins.windows(2) {
            assert!(w[1] <= w[0] + 1e-12, "neck radius increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn profile_csv_round_trip() {
        let (_, slice) = build_geometry(&GeometryDescriptor::WarpedProfileGrid {
            dim: 2,
            nodes: 32,
            profile: WarpedProfileSpec::Round { radius: 1.0 },
        })
        .unwrap();
        let state = WarpedState::from_slice(&slice);
        let csv = profile_to_csv(&state);
        let back = profile_from_csv(2, &csv).unwrap();
        assert_eq!(back.x.len(), 32);
        for i in 0..32 {
            assert_abs_diff_eq!(back.psi[i], state.psi[i], epsilon = 1e-12);
        }
    }
}
