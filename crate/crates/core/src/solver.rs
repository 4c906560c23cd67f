//! Structured linear algebra for the heat steppers.
//!
//! Every supported slice reduces to a "separable" operator: a leading axis
//! carrying a tridiagonal (chain) or cyclic-tridiagonal coupling, plus zero
//! or more periodic minor axes whose coupling is a per-lead-row multiple of
//! the unit circulant second difference. Transforming along the minor axes
//! with the orthonormal circulant eigenbasis turns every implicit solve into
//! independent (cyclic-)tridiagonal solves, so all solves are direct and the
//! forward/adjoint step pair is exact to rounding.

use std::sync::Arc;

use crate::geometry::{MetricData, MetricSlice};

/// Orthonormal eigenbasis of the unit circulant second difference
/// (2 on the diagonal, -1 on the cyclic off-diagonals).
#[derive(Debug)]
pub(crate) struct CirculantBasis {
    /// Row-major: rows are eigenvectors.
    pub q: Vec<f64>,
    /// Eigenvalue per row: 4 sin^2(pi k / n).
    pub sigma: Vec<f64>,
}

impl CirculantBasis {
    pub fn new(n: usize) -> Self {
        let mut q = Vec::with_capacity(n * n);
        let mut sigma = Vec::with_capacity(n);
        let norm0 = 1.0 / (n as f64).sqrt();
        q.extend(std::iter::repeat(norm0).take(n));
        sigma.push(0.0);
        let tau = 2.0 * std::f64::consts::PI / n as f64;
        let amp = (2.0 / n as f64).sqrt();
        for k in 1..=(n - 1) / 2 {
            let s = 2.0 - 2.0 * (tau * k as f64).cos();
            for j in 0..n {
                q.push(amp * (tau * k as f64 * j as f64).cos());
            }
            sigma.push(s);
            for j in 0..n {
                q.push(amp * (tau * k as f64 * j as f64).sin());
            }
            sigma.push(s);
        }
        if n % 2 == 0 {
            for j in 0..n {
                q.push(if j % 2 == 0 { norm0 } else { -norm0 });
            }
            sigma.push(4.0);
        }
        CirculantBasis { q, sigma }
    }
}

#[derive(Debug, Clone)]
pub(crate) enum LeadAxis {
    /// Open chain; `ends` holds conductances to zero ghosts (absorbing walls).
    Chain { cond: Vec<f64>, ends: Option<[f64; 2]> },
    /// Closed chain; `cond[i]` couples node i with node (i+1) mod n.
    Cyclic { cond: Vec<f64> },
}

#[derive(Debug)]
pub(crate) struct MinorAxis {
    pub n: usize,
    /// Conductance multiplying the unit circulant, one entry per lead index.
    pub cond_per_lead: Vec<f64>,
    pub basis: Arc<CirculantBasis>,
}

/// Weighted stiffness pair (W, S) of one time slice in separable form.
#[derive(Debug)]
pub(crate) struct SeparableOp {
    pub lead_n: usize,
    pub lead: LeadAxis,
    pub minors: Vec<MinorAxis>,
    /// Volume weight per lead index (constant along minor axes).
    pub w_lead: Vec<f64>,
}

impl SeparableOp {
    #[cfg(test)]
    pub fn node_count(&self) -> usize {
        self.lead_n * self.minors.iter().map(|m| m.n).product::<usize>()
    }

    pub fn minor_count(&self) -> usize {
        self.minors.iter().map(|m| m.n).product()
    }

    /// y = A u with A = -S (rows sum to zero except at absorbing ends).
    pub fn apply_stiffness(&self, u: &[f64], y: &mut [f64]) {
        let mc = self.minor_count();
        y.fill(0.0);
        match &self.lead {
            LeadAxis::Chain { cond, ends } => {
                for i in 0..self.lead_n - 1 {
                    let c = cond[i];
                    let (a, b) = (i * mc, (i + 1) * mc);
                    for j in 0..mc {
                        let d = c * (u[b + j] - u[a + j]);
                        y[a + j] += d;
                        y[b + j] -= d;
                    }
                }
                if let Some([c0, c1]) = ends {
                    let last = (self.lead_n - 1) * mc;
                    for j in 0..mc {
                        y[j] -= c0 * u[j];
                        y[last + j] -= c1 * u[last + j];
                    }
                }
            }
            LeadAxis::Cyclic { cond } => {
                for i in 0..self.lead_n {
                    let c = cond[i];
                    let (a, b) = (i * mc, ((i + 1) % self.lead_n) * mc);
                    for j in 0..mc {
                        let d = c * (u[b + j] - u[a + j]);
                        y[a + j] += d;
                        y[b + j] -= d;
                    }
                }
            }
        }
        // Minor-axis couplings: per lead row, a circulant second difference.
        let mut stride_after = mc;
        for minor in &self.minors {
            stride_after /= minor.n;
            let lines_per_lead = mc / minor.n / stride_after;
            for li in 0..self.lead_n {
                let c = minor.cond_per_lead[li];
                if c == 0.0 {
                    continue;
                }
                let base_lead = li * mc;
                for outer in 0..lines_per_lead {
                    for s in 0..stride_after {
                        let base = base_lead + outer * minor.n * stride_after + s;
                        for k in 0..minor.n {
                            let here = base + k * stride_after;
                            let next = base + ((k + 1) % minor.n) * stride_after;
                            let d = c * (u[next] - u[here]);
                            y[here] += d;
                            y[next] -= d;
                        }
                    }
                }
            }
        }
    }

    /// Solve (W + c S) x = rhs by minor-axis diagonalization plus direct
    /// (cyclic-)tridiagonal solves. Exact up to rounding.
    pub fn solve_spd(&self, c: f64, rhs: &[f64]) -> Vec<f64> {
        let mc = self.minor_count();
        let mut work = rhs.to_vec();
        for (a, _) in self.minors.iter().enumerate() {
            self.transform_minor(&mut work, a, false);
        }
        // Per minor mode: assemble the lead system and solve.
        let lead_n = self.lead_n;
        let mut diag = vec![0.0; lead_n];
        let mut line = vec![0.0; lead_n];
        for mode in 0..mc {
            // sigma shift for this mode combo
            let mut shift = vec![0.0; lead_n];
            let mut rem = mode;
            for minor in self.minors.iter().rev() {
                let m = rem % minor.n;
                rem /= minor.n;
                let s = minor.basis.sigma[m];
                if s != 0.0 {
                    for i in 0..lead_n {
                        shift[i] += minor.cond_per_lead[i] * s;
                    }
                }
            }
            for i in 0..lead_n {
                line[i] = work[i * mc + mode];
            }
            match &self.lead {
                LeadAxis::Chain { cond, ends } => {
                    for i in 0..lead_n {
                        let mut d = self.w_lead[i] + c * shift[i];
                        if i > 0 {
                            d += c * cond[i - 1];
                        }
                        if i + 1 < lead_n {
                            d += c * cond[i];
                        }
                        diag[i] = d;
                    }
                    if let Some([c0, c1]) = ends {
                        diag[0] += c * c0;
                        diag[lead_n - 1] += c * c1;
                    }
                    let off: Vec<f64> = cond.iter().map(|&cc| -c * cc).collect();
                    solve_tridiag(&diag, &off, &mut line);
                }
                LeadAxis::Cyclic { cond } => {
                    for i in 0..lead_n {
                        let prev = (i + lead_n - 1) % lead_n;
                        diag[i] = self.w_lead[i] + c * shift[i] + c * (cond[i] + cond[prev]);
                    }
                    let off: Vec<f64> = cond.iter().map(|&cc| -c * cc).collect();
                    solve_cyclic_tridiag(&diag, &off, &mut line);
                }
            }
            for i in 0..lead_n {
                work[i * mc + mode] = line[i];
            }
        }
        for (a, _) in self.minors.iter().enumerate() {
            self.transform_minor(&mut work, a, true);
        }
        work
    }

    fn transform_minor(&self, data: &mut [f64], axis: usize, inverse: bool) {
        let minor = &self.minors[axis];
        let n = minor.n;
        let q = &minor.basis.q;
        let stride: usize = self.minors[axis + 1..].iter().map(|m| m.n).product();
        let block = n * stride;
        let blocks = data.len() / block;
        let mut buf = vec![0.0; n];
        let mut out = vec![0.0; n];
        for b in 0..blocks {
            for s in 0..stride {
                let base = b * block + s;
                for k in 0..n {
                    buf[k] = data[base + k * stride];
                }
                if inverse {
                    // x = Q^T y (rows of q are eigenvectors)
                    out.fill(0.0);
                    for (r, &y) in buf.iter().enumerate() {
                        if y != 0.0 {
                            let row = &q[r * n..(r + 1) * n];
                            for (j, o) in out.iter_mut().enumerate() {
                                *o += row[j] * y;
                            }
                        }
                    }
                } else {
                    // y = Q x
                    for r in 0..n {
                        let row = &q[r * n..(r + 1) * n];
                        out[r] = row.iter().zip(buf.iter()).map(|(a, b)| a * b).sum();
                    }
                }
                for k in 0..n {
                    data[base + k * stride] = out[k];
                }
            }
        }
    }
}

/// Symmetric tridiagonal solve, in place on `b`. `off[i]` couples i and i+1.
pub(crate) fn solve_tridiag(diag: &[f64], off: &[f64], b: &mut [f64]) {
    let n = diag.len();
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    c[0] = diag[0];
    d[0] = b[0];
    for i in 1..n {
        let m = off[i - 1] / c[i - 1];
        c[i] = diag[i] - m * off[i - 1];
        d[i] = b[i] - m * d[i - 1];
    }
    b[n - 1] = d[n - 1] / c[n - 1];
    for i in (0..n - 1).rev() {
        b[i] = (d[i] - off[i] * b[i + 1]) / c[i];
    }
}

/// Symmetric cyclic tridiagonal solve (Sherman-Morrison), in place on `b`.
/// `off[i]` couples i and (i+1) mod n.
pub(crate) fn solve_cyclic_tridiag(diag: &[f64], off: &[f64], b: &mut [f64]) {
    let n = diag.len();
    let corner = off[n - 1];
    let gamma = -diag[0];
    let mut d_mod = diag.to_vec();
    d_mod[0] -= gamma;
    d_mod[n - 1] -= corner * corner / gamma;
    let inner_off = &off[..n - 1];

    let mut u = vec![0.0; n];
    u[0] = gamma;
    u[n - 1] = corner;

    solve_tridiag(&d_mod, inner_off, b);
    solve_tridiag(&d_mod, inner_off, &mut u);

    // v = (1, 0, ..., 0, corner/gamma)
    let vy = b[0] + corner / gamma * b[n - 1];
    let vz = u[0] + corner / gamma * u[n - 1];
    let factor = vy / (1.0 + vz);
    for i in 0..n {
        b[i] -= factor * u[i];
    }
}

/// Assemble the separable operator of a metric slice.
pub(crate) fn op_from_slice(slice: &MetricSlice, bases: &BasisCache) -> SeparableOp {
    match &slice.metric {
        MetricData::Circle { len } => {
            let n = slice.disc.shape[0];
            let h = len / n as f64;
            SeparableOp {
                lead_n: n,
                lead: LeadAxis::Cyclic { cond: vec![1.0 / h; n] },
                minors: vec![],
                w_lead: vec![h; n],
            }
        }
        MetricData::Line { half_len } => {
            let n = slice.disc.shape[0];
            let h = 2.0 * half_len / n as f64;
            SeparableOp {
                lead_n: n,
                lead: LeadAxis::Chain { cond: vec![1.0 / h; n - 1], ends: Some([2.0 / h, 2.0 / h]) },
                minors: vec![],
                w_lead: vec![h; n],
            }
        }
        MetricData::Torus { len } => {
            let (n0, n1) = (slice.disc.shape[0], slice.disc.shape[1]);
            let h0 = len[0] / n0 as f64;
            let h1 = len[1] / n1 as f64;
            SeparableOp {
                lead_n: n0,
                lead: LeadAxis::Cyclic { cond: vec![h1 / h0; n0] },
                minors: vec![MinorAxis {
                    n: n1,
                    cond_per_lead: vec![h0 / h1; n0],
                    basis: bases.get(n1),
                }],
                w_lead: vec![h0 * h1; n0],
            }
        }
        MetricData::Sphere { radius } => {
            let (nt, np) = (slice.disc.shape[0], slice.disc.shape[1]);
            let dtheta = std::f64::consts::PI / nt as f64;
            let dphi = 2.0 * std::f64::consts::PI / np as f64;
            let mut c_theta = Vec::with_capacity(nt - 1);
            for i in 0..nt - 1 {
                let t_half = (i as f64 + 1.0) * dtheta;
                c_theta.push(t_half.sin() * dphi / dtheta);
            }
            let mut c_phi = Vec::with_capacity(nt);
            let mut w_lead = Vec::with_capacity(nt);
            for i in 0..nt {
                let tc = (i as f64 + 0.5) * dtheta;
                c_phi.push(dtheta / (tc.sin() * dphi));
                let lo = i as f64 * dtheta;
                w_lead.push(radius * radius * (lo.cos() - (lo + dtheta).cos()) * dphi);
            }
            SeparableOp {
                lead_n: nt,
                lead: LeadAxis::Chain { cond: c_theta, ends: None },
                minors: vec![MinorAxis { n: np, cond_per_lead: c_phi, basis: bases.get(np) }],
                w_lead,
            }
        }
        MetricData::Warped { phi, psi } => {
            let nx = slice.disc.shape[0];
            let dim = slice.disc.dim;
            let k = (dim - 1) as i32;
            let omega = crate::geometry::unit_sphere_area(dim - 1);
            let dx = 1.0 / (nx - 1) as f64;
            let mut cond = Vec::with_capacity(nx - 1);
            for i in 0..nx - 1 {
                let psim = 0.5 * (psi[i] + psi[i + 1]);
                let phim = 0.5 * (phi[i] + phi[i + 1]);
                cond.push(omega * psim.powi(k) / (phim * dx));
            }
            SeparableOp {
                lead_n: nx,
                lead: LeadAxis::Chain { cond, ends: None },
                minors: vec![],
                w_lead: crate::geometry::warped_weights(dim, phi, psi),
            }
        }
        MetricData::SphereCircle { radius, circle_len } => {
            let (nt, np, nz) = (slice.disc.shape[0], slice.disc.shape[1], slice.disc.shape[2]);
            let dtheta = std::f64::consts::PI / nt as f64;
            let dphi = 2.0 * std::f64::consts::PI / np as f64;
            let dz = circle_len / nz as f64;
            let mut c_theta = Vec::with_capacity(nt - 1);
            for i in 0..nt - 1 {
                let t_half = (i as f64 + 1.0) * dtheta;
                c_theta.push(t_half.sin() * dphi * dz / dtheta);
            }
            let mut c_phi = Vec::with_capacity(nt);
            let mut c_z = Vec::with_capacity(nt);
            let mut w_lead = Vec::with_capacity(nt);
            for i in 0..nt {
                let tc = (i as f64 + 0.5) * dtheta;
                let lo = i as f64 * dtheta;
                let band = lo.cos() - (lo + dtheta).cos();
                c_phi.push(dtheta * dz / (tc.sin() * dphi));
                c_z.push(radius * radius * band * dphi / dz);
                w_lead.push(radius * radius * band * dphi * dz);
            }
            SeparableOp {
                lead_n: nt,
                lead: LeadAxis::Chain { cond: c_theta, ends: None },
                minors: vec![
                    MinorAxis { n: np, cond_per_lead: c_phi, basis: bases.get(np) },
                    MinorAxis { n: nz, cond_per_lead: c_z, basis: bases.get(nz) },
                ],
                w_lead,
            }
        }
    }
}

/// Process-wide cache of trigonometric eigenbases, keyed by axis length.
#[derive(Debug, Default)]
pub(crate) struct BasisCache {
    inner: std::sync::Mutex<std::collections::HashMap<usize, Arc<CirculantBasis>>>,
    dst: std::sync::Mutex<std::collections::HashMap<usize, Arc<DstBasis>>>,
}

impl BasisCache {
    pub fn global() -> &'static BasisCache {
        static CACHE: std::sync::OnceLock<BasisCache> = std::sync::OnceLock::new();
        CACHE.get_or_init(BasisCache::default)
    }

    pub fn get(&self, n: usize) -> Arc<CirculantBasis> {
        let mut map = self.inner.lock().unwrap();
        map.entry(n).or_insert_with(|| Arc::new(CirculantBasis::new(n))).clone()
    }

    pub fn get_dst(&self, n: usize) -> Arc<DstBasis> {
        let mut map = self.dst.lock().unwrap();
        map.entry(n).or_insert_with(|| Arc::new(DstBasis::new(n))).clone()
    }
}

/// Orthonormal sine eigenbasis of the cell-centered Dirichlet chain:
/// rows v_k(i) = sqrt(2/n) sin(pi k (i + 1/2) / n), k = 1..n, which
/// diagonalize the chain second difference with absorbing walls half a
/// cell beyond the end nodes.
#[derive(Debug)]
pub(crate) struct DstBasis {
    pub q: Vec<f64>,
    /// Continuum wavenumber index per row: k = 1..n.
    pub modes: Vec<usize>,
}

impl DstBasis {
    pub fn new(n: usize) -> Self {
        let amp = (2.0 / n as f64).sqrt();
        let mut q = Vec::with_capacity(n * n);
        let mut modes = Vec::with_capacity(n);
        for k in 1..=n {
            for i in 0..n {
                q.push(amp * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).sin());
            }
            modes.push(k);
        }
        DstBasis { q, modes }
    }
}

/// One implicit substep scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Scheme {
    CrankNicolson,
    BackwardEuler,
}

/// Forward substep t_k -> t_{k+1}: u evolves by the heat equation.
pub(crate) fn forward_substep(
    op_k: &SeparableOp,
    op_k1: &SeparableOp,
    dt: f64,
    scheme: Scheme,
    u: &[f64],
) -> Vec<f64> {
    match scheme {
        Scheme::CrankNicolson => {
            let half = 0.5 * dt;
            let mut au = vec![0.0; u.len()];
            op_k.apply_stiffness(u, &mut au);
            let mc = op_k.minor_count();
            let mut rhs = vec![0.0; u.len()];
            for i in 0..u.len() {
                let wk = op_k.w_lead[i / mc];
                let wk1 = op_k1.w_lead[i / mc];
                rhs[i] = wk1 * (u[i] + half * au[i] / wk);
            }
            op_k1.solve_spd(half, &rhs)
        }
        Scheme::BackwardEuler => {
            let mc = op_k.minor_count();
            let mut rhs = vec![0.0; u.len()];
            for i in 0..u.len() {
                rhs[i] = op_k1.w_lead[i / mc] * u[i];
            }
            op_k1.solve_spd(dt, &rhs)
        }
    }
}

/// Adjoint substep t_{k+1} -> t_k: v evolves by the conjugate heat equation.
/// Exact transpose of [`forward_substep`] with respect to the volume inner
/// products, so duality and total mass are preserved to rounding.
pub(crate) fn adjoint_substep(
    op_k: &SeparableOp,
    op_k1: &SeparableOp,
    dt: f64,
    scheme: Scheme,
    v: &[f64],
) -> Vec<f64> {
    let mc = op_k.minor_count();
    match scheme {
        Scheme::CrankNicolson => {
            let half = 0.5 * dt;
            let mut a = vec![0.0; v.len()];
            for i in 0..v.len() {
                a[i] = op_k1.w_lead[i / mc] * v[i];
            }
            let b = op_k1.solve_spd(half, &a);
            let mut d = vec![0.0; v.len()];
            for i in 0..v.len() {
                d[i] = op_k1.w_lead[i / mc] * b[i] / op_k.w_lead[i / mc];
            }
            let mut ad = vec![0.0; v.len()];
            op_k.apply_stiffness(&d, &mut ad);
            for i in 0..v.len() {
                d[i] += half * ad[i] / op_k.w_lead[i / mc];
            }
            d
        }
        Scheme::BackwardEuler => {
            let mut a = vec![0.0; v.len()];
            for i in 0..v.len() {
                a[i] = op_k1.w_lead[i / mc] * v[i];
            }
            let b = op_k1.solve_spd(dt, &a);
            let mut d = vec![0.0; v.len()];
            for i in 0..v.len() {
                d[i] = op_k1.w_lead[i / mc] * b[i] / op_k.w_lead[i / mc];
            }
            d
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_geometry, GeometryDescriptor};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn inner(u: &[f64], v: &[f64], op: &SeparableOp) -> f64 {
        let mc = op.minor_count();
        u.iter().zip(v).enumerate().map(|(i, (a, b))| a * b * op.w_lead[i / mc]).sum()
    }

    #[test]
    fn circulant_basis_is_orthonormal_and_diagonalizes() {
        for n in [8usize, 9, 16, 31] {
            let b = CirculantBasis::new(n);
            for r in 0..n {
                for r2 in 0..n {
                    let dot: f64 =
                        (0..n).map(|j| b.q[r * n + j] * b.q[r2 * n + j]).sum();
                    let expect = if r == r2 { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(dot, expect, epsilon = 1e-12);
                }
            }
            // Each row is an eigenvector of the circulant second difference.
            for r in 0..n {
                for j in 0..n {
                    let prev = b.q[r * n + (j + n - 1) % n];
                    let next = b.q[r * n + (j + 1) % n];
                    let lhs = 2.0 * b.q[r * n + j] - prev - next;
                    assert_abs_diff_eq!(lhs, b.sigma[r] * b.q[r * n + j], epsilon = 1e-12);
                }
            }
        }
    }

    fn dense_solve_check(op: &SeparableOp, c: f64, seed: u64) {
        let n = op.node_count();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let rhs: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = op.solve_spd(c, &rhs);
        // Verify (W + cS) x = rhs via apply.
        let mut ax = vec![0.0; n];
        op.apply_stiffness(&x, &mut ax);
        let mc = op.minor_count();
        for i in 0..n {
            let lhs = op.w_lead[i / mc] * x[i] - c * ax[i];
            assert_abs_diff_eq!(lhs, rhs[i], epsilon = 1e-10);
        }
    }

    #[test]
    fn spd_solves_are_exact_on_all_kinds() {
        let cache = BasisCache::default();
        let descs = vec![
            GeometryDescriptor::Circle { len: 2.0, nodes: 16 },
            GeometryDescriptor::LineSegmentWithAbsorbingEnds { half_len: 1.0, nodes: 16 },
            GeometryDescriptor::FlatTorusGrid { len: [1.0, 1.5], nodes: [8, 12] },
            GeometryDescriptor::SphereLatitudeGrid { radius: 1.3, nodes: [10, 16] },
            GeometryDescriptor::SphereCircleProduct {
                radius: 1.0,
                circle_len: 3.0,
                nodes: [8, 10, 8],
            },
            GeometryDescriptor::WarpedProfileGrid {
                dim: 3,
                nodes: 24,
                profile: crate::geometry::WarpedProfileSpec::Round { radius: 1.0 },
            },
        ];
        for (k, d) in descs.iter().enumerate() {
            let (_, slice) = build_geometry(d).unwrap();
            let op = op_from_slice(&slice, &cache);
            dense_solve_check(&op, 3e-3, 42 + k as u64);
        }
    }

    #[test]
    fn forward_and_adjoint_are_exact_duals() {
        let cache = BasisCache::default();
        let (_, slice) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
            radius: 1.0,
            nodes: [10, 16],
        })
        .unwrap();
        let op0 = op_from_slice(&slice, &cache);
        // A second op with scaled weights imitates an evolving metric.
        let mut slice2 = slice.clone();
        if let MetricData::Sphere { radius } = &mut slice2.metric {
            *radius = 0.9;
        }
        slice2.weights = crate::geometry::sphere_weights(&slice2.disc, 0.9);
        let op1 = op_from_slice(&slice2, &cache);

        let n = op0.node_count();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let u: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        for scheme in [Scheme::CrankNicolson, Scheme::BackwardEuler] {
            let fu = forward_substep(&op0, &op1, 2e-3, scheme, &u);
            let bv = adjoint_substep(&op0, &op1, 2e-3, scheme, &v);
            let lhs = inner(&fu, &v, &op1);
            let rhs = inner(&u, &bv, &op0);
            assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-13 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn constants_are_preserved_forward_and_mass_backward() {
        let cache = BasisCache::default();
        let (_, slice) = build_geometry(&GeometryDescriptor::FlatTorusGrid {
            len: [1.0, 1.0],
            nodes: [12, 12],
        })
        .unwrap();
        let op = op_from_slice(&slice, &cache);
        let n = op.node_count();
        let u = vec![3.25; n];
        let fu = forward_substep(&op, &op, 1e-3, Scheme::CrankNicolson, &u);
        for &x in &fu {
            assert_abs_diff_eq!(x, 3.25, epsilon = 1e-13);
        }
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let mass_before: f64 = inner(&v, &vec![1.0; n], &op);
        let bv = adjoint_substep(&op, &op, 1e-3, Scheme::CrankNicolson, &v);
        let mass_after: f64 = inner(&bv, &vec![1.0; n], &op);
        assert_abs_diff_eq!(mass_before, mass_after, epsilon = 1e-13);
    }
}
