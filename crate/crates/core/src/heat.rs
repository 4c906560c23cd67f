//! Heat and conjugate heat solvers on a flow scenario.
//!
//! The forward solver is Crank-Nicolson against the evolving metric with a
//! spectral fast path on static flat kinds. The conjugate solver applies the
//! exact transpose of every forward substep with respect to the discrete
//! volume inner products, so the duality identity and total mass are
//! preserved to rounding by construction.
//!
//! Conjugate heat kernels bootstrap the delta as a geodesic Gaussian at
//! tau_boot = 4 h^2 (with the exponential-map Jacobian correction on round
//! spheres), normalized against the discrete volume. The first substeps after
//! the bootstrap use backward Euler to damp start-up ringing near latitude
//! poles; everything afterwards is Crank-Nicolson.

use crate::error::{Error, Result};
use crate::flows::{FlowScenario, ModelTag};
use crate::geometry::{MetricData, MetricSlice};
use crate::solver::{
    adjoint_substep, forward_substep, op_from_slice, BasisCache, Scheme, SeparableOp,
};

/// Per-node values at one time.
#[derive(Debug, Clone)]
pub struct ScalarField {
    pub values: Vec<f64>,
    pub time: f64,
}

impl ScalarField {
    pub fn new(values: Vec<f64>, time: f64) -> Self {
        ScalarField { values, time }
    }
}

/// Number of backward-Euler substeps right after a kernel bootstrap.
/// Latitude grids need the extra damping because the azimuthal node
/// crowding at the poles leaves Crank-Nicolson neutrally stable there;
/// chain and flat kinds are positivity-exact at the chosen step and skip it.
fn rannacher_steps(flow: &FlowScenario) -> usize {
    match flow.model {
        ModelTag::ShrinkingSphere | ModelTag::StaticSphere | ModelTag::ShrinkingCylinder => 4,
        _ => 0,
    }
}

/// Underflow guard for the potential.
const DENSITY_FLOOR: f64 = 1e-300;

/// The conjugate heat kernel measure based at (x0, t0), evaluated at time s.
#[derive(Debug, Clone)]
pub struct ConjugateKernel {
    pub basepoint: usize,
    pub t0: f64,
    pub s: f64,
    /// tau = t0 - s.
    pub tau: f64,
    pub dim: usize,
    /// Measure weights per node; sums to 1 against the volume weights.
    pub nu: Vec<f64>,
    /// Kernel density K = nu / volume weight.
    pub density: Vec<f64>,
    /// Potential f = -log((4 pi tau)^{n/2} K) where the density clears the
    /// underflow guard; excluded nodes carry f = 0 and included = false.
    pub f: Vec<f64>,
    pub included: Vec<bool>,
    pub diagnostics: KernelDiagnostics,
}

#[derive(Debug, Clone, Default)]
pub struct KernelDiagnostics {
    pub bootstrap_tau: f64,
    /// Heuristic bound on the bootstrap replacement error.
    pub bootstrap_error: f64,
    pub min_weight: f64,
    /// Mass carried by negative weights (reported, never silently clipped).
    pub negative_mass: f64,
    /// Mass excluded from potential quadrature by the underflow guard.
    pub excluded_mass: f64,
    /// Raw total mass of the measure.
    pub mass: f64,
}

impl ConjugateKernel {
    /// Measure with negative wiggles clipped to zero, for transport solvers
    /// that require nonnegative inputs. The clipped mass is in diagnostics.
    pub fn nonnegative_measure(&self) -> Vec<f64> {
        self.nu.iter().map(|&x| x.max(0.0)).collect()
    }
}

/// Basepoint-directional derivative of the kernel: per-node values of
/// d_v K(x0,t0; ., s) together with the quotient field (d_v K)/K.
#[derive(Debug, Clone)]
pub struct KernelGradientField {
    pub axis: usize,
    pub dk_density: Vec<f64>,
    pub ratio: Vec<f64>,
    /// Integral of d_v K against the volume; zero by construction.
    pub integral: f64,
    pub tau: f64,
}

/// Solver facade over one flow scenario.
pub struct Stepper<'a> {
    pub flow: &'a FlowScenario,
    bases: &'static BasisCache,
    dt_cap: f64,
    spectral: bool,
    /// Shared operator for static models; rebuilt per time otherwise.
    static_op: Option<std::sync::Arc<SeparableOp>>,
}

impl<'a> Stepper<'a> {
    pub fn new(flow: &'a FlowScenario) -> Self {
        let dt_cap = dt_cap_for(flow);
        let spectral = matches!(
            flow.model,
            ModelTag::Circle | ModelTag::FlatTorus | ModelTag::EuclideanLine
        );
        let bases = BasisCache::global();
        let static_op = match flow.model {
            ModelTag::EuclideanLine
            | ModelTag::Circle
            | ModelTag::FlatTorus
            | ModelTag::StaticSphere => {
                Some(std::sync::Arc::new(op_from_slice(&flow.slices[0], bases)))
            }
            _ => None,
        };
        Stepper { flow, bases, dt_cap, spectral, static_op }
    }

    pub fn dt_cap(&self) -> f64 {
        self.dt_cap
    }

    fn op_at(&self, t: f64) -> std::sync::Arc<SeparableOp> {
        if let Some(op) = &self.static_op {
            return op.clone();
        }
        std::sync::Arc::new(op_from_slice(&self.flow.slice_at(t), self.bases))
    }

    /// Evolve a field forward by the heat equation coupled to the flow.
    pub fn forward(&self, u0: &ScalarField, t_a: f64, t_b: f64) -> Result<ScalarField> {
        self.check_interval(t_a, t_b)?;
        if self.spectral {
            let u = self.spectral_evolve(&u0.values, t_b - t_a);
            return Ok(ScalarField::new(u, t_b));
        }
        let max_before = u0.values.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        let nsub = ((t_b - t_a) / self.dt_cap).ceil().max(1.0) as usize;
        let dt = (t_b - t_a) / nsub as f64;
        let mut u = u0.values.clone();
        let mut op_prev = self.op_at(t_a);
        for k in 0..nsub {
            let t_next = t_a + dt * (k + 1) as f64;
            let op_next = self.op_at(t_next);
            u = forward_substep(&op_prev, &op_next, dt, Scheme::CrankNicolson, &u);
            op_prev = op_next;
        }
        let max_after = u.iter().cloned().fold(0.0f64, |a, b| a.max(b.abs()));
        if max_after > max_before * (1.0 + 1e-10) + 1e-300 {
            return Err(Error::StepInstability { before: max_before, after: max_after });
        }
        Ok(ScalarField::new(u, t_b))
    }

    /// Evolve a density backward by the conjugate heat equation. Each
    /// substep is the exact adjoint of the corresponding forward substep.
    pub fn backward(&self, v_b: &ScalarField, t_b: f64, t_a: f64) -> Result<ScalarField> {
        self.check_interval(t_a, t_b)?;
        if self.spectral {
            let v = self.spectral_evolve(&v_b.values, t_b - t_a);
            return Ok(ScalarField::new(v, t_a));
        }
        let nsub = ((t_b - t_a) / self.dt_cap).ceil().max(1.0) as usize;
        let dt = (t_b - t_a) / nsub as f64;
        let mut v = v_b.values.clone();
        let mut op_next = self.op_at(t_b);
        for k in (0..nsub).rev() {
            let t_prev = t_a + dt * k as f64;
            let op_prev = self.op_at(t_prev);
            v = adjoint_substep(&op_prev, &op_next, dt, Scheme::CrankNicolson, &v);
            op_next = op_prev;
        }
        Ok(ScalarField::new(v, t_a))
    }

    /// Backward adjoint evolution of a density from `t_b` with snapshots at
    /// the requested earlier times (sorted ascending in the result). The
    /// first `rannacher` substeps use backward Euler.
    fn backward_snapshots(
        &self,
        v_b: Vec<f64>,
        t_b: f64,
        snap_times: &[f64],
        rannacher: usize,
    ) -> Vec<(f64, Vec<f64>)> {
        let mut targets: Vec<f64> = snap_times.to_vec();
        targets.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut out: Vec<(f64, Vec<f64>)> = Vec::with_capacity(targets.len());
        let mut v = v_b;
        let mut t_hi = t_b;
        let mut steps_done = 0usize;
        if self.spectral {
            for &t_lo in &targets {
                let w = self.spectral_evolve(&v, t_hi - t_lo);
                out.push((t_lo, w.clone()));
                v = w;
                t_hi = t_lo;
            }
            out.reverse();
            return out;
        }
        // Time steps grade with the distance from the bootstrap anchor:
        // early steps resolve the near-delta transient at the mesh scale,
        // later ones follow the parabolic smoothing.
        let anchor = t_b;
        let mut op_hi = self.op_at(t_hi);
        for &t_lo in &targets {
            while t_lo < t_hi - 1e-15 {
                let graded = (self.dt_cap).max((anchor - t_hi) / 48.0);
                let dt = graded.min(t_hi - t_lo);
                let t_prev = t_hi - dt;
                let op_prev = self.op_at(t_prev);
                let scheme = if steps_done < rannacher {
                    Scheme::BackwardEuler
                } else {
                    Scheme::CrankNicolson
                };
                v = adjoint_substep(&op_prev, &op_hi, dt, scheme, &v);
                op_hi = op_prev;
                t_hi = t_prev;
                steps_done += 1;
            }
            t_hi = t_lo;
            out.push((t_lo, v.clone()));
        }
        out.reverse();
        out
    }

    /// Exact spectral evolution on static flat kinds: circulant modes on
    /// periodic axes, sine modes against the absorbing walls of the line.
    fn spectral_evolve(&self, u: &[f64], dt: f64) -> Vec<f64> {
        let slice = &self.flow.slices[0];
        match &slice.metric {
            MetricData::Line { half_len } => {
                let n = slice.disc.shape[0];
                let basis = self.bases.get_dst(n);
                let dom = 2.0 * half_len;
                let mut coef = vec![0.0; n];
                for r in 0..n {
                    let row = &basis.q[r * n..(r + 1) * n];
                    coef[r] = row.iter().zip(u).map(|(a, b)| a * b).sum();
                }
                let mut out = vec![0.0; n];
                for r in 0..n {
                    let k = basis.modes[r] as f64;
                    let lam = (std::f64::consts::PI * k / dom).powi(2);
                    let c = coef[r] * (-lam * dt).exp();
                    if c != 0.0 {
                        let row = &basis.q[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += c * row[j];
                        }
                    }
                }
                out
            }
            MetricData::Circle { len } => {
                let n = slice.disc.shape[0];
                let basis = self.bases.get(n);
                let mut coef = vec![0.0; n];
                for r in 0..n {
                    let row = &basis.q[r * n..(r + 1) * n];
                    coef[r] = row.iter().zip(u).map(|(a, b)| a * b).sum();
                }
                let mut out = vec![0.0; n];
                for r in 0..n {
                    let k = wavenumber(r, n);
                    let lam = (2.0 * std::f64::consts::PI * k / len).powi(2);
                    let c = coef[r] * (-lam * dt).exp();
                    if c != 0.0 {
                        let row = &basis.q[r * n..(r + 1) * n];
                        for j in 0..n {
                            out[j] += c * row[j];
                        }
                    }
                }
                out
            }
            MetricData::Torus { len } => {
                let (n0, n1) = (slice.disc.shape[0], slice.disc.shape[1]);
                let b0 = self.bases.get(n0);
                let b1 = self.bases.get(n1);
                // coefficients: c = Q0 U Q1^T (rows of q are eigenvectors)
                let mut tmp = vec![0.0; n0 * n1];
                for r in 0..n0 {
                    let row = &b0.q[r * n0..(r + 1) * n0];
                    for j in 0..n1 {
                        let mut acc = 0.0;
                        for i in 0..n0 {
                            acc += row[i] * u[i * n1 + j];
                        }
                        tmp[r * n1 + j] = acc;
                    }
                }
                let mut coef = vec![0.0; n0 * n1];
                for r in 0..n0 {
                    for s in 0..n1 {
                        let row = &b1.q[s * n1..(s + 1) * n1];
                        let mut acc = 0.0;
                        for j in 0..n1 {
                            acc += row[j] * tmp[r * n1 + j];
                        }
                        coef[r * n1 + s] = acc;
                    }
                }
                for r in 0..n0 {
                    let k0 = wavenumber(r, n0);
                    let l0 = (2.0 * std::f64::consts::PI * k0 / len[0]).powi(2);
                    for s in 0..n1 {
                        let k1 = wavenumber(s, n1);
                        let l1 = (2.0 * std::f64::consts::PI * k1 / len[1]).powi(2);
                        coef[r * n1 + s] *= (-(l0 + l1) * dt).exp();
                    }
                }
                // back: U = Q0^T C Q1
                for r in 0..n0 {
                    for j in 0..n1 {
                        let mut acc = 0.0;
                        for s in 0..n1 {
                            acc += b1.q[s * n1 + j] * coef[r * n1 + s];
                        }
                        tmp[r * n1 + j] = acc;
                    }
                }
                let mut out = vec![0.0; n0 * n1];
                for i in 0..n0 {
                    for j in 0..n1 {
                        let mut acc = 0.0;
                        for r in 0..n0 {
                            acc += b0.q[r * n0 + i] * tmp[r * n1 + j];
                        }
                        out[i * n1 + j] = acc;
                    }
                }
                out
            }
            _ => unreachable!("spectral path only on static flat periodic kinds"),
        }
    }

    fn check_interval(&self, t_a: f64, t_b: f64) -> Result<()> {
        if t_a >= t_b {
            return Err(Error::InvalidArgument("need t_a < t_b".into()));
        }
        for t in [t_a, t_b] {
            if !self.flow.contains_time(t) {
                let (lo, hi) = self.flow.interval();
                return Err(Error::TimeOutsideInterval { t, lo, hi });
            }
        }
        Ok(())
    }
}

fn wavenumber(row: usize, n: usize) -> f64 {
    if row == 0 {
        0.0
    } else if n % 2 == 0 && row == n - 1 {
        (n / 2) as f64
    } else {
        row.div_ceil(2) as f64
    }
}

/// Accuracy/positivity time-step cap for a slice.
fn slice_dt_cap(slice: &MetricSlice) -> f64 {
    let h = slice.mesh_width();
    match &slice.metric {
        MetricData::Warped { .. } => h * h / (2.0 * slice.disc.dim as f64),
        _ => 0.5 * h * h,
    }
}

fn dt_cap_for(flow: &FlowScenario) -> f64 {
    let mut cap = f64::INFINITY;
    for s in &flow.slices {
        cap = cap.min(slice_dt_cap(s));
    }
    let min_gap =
        flow.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    cap.min(min_gap)
}

/// Bootstrap floor: kernels are reliable only for tau >= 8 h^2.
pub fn tau_floor(flow: &FlowScenario, t0: f64) -> f64 {
    let h = flow.slice_at(t0).mesh_width();
    8.0 * h * h
}

fn bootstrap_tau(flow: &FlowScenario, t0: f64) -> f64 {
    let h = flow.slice_at(t0).mesh_width();
    4.0 * h * h
}

/// Geodesic Gaussian bootstrap density at time `t_b`, normalized to unit
/// discrete mass. Round spheres carry the exponential-map Jacobian factor.
fn bootstrap_density(flow: &FlowScenario, basepoint: usize, t_b: f64, tau_b: f64) -> Vec<f64> {
    let slice = flow.slice_at(t_b);
    bootstrap_density_on(flow, &slice, basepoint, tau_b)
}

fn bootstrap_density_on(
    _flow: &FlowScenario,
    slice: &MetricSlice,
    basepoint: usize,
    tau_b: f64,
) -> Vec<f64> {
    let dist_row = crate::geometry::geodesic_row(slice, basepoint);
    let n = slice.disc.node_count();
    let dim = slice.disc.dim as f64;
    let mut v = vec![0.0; n];
    let jacobian: Box<dyn Fn(f64) -> f64> = match &slice.metric {
        MetricData::Sphere { radius } => {
            let rho = *radius;
            Box::new(move |d: f64| {
                if d < 1e-12 {
                    1.0
                } else {
                    let a = d / rho;
                    (a / a.sin().max(1e-12)).sqrt()
                }
            })
        }
        MetricData::Warped { .. }
            if basepoint == 0 || basepoint == n - 1 =>
        {
            // Pole basepoints are honest points; the cap is locally a
            // space form whose sectional curvature fixes the exponential
            // map Jacobian.
            let curv = crate::geometry::curvature_fields(&slice)
                .map(|c| {
                    let j = if basepoint == 0 { 1 } else { n - 2 };
                    c.rm_norm[j].copysign(c.scalar[j])
                })
                .unwrap_or(0.0);
            let power = 0.5 * (dim - 1.0);
            Box::new(move |d: f64| {
                if d < 1e-12 || curv.abs() < 1e-12 {
                    return 1.0;
                }
                if curv > 0.0 {
                    let a = (d * curv.sqrt()).min(std::f64::consts::PI - 1e-3);
                    (a / a.sin()).powf(power)
                } else {
                    let a = d * (-curv).sqrt();
                    (a / a.sinh()).powf(power)
                }
            })
        }
        _ => Box::new(|_| 1.0),
    };
    for j in 0..n {
        let d = dist_row[j];
        v[j] = (-d * d / (4.0 * tau_b)).exp() * jacobian(d);
    }
    let mass: f64 = v.iter().zip(&slice.weights).map(|(a, w)| a * w).sum();
    for x in &mut v {
        *x /= mass;
    }
    v
}

/// Batched kernel measures: nu_{(x, t); s} for every basepoint x at once.
/// On spectral kinds one basis transform turns the whole bootstrap matrix
/// into the kernel matrix; elsewhere the per-basepoint solver runs.
/// Rows are nonnegative-normalized measure weights.
pub fn kernel_measures_at(flow: &FlowScenario, t: f64, s: f64) -> Result<Vec<Vec<f64>>> {
    let n = flow.disc.node_count();
    if (t - s).abs() < 1e-14 {
        return Ok((0..n)
            .map(|x| {
                let mut w = vec![0.0; n];
                w[x] = 1.0;
                w
            })
            .collect());
    }
    let floor = tau_floor(flow, t);
    if t - s < floor {
        return Err(Error::BelowBootstrapFloor { tau: t - s, floor });
    }
    let stepper = Stepper::new(flow);
    let tau_b = bootstrap_tau(flow, t);
    let t_boot = t - tau_b;
    let slice_boot = flow.slice_at(t_boot);
    let slice_s = flow.slice_at(s);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    if stepper.spectral {
        for x in 0..n {
            let boot = bootstrap_density_on(flow, &slice_boot, x, tau_b);
            let density = stepper.spectral_evolve(&boot, t_boot - s);
            rows.push(measure_from_density(&density, &slice_s.weights));
        }
    } else {
        // All bootstraps march through one shared substep schedule, so the
        // per-substep operators are built once instead of once per node.
        let mut vs: Vec<Vec<f64>> = (0..n)
            .map(|x| bootstrap_density_on(flow, &slice_boot, x, tau_b))
            .collect();
        let rann = rannacher_steps(flow);
        let mut t_hi = t_boot;
        let mut op_hi = stepper.op_at(t_hi);
        let mut steps_done = 0usize;
        while s < t_hi - 1e-15 {
            let graded = stepper.dt_cap.max((t_boot - t_hi) / 48.0);
            let dt = graded.min(t_hi - s);
            let t_prev = t_hi - dt;
            let op_prev = stepper.op_at(t_prev);
            let scheme = if steps_done < rann {
                crate::solver::Scheme::BackwardEuler
            } else {
                crate::solver::Scheme::CrankNicolson
            };
            for v in &mut vs {
                *v = crate::solver::adjoint_substep(&op_prev, &op_hi, dt, scheme, v);
            }
            op_hi = op_prev;
            t_hi = t_prev;
            steps_done += 1;
        }
        for v in vs {
            rows.push(measure_from_density(&v, &slice_s.weights));
        }
    }
    Ok(rows)
}

fn measure_from_density(density: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut nu: Vec<f64> =
        density.iter().zip(weights).map(|(d, w)| (d * w).max(0.0)).collect();
    let mass: f64 = nu.iter().sum();
    for x in &mut nu {
        *x /= mass;
    }
    nu
}

fn build_kernel(
    flow: &FlowScenario,
    basepoint: usize,
    t0: f64,
    s: f64,
    density: Vec<f64>,
    boot_tau: f64,
) -> ConjugateKernel {
    let slice = flow.slice_at(s);
    let n = density.len();
    let dim = flow.dim();
    let tau = t0 - s;
    let mut nu = vec![0.0; n];
    let mut f = vec![0.0; n];
    let mut included = vec![false; n];
    let mut negative_mass = 0.0;
    let mut excluded_mass = 0.0;
    let mut min_weight = f64::INFINITY;
    let norm = (4.0 * std::f64::consts::PI * tau).powf(dim as f64 / 2.0);
    for i in 0..n {
        nu[i] = density[i] * slice.weights[i];
        min_weight = min_weight.min(nu[i]);
        if nu[i] < 0.0 {
            negative_mass += -nu[i];
        }
        if density[i] > DENSITY_FLOOR {
            f[i] = -(norm * density[i]).ln();
            included[i] = true;
        } else {
            excluded_mass += nu[i].abs();
        }
    }
    let mass: f64 = nu.iter().sum();
    let r_scale = flow
        .curvature_at(s)
        .scalar
        .iter()
        .cloned()
        .fold(0.0f64, |a, b| a.max(b.abs()));
    let h = slice.mesh_width();
    let bootstrap_error = boot_tau * r_scale + h * h;
    ConjugateKernel {
        basepoint,
        t0,
        s,
        tau,
        dim,
        nu,
        density,
        f,
        included,
        diagnostics: KernelDiagnostics {
            bootstrap_tau: boot_tau,
            bootstrap_error,
            min_weight,
            negative_mass,
            excluded_mass,
            mass,
        },
    }
}

/// Conjugate heat kernel measures based at (basepoint, t0), evaluated at
/// every requested time. One backward adjoint sweep serves all snapshots.
pub fn conjugate_kernel_curve(
    flow: &FlowScenario,
    basepoint: usize,
    t0: f64,
    at: &[f64],
) -> Result<Vec<ConjugateKernel>> {
    if basepoint >= flow.disc.node_count() {
        return Err(Error::InvalidArgument(format!("basepoint {basepoint} off the grid")));
    }
    if !flow.contains_time(t0) {
        let (lo, hi) = flow.interval();
        return Err(Error::TimeOutsideInterval { t: t0, lo, hi });
    }
    let floor = tau_floor(flow, t0);
    for &s in at {
        if !flow.contains_time(s) {
            let (lo, hi) = flow.interval();
            return Err(Error::TimeOutsideInterval { t: s, lo, hi });
        }
        if t0 - s < floor {
            return Err(Error::BelowBootstrapFloor { tau: t0 - s, floor });
        }
    }
    let tau_b = bootstrap_tau(flow, t0);
    let t_boot = t0 - tau_b;
    let v0 = bootstrap_density(flow, basepoint, t_boot, tau_b);
    let stepper = Stepper::new(flow);
    let snaps = stepper.backward_snapshots(v0, t_boot, at, rannacher_steps(flow));
    Ok(snaps
        .into_iter()
        .map(|(s, density)| build_kernel(flow, basepoint, t0, s, density, tau_b))
        .collect())
}

/// Single-time convenience wrapper around [`conjugate_kernel_curve`].
pub fn conjugate_kernel(
    flow: &FlowScenario,
    basepoint: usize,
    t0: f64,
    s: f64,
) -> Result<ConjugateKernel> {
    Ok(conjugate_kernel_curve(flow, basepoint, t0, &[s])?.pop().unwrap())
}

/// Neighbor pair of a node along a grid axis, for dipole construction.
fn axis_neighbors(flow: &FlowScenario, node: usize, axis: usize) -> Result<(usize, usize)> {
    let disc = &flow.disc;
    if axis >= disc.shape.len() {
        return Err(Error::InvalidArgument(format!("axis {axis} out of range")));
    }
    let mut lo = disc.node_multi_index(node);
    let mut hi = lo.clone();
    let n_ax = disc.shape[axis];
    if disc.periodic[axis] {
        lo[axis] = (lo[axis] + n_ax - 1) % n_ax;
        hi[axis] = (hi[axis] + 1) % n_ax;
    } else {
        let i = lo[axis];
        if i == 0 {
            hi[axis] = 1;
        } else if i == n_ax - 1 {
            lo[axis] = n_ax - 2;
        } else {
            lo[axis] = i - 1;
            hi[axis] = i + 1;
        }
    }
    Ok((disc.flat_index(&lo), disc.flat_index(&hi)))
}

/// Basepoint-directional derivative of the kernel along a grid axis, solved
/// as the conjugate evolution of a dipole (difference of two neighboring
/// bootstraps). Zero total integral holds by construction.
pub fn kernel_basepoint_gradient(
    flow: &FlowScenario,
    kernel: &ConjugateKernel,
    axis: usize,
) -> Result<KernelGradientField> {
    let (lo, hi) = axis_neighbors(flow, kernel.basepoint, axis)?;
    let tau_b = bootstrap_tau(flow, kernel.t0);
    let t_boot = kernel.t0 - tau_b;
    let boot_slice = flow.slice_at(t_boot);
    let dist = crate::geometry::geodesic_distance(&boot_slice);
    let sep = dist.get(lo, hi);
    if sep <= 0.0 {
        return Err(Error::InvalidArgument("degenerate dipole separation".into()));
    }
    let b_hi = bootstrap_density(flow, hi, t_boot, tau_b);
    let b_lo = bootstrap_density(flow, lo, t_boot, tau_b);
    let dipole: Vec<f64> =
        b_hi.iter().zip(&b_lo).map(|(a, b)| (a - b) / sep).collect();
    let stepper = Stepper::new(flow);
    let snaps = stepper.backward_snapshots(dipole, t_boot, &[kernel.s], rannacher_steps(flow));
    let (_, dk) = snaps.into_iter().next().unwrap();
    let slice = flow.slice_at(kernel.s);
    let integral: f64 = dk.iter().zip(&slice.weights).map(|(a, w)| a * w).sum();
    let ratio: Vec<f64> = dk
        .iter()
        .zip(&kernel.density)
        .map(|(d, k)| if *k > DENSITY_FLOOR { d / k } else { 0.0 })
        .collect();
    Ok(KernelGradientField { axis, dk_density: dk, ratio, integral, tau: kernel.tau })
}

/// Forward heat solve between two times.
pub fn solve_heat_forward(
    flow: &FlowScenario,
    u0: &ScalarField,
    t_a: f64,
    t_b: f64,
) -> Result<ScalarField> {
    Stepper::new(flow).forward(u0, t_a, t_b)
}

/// Conjugate (adjoint) solve backward between two times.
pub fn solve_conjugate_backward(
    flow: &FlowScenario,
    v_b: &ScalarField,
    t_b: f64,
    t_a: f64,
) -> Result<ScalarField> {
    Stepper::new(flow).backward(v_b, t_b, t_a)
}

/// Discrete volume inner product at a given time.
pub fn volume_inner(flow: &FlowScenario, t: f64, u: &[f64], v: &[f64]) -> f64 {
    let slice = flow.slice_at(t);
    u.iter().zip(v).zip(&slice.weights).map(|((a, b), w)| a * b * w).sum()
}

/// Total discrete mass of a density at a given time.
pub fn total_mass(flow: &FlowScenario, t: f64, v: &[f64]) -> f64 {
    let slice = flow.slice_at(t);
    v.iter().zip(&slice.weights).map(|(a, w)| a * w).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{make_model_flow, ModelSpec};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    fn grid(a: f64, b: f64, k: usize) -> Vec<f64> {
        (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect()
    }

    #[test]
    fn constants_solve_the_heat_equation() {
        let flow = make_model_flow(
            &ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [12, 24] },
            &grid(0.0, 0.2, 4),
        )
        .unwrap();
        let n = flow.disc.node_count();
        let u0 = ScalarField::new(vec![2.5; n], 0.0);
        let u = solve_heat_forward(&flow, &u0, 0.0, 0.2).unwrap();
        for &x in &u.values {
            assert_abs_diff_eq!(x, 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn torus_fourier_mode_decays_at_the_exact_rate() {
        let flow = make_model_flow(
            &ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] },
            &grid(0.0, 0.05, 4),
        )
        .unwrap();
        let disc = &flow.disc;
        let k = 2.0;
        let u0: Vec<f64> = (0..disc.node_count())
            .map(|i| {
                let m = disc.node_multi_index(i);
                (2.0 * std::f64::consts::PI * k * disc.coords[0][m[0]]).cos()
            })
            .collect();
        let u = solve_heat_forward(&flow, &ScalarField::new(u0.clone(), 0.0), 0.0, 0.05).unwrap();
        let lam = (2.0 * std::f64::consts::PI * k).powi(2);
        let decay = (-lam * 0.05f64).exp();
        for i in 0..u0.len() {
            assert_abs_diff_eq!(u.values[i], u0[i] * decay, epsilon = 1e-6);
        }
    }

    #[test]
    fn duality_pairing_is_exact_on_an_evolving_metric() {
        let flow = make_model_flow(
            &ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [12, 24] },
            &grid(0.0, 0.2, 4),
        )
        .unwrap();
        let n = flow.disc.node_count();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let u0: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let vb: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let u = solve_heat_forward(&flow, &ScalarField::new(u0.clone(), 0.0), 0.0, 0.2).unwrap();
        let v = solve_conjugate_backward(&flow, &ScalarField::new(vb.clone(), 0.2), 0.2, 0.0).unwrap();
        let lhs = volume_inner(&flow, 0.2, &u.values, &vb);
        let rhs = volume_inner(&flow, 0.0, &u0, &v.values);
        assert_abs_diff_eq!(lhs, rhs, epsilon = 1e-12 * lhs.abs().max(1.0));
        // Conjugate mass is conserved.
        let m_b = total_mass(&flow, 0.2, &vb);
        let m_a = total_mass(&flow, 0.0, &v.values);
        assert_abs_diff_eq!(m_a, m_b, epsilon = 1e-12 * m_b.abs());
    }

    #[test]
    fn line_kernel_recovers_the_gaussian() {
        let flow = make_model_flow(
            &ModelSpec::EuclideanLine { half_len: 8.0, nodes: 512 },
            &grid(0.0, 1.0, 10),
        )
        .unwrap();
        let node = flow.disc.node_count() / 2;
        let tau = 0.25;
        let kernel = conjugate_kernel(&flow, node, 1.0, 1.0 - tau).unwrap();
        assert_abs_diff_eq!(kernel.diagnostics.mass, 1.0, epsilon = 1e-8);
        let xs = &flow.disc.coords[0];
        let x0 = xs[node];
        // 1% relative agreement over two Gaussian widths, far from the
        // absorbing boundary.
        let span = 2.2 * (4.0 * tau).sqrt();
        for (i, &x) in xs.iter().enumerate() {
            if (x - x0).abs() < span {
                let exact = (4.0 * std::f64::consts::PI * tau).powf(-0.5)
                    * (-(x - x0).powi(2) / (4.0 * tau)).exp();
                assert!(
                    (kernel.density[i] - exact).abs() <= 0.01 * exact,
                    "x={x} got={} want={}",
                    kernel.density[i],
                    exact
                );
            }
        }
        // Potential matches d^2 / (4 tau) near the basepoint.
        for (i, &x) in xs.iter().enumerate() {
            let d = (x - x0).abs();
            if d > 0.2 && d < 2.0 {
                let expect = d * d / (4.0 * tau);
                assert!(
                    (kernel.f[i] - expect).abs() <= 0.01 * expect.max(0.05),
                    "f mismatch at d={d}: got {} want {}",
                    kernel.f[i],
                    expect
                );
            }
        }
    }

    #[test]
    fn kernel_mass_is_one_on_every_model() {
        let models: Vec<(ModelSpec, Vec<f64>)> = vec![
            (ModelSpec::Circle { len: 6.283185307179586, nodes: 64 }, grid(0.0, 0.5, 5)),
            (ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] }, grid(0.0, 0.2, 4)),
            (ModelSpec::ShrinkingSphere { radius: 1.0, nodes: [16, 32] }, grid(0.0, 0.35, 7)),
            (ModelSpec::StaticSphere { radius: 1.0, nodes: [16, 32] }, grid(0.0, 0.5, 5)),
            (
                ModelSpec::WarpedRotsym {
                    dim: 3,
                    nodes: 128,
                    profile: crate::geometry::WarpedProfileSpec::Dumbbell { bulb: 1.0, neck: 0.4 },
                },
                grid(0.0, 0.06, 6),
            ),
        ];
        for (spec, times) in models {
            let flow = make_model_flow(&spec, &times).unwrap();
            let (t0, t1) = flow.interval();
            let node = flow.disc.node_count() / 2;
            let kernel = conjugate_kernel(&flow, node, t1, t0).unwrap();
            assert_abs_diff_eq!(kernel.diagnostics.mass, 1.0, epsilon = 1e-8);
            assert!(kernel.diagnostics.min_weight > -1e-10, "model {:?}", flow.model);
        }
    }

    #[test]
    fn kernel_semigroup_property_within_solver_tolerance() {
        let flow = make_model_flow(
            &ModelSpec::Circle { len: 6.283185307179586, nodes: 128 },
            &grid(0.0, 1.0, 10),
        )
        .unwrap();
        let n = flow.disc.node_count();
        let direct = conjugate_kernel(&flow, 0, 1.0, 0.2).unwrap();
        // Compose: kernel from t0 to m, then from each node at m to s.
        let mid = conjugate_kernel(&flow, 0, 1.0, 0.6).unwrap();
        let mut composed = vec![0.0; n];
        for z in 0..n {
            if mid.nu[z].abs() < 1e-14 {
                continue;
            }
            let kz = conjugate_kernel(&flow, z, 0.6, 0.2).unwrap();
            for i in 0..n {
                composed[i] += mid.nu[z] * kz.nu[i];
            }
        }
        let tv: f64 =
            composed.iter().zip(&direct.nu).map(|(a, b)| (a - b).abs()).sum::<f64>() * 0.5;
        assert!(tv < 2e-3, "semigroup TV defect {tv}");
    }

    #[test]
    fn dipole_gradient_integral_vanishes_and_matches_gaussian_score() {
        let flow = make_model_flow(
            &ModelSpec::EuclideanLine { half_len: 8.0, nodes: 512 },
            &grid(0.0, 1.0, 10),
        )
        .unwrap();
        let node = flow.disc.node_count() / 2;
        let tau = 0.25;
        let kernel = conjugate_kernel(&flow, node, 1.0, 1.0 - tau).unwrap();
        let grad = kernel_basepoint_gradient(&flow, &kernel, 0).unwrap();
        assert!(grad.integral.abs() < 1e-8, "dipole mass {}", grad.integral);
        // (t - s) * int (dK/K)^2 dnu = 1/2 for the Gaussian.
        let second: f64 = grad
            .ratio
            .iter()
            .zip(&kernel.nu)
            .map(|(r, nu)| r * r * nu.max(0.0))
            .sum();
        assert_abs_diff_eq!(tau * second, 0.5, epsilon = 0.01);
    }

    #[test]
    fn lipschitz_constant_does_not_grow_on_the_circle() {
        let len = 6.283185307179586;
        let flow =
            make_model_flow(&ModelSpec::Circle { len, nodes: 128 }, &grid(0.0, 0.5, 5)).unwrap();
        let disc = &flow.disc;
        let h = len / 128.0;
        // 1-Lipschitz sawtooth via distance to a fixed node.
        let u0: Vec<f64> = (0..disc.node_count())
            .map(|i| {
                let d = (disc.coords[0][i] - std::f64::consts::PI).abs();
                d.min(len - d)
            })
            .collect();
        let lip = |u: &[f64]| {
            let mut l = 0.0f64;
            for i in 0..u.len() {
                let j = (i + 1) % u.len();
                l = l.max((u[j] - u[i]).abs() / h);
            }
            l
        };
        let before = lip(&u0);
        let u = solve_heat_forward(&flow, &ScalarField::new(u0, 0.0), 0.0, 0.3).unwrap();
        let after = lip(&u.values);
        assert!(before <= 1.0 + 1e-12);
        assert!(after <= before * (1.0 + 2.0 * h), "{after} vs {before}");
    }
}
