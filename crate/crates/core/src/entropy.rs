//! Pointed Nash entropy, the W-functional, entropy fields over spacetime and
//! the gradient-estimate transform Phi.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flows::{FlowScenario, ModelTag};
use crate::heat::{conjugate_kernel_curve, ConjugateKernel};
use crate::scenario::discrete_gradient_sq;

/// Pointed Nash entropy of a kernel: int f dnu - n/2, quadrature restricted
/// to nodes above the underflow guard (excluded mass is in the kernel
/// diagnostics).
pub fn nash_entropy(kernel: &ConjugateKernel) -> f64 {
    let mut acc = 0.0;
    for i in 0..kernel.nu.len() {
        if kernel.included[i] {
            acc += kernel.nu[i] * kernel.f[i];
        }
    }
    acc - kernel.dim as f64 / 2.0
}

/// The W-functional int (tau (|grad f|^2 + R) + f - n) dnu of a kernel.
pub fn w_functional(flow: &FlowScenario, kernel: &ConjugateKernel) -> f64 {
    let slice = flow.slice_at(kernel.s);
    let grad_sq = discrete_gradient_sq(&slice, &kernel.f);
    let scalar = &flow.curvature_at(kernel.s).scalar;
    let n = kernel.dim as f64;
    let mut acc = 0.0;
    for i in 0..kernel.nu.len() {
        if kernel.included[i] && kernel.nu[i] > 0.0 {
            acc += kernel.nu[i]
                * (kernel.tau * (grad_sq[i] + scalar[i]) + kernel.f[i] - n);
        }
    }
    acc
}

/// Moment integrals used by the basic entropy bounds:
/// (int tau (|grad f|^2 + R) dnu, int (f - N - n/2)^2 dnu).
pub fn entropy_moments(flow: &FlowScenario, kernel: &ConjugateKernel) -> (f64, f64) {
    let slice = flow.slice_at(kernel.s);
    let grad_sq = discrete_gradient_sq(&slice, &kernel.f);
    let scalar = &flow.curvature_at(kernel.s).scalar;
    let n_half = kernel.dim as f64 / 2.0;
    let nash = nash_entropy(kernel);
    let mut first = 0.0;
    let mut second = 0.0;
    for i in 0..kernel.nu.len() {
        if kernel.included[i] && kernel.nu[i] > 0.0 {
            first += kernel.nu[i] * kernel.tau * (grad_sq[i] + scalar[i]);
            let dev = kernel.f[i] - nash - n_half;
            second += kernel.nu[i] * dev * dev;
        }
    }
    (first, second)
}

/// tau samples, entropies, W values and ladder derivatives at one basepoint.
#[derive(Debug, Clone, Serialize)]
pub struct EntropyCurve {
    pub basepoint: usize,
    pub t0: f64,
    pub taus: Vec<f64>,
    pub nash: Vec<f64>,
    pub w: Vec<f64>,
    /// Centered finite differences of tau * N(tau) on the ladder.
    pub d_tau_n: Vec<f64>,
    /// Centered finite differences of N(tau) itself.
    pub dn: Vec<f64>,
}

/// Evaluate the entropy curve on a tau ladder (ascending). One backward
/// kernel sweep serves every sample.
pub fn entropy_curve(
    flow: &FlowScenario,
    basepoint: usize,
    t0: f64,
    taus: &[f64],
) -> Result<EntropyCurve> {
    if taus.is_empty() || taus.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("tau ladder must be strictly increasing".into()));
    }
    let at: Vec<f64> = taus.iter().map(|&t| t0 - t).collect();
    let kernels = conjugate_kernel_curve(flow, basepoint, t0, &at)?;
    // Kernels arrive ascending in s, i.e. descending in tau.
    let mut nash = vec![0.0; taus.len()];
    let mut w = vec![0.0; taus.len()];
    for k in &kernels {
        let idx = taus
            .iter()
            .position(|&t| (t - k.tau).abs() < 1e-10 * (1.0 + k.tau))
            .expect("kernel snapshot matches a ladder point");
        nash[idx] = nash_entropy(k);
        w[idx] = w_functional(flow, k);
    }
    let m = taus.len();
    let mut d_tau_n = vec![f64::NAN; m];
    let mut dn = vec![f64::NAN; m];
    for i in 1..m.saturating_sub(1) {
        let (t_lo, t_mid, t_hi) = (taus[i - 1], taus[i], taus[i + 1]);
        let g_lo = t_lo * nash[i - 1];
        let g_hi = t_hi * nash[i + 1];
        d_tau_n[i] = (g_hi - g_lo) / (t_hi - t_lo);
        dn[i] = (nash[i + 1] - nash[i - 1]) / (t_hi - t_lo);
        let _ = t_mid;
    }
    Ok(EntropyCurve { basepoint, t0, taus: taus.to_vec(), nash, w, d_tau_n, dn })
}

/// Geometric tau ladder between two bounds (ratio ~ 1.25).
pub fn tau_ladder(tau_min: f64, tau_max: f64) -> Vec<f64> {
    let mut taus = Vec::new();
    let mut t = tau_min;
    while t < tau_max {
        taus.push(t);
        t *= 1.25;
    }
    taus.push(tau_max);
    taus
}

/// Entropy field at time t with reference time s: N*_s(x, t) per node,
/// together with the magnitude of its discrete gradient. Homogeneous kinds
/// reuse one kernel per symmetry orbit (full translation orbit on circles
/// and tori, longitude rotations on latitude grids).
pub fn nash_field(flow: &FlowScenario, s: f64, t: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if s >= t {
        return Err(Error::InvalidArgument("need s < t".into()));
    }
    let disc = &flow.disc;
    let n = disc.node_count();
    let mut field = vec![f64::NAN; n];
    match flow.model {
        ModelTag::Circle | ModelTag::FlatTorus => {
            // Translation invariance: one kernel, entropy is constant.
            let k = crate::heat::conjugate_kernel(flow, 0, t, s)?;
            let value = nash_entropy(&k);
            field.fill(value);
        }
        ModelTag::ShrinkingSphere | ModelTag::StaticSphere => {
            // Longitude rotations: one kernel per latitude row.
            let np = disc.shape[1];
            for row in 0..disc.shape[0] {
                let k = crate::heat::conjugate_kernel(flow, row * np, t, s)?;
                let value = nash_entropy(&k);
                for j in 0..np {
                    field[row * np + j] = value;
                }
            }
        }
        _ => {
            for (x, slot) in field.iter_mut().enumerate() {
                let k = crate::heat::conjugate_kernel(flow, x, t, s)?;
                *slot = nash_entropy(&k);
            }
        }
    }
    let grad_sq = discrete_gradient_sq(&flow.slice_at(t), &field);
    let grad = grad_sq.iter().map(|g| g.sqrt()).collect();
    Ok((field, grad))
}

/// Antiderivative of the unit Gaussian density: Phi' = (4 pi)^{-1/2}
/// exp(-x^2/4), increasing from 0 to 1. The complementary form keeps full
/// relative precision deep in the tails.
pub fn phi(x: f64) -> f64 {
    if x < 0.0 {
        0.5 * libm::erfc(-0.5 * x)
    } else {
        1.0 - 0.5 * libm::erfc(0.5 * x)
    }
}

pub fn phi_deriv(x: f64) -> f64 {
    (4.0 * std::f64::consts::PI).powf(-0.5) * (-x * x / 4.0).exp()
}

/// Inverse of [`phi`] on (0,1) by safeguarded Newton.
pub fn phi_inv(y: f64) -> Result<f64> {
    if !(y > 0.0 && y < 1.0) {
        return Err(Error::InvalidArgument(format!("phi_inv argument {y} outside (0,1)")));
    }
    let (mut lo, mut hi) = (-60.0f64, 60.0f64);
    let mut x = 2.0 * libm::erf_inv_approx(y);
    if !x.is_finite() {
        x = 0.0;
    }
    for _ in 0..100 {
        let fx = phi(x) - y;
        if fx > 0.0 {
            hi = hi.min(x);
        } else {
            lo = lo.max(x);
        }
        let d = phi_deriv(x);
        let mut next = x - fx / d;
        if !(next > lo && next < hi) || !next.is_finite() {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() < 1e-15 * (1.0 + x.abs()) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

/// Time-scaled transform Phi_t(x) = Phi(x / sqrt(t)).
pub fn phi_t(t: f64, x: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::InvalidArgument("phi_t needs t > 0".into()));
    }
    Ok(phi(x / t.sqrt()))
}

/// Inverse of the time-scaled transform.
pub fn phi_t_inv(t: f64, y: f64) -> Result<f64> {
    if t <= 0.0 {
        return Err(Error::InvalidArgument("phi_t_inv needs t > 0".into()));
    }
    Ok(t.sqrt() * phi_inv(y)?)
}

// libm has no erf_inv; a rough seed for Newton is enough.
mod libm {
    pub use ::libm::erfc;

    pub fn erf_inv_approx(y: f64) -> f64 {
        // Winitzki-style approximation, only used as a Newton seed.
        let u = 2.0 * y - 1.0;
        let a = 0.147;
        let ln1mu2 = (1.0 - u * u).max(1e-300).ln();
        let term = 2.0 / (std::f64::consts::PI * a) + ln1mu2 / 2.0;
        (u.signum()) * ((term * term - ln1mu2 / a).sqrt() - term).max(0.0).sqrt()
    }
}

/// Serialize an entropy curve to CSV (tau, N, W, dN/dtau).
pub fn entropy_curve_csv(curve: &EntropyCurve) -> String {
    let mut out = String::from("tau,nash,w,dn_dtau\n");
    for i in 0..curve.taus.len() {
        out.push_str(&format!(
            "{},{},{},{}\n",
            curve.taus[i], curve.nash[i], curve.w[i], curve.dn[i]
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flows::{make_model_flow, ModelSpec};
    use approx::assert_abs_diff_eq;

    fn grid(a: f64, b: f64, k: usize) -> Vec<f64> {
        (0..=k).map(|i| a + (b - a) * i as f64 / k as f64).collect()
    }

    #[test]
    fn phi_closed_values() {
        assert_abs_diff_eq!(phi(0.0), 0.5, epsilon = 1e-15);
        // Simpson quadrature oracle of the density over [0, 2]:
        // phi(2) = 1/2 + int_0^2 (4 pi)^{-1/2} e^{-x^2/4} dx = 0.921350396...
        let mut acc = 0.0;
        let m = 4000;
        let h = 2.0 / m as f64;
        for k in 0..m {
            let a = k as f64 * h;
            acc += h / 6.0 * (phi_deriv(a) + 4.0 * phi_deriv(a + 0.5 * h) + phi_deriv(a + h));
        }
        let oracle = 0.5 + acc;
        assert_abs_diff_eq!(oracle, 0.9213503964748575, epsilon = 1e-12);
        assert_abs_diff_eq!(phi(2.0), oracle, epsilon = 1e-12);
    }

    #[test]
    fn phi_inverse_identity() {
        for &x in &[-3.0, -1.0, 0.0, 0.3, 1.3, 4.0] {
            let y = phi_t(0.7, x).unwrap();
            assert_abs_diff_eq!(phi_t_inv(0.7, y).unwrap(), x, epsilon = 1e-10);
        }
        assert!(phi_inv(0.0).is_err());
        assert!(phi_inv(1.0).is_err());
    }

    #[test]
    fn euclidean_line_entropy_vanishes() {
        let flow = make_model_flow(
            &ModelSpec::EuclideanLine { half_len: 8.0, nodes: 1024 },
            &grid(0.0, 1.0, 10),
        )
        .unwrap();
        let node = flow.disc.node_count() / 2;
        for tau in [0.05, 0.2, 0.5] {
            let k = crate::heat::conjugate_kernel(&flow, node, 1.0, 1.0 - tau).unwrap();
            let n = nash_entropy(&k);
            assert!(n.abs() < 1e-3, "tau={tau}: N={n}");
            let w = w_functional(&flow, &k);
            assert!(w.abs() < 1e-3, "tau={tau}: W={w}");
        }
    }

    #[test]
    fn torus_entropy_approaches_the_uniform_limit() {
        // For tau >> L^2 the kernel is uniform and
        // N = log(L^2 / (4 pi tau)) - 1 in dimension 2.
        let flow = make_model_flow(
            &ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [24, 24] },
            &grid(0.0, 2.2, 11),
        )
        .unwrap();
        let tau = 2.0;
        let k = crate::heat::conjugate_kernel(&flow, 5, 2.2, 2.2 - tau).unwrap();
        let n = nash_entropy(&k);
        let expect = (1.0 / (4.0 * std::f64::consts::PI * tau)).ln() - 1.0;
        assert!((n - expect).abs() < 0.02 * expect.abs(), "N={n} expect={expect}");
    }

    #[test]
    fn entropy_curve_is_nonpositive_nonincreasing_with_w_matching_the_ladder() {
        let flow = make_model_flow(
            &ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [24, 24] },
            &grid(0.0, 1.0, 10),
        )
        .unwrap();
        let taus = tau_ladder(0.02, 0.9);
        let curve = entropy_curve(&flow, 7, 1.0, &taus).unwrap();
        for (i, &n) in curve.nash.iter().enumerate() {
            assert!(n <= 1e-6, "N({}) = {n} > 0", curve.taus[i]);
        }
        for w in curve.nash.windows(2) {
            assert!(w[1] <= w[0] + 1e-6);
        }
        // W matches d/dtau (tau N) on interior ladder points.
        for i in 1..taus.len() - 1 {
            let diff = (curve.w[i] - curve.d_tau_n[i]).abs();
            assert!(diff < 0.02 + 0.05 * curve.w[i].abs(), "W={} fd={}", curve.w[i], curve.d_tau_n[i]);
        }
    }

    #[test]
    fn nash_field_is_constant_on_the_torus() {
        let flow = make_model_flow(
            &ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] },
            &grid(0.0, 0.2, 4),
        )
        .unwrap();
        let (field, grad) = nash_field(&flow, 0.0, 0.2).unwrap();
        let first = field[0];
        for &v in &field {
            assert_abs_diff_eq!(v, first, epsilon = 1e-6);
        }
        assert!(grad.iter().all(|&g| g < 1e-6));
    }
}
