//! Independent-oracle integration tests: spectral kernels, closed-form
//! transport values and cross-method agreement.

use rflab_core::flows::{make_model_flow, ModelSpec};
use rflab_core::geometry::WarpedProfileSpec;
use rflab_core::heat::conjugate_kernel;

/// Legendre polynomial values by the three-term recurrence.
fn legendre(l: usize, x: f64) -> f64 {
    let mut p0 = 1.0;
    let mut p1 = x;
    if l == 0 {
        return p0;
    }
    for k in 1..l {
        let p2 = ((2 * k + 1) as f64 * x * p1 - k as f64 * p0) / (k + 1) as f64;
        p0 = p1;
        p1 = p2;
    }
    p1
}

/// The unit-sphere heat kernel from a pole, via its spectral expansion:
/// sum over l of (2l+1)/(4 pi) exp(-l(l+1) tau) P_l(cos theta).
fn spectral_sphere_kernel(tau: f64, cos_theta: f64) -> f64 {
    let mut acc = 0.0;
    for l in 0..200 {
        let lam = (l * (l + 1)) as f64;
        let term = (2 * l + 1) as f64 / (4.0 * std::f64::consts::PI)
            * (-lam * tau).exp()
            * legendre(l, cos_theta);
        acc += term;
        if lam * tau > 60.0 {
            break;
        }
    }
    acc
}

/// Static unit sphere, represented on the rotational quotient so the pole
/// is an honest grid point: the conjugate kernel from the pole matches the
/// Legendre spectral kernel in total variation.
#[test]
fn pole_kernel_matches_the_legendre_expansion() {
    let nodes = 2048;
    let times: Vec<f64> = (0..=8).map(|i| i as f64 * 0.05).collect();
    let flow = make_model_flow(
        &ModelSpec::WarpedStatic {
            dim: 2,
            nodes,
            profile: WarpedProfileSpec::Round { radius: 1.0 },
        },
        &times,
    )
    .unwrap();
    let slice = flow.slice_at(0.0);
    let s_arc = slice.warped_arclength();
    for tau in [0.1, 0.25] {
        let kernel = conjugate_kernel(&flow, 0, 0.4, 0.4 - tau).unwrap();
        let mut tv = 0.0;
        for i in 0..nodes {
            let exact = spectral_sphere_kernel(tau, s_arc[i].cos());
            tv += (kernel.density[i] - exact).abs() * slice.weights[i];
        }
        tv *= 0.5;
        assert!(tv < 1e-4, "tau={tau}: total variation {tv:.3e}");
    }
}

/// The stepped warped round sphere stays within 1% of the analytic
/// shrinking law, measured through its scalar curvature.
#[test]
fn warped_round_flow_tracks_the_analytic_scalar_curvature() {
    let times: Vec<f64> = (0..=10).map(|i| i as f64 * 0.03).collect();
    let flow = make_model_flow(
        &ModelSpec::WarpedRotsym {
            dim: 2,
            nodes: 256,
            profile: WarpedProfileSpec::Round { radius: 1.0 },
        },
        &times,
    )
    .unwrap();
    for (k, &t) in flow.times.iter().enumerate() {
        let expect = 2.0 / (1.0 - 2.0 * t);
        let measured = flow.r_min[k];
        assert!(
            (measured - expect).abs() < 0.02 * expect,
            "t={t}: R_min {measured} vs {expect}"
        );
    }
}

/// Cross-method transport agreement on a freshly built instance, as the
/// pre-run validation requires.
#[test]
fn transport_methods_cross_validate() {
    let worst = rflab_core::transport::cross_validate_methods(99).unwrap();
    assert!(worst < 1e-4, "deviation {worst:.3e}");
}
