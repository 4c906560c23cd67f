//! Property tests for the numeric invariants the modules promise.

use proptest::prelude::*;

use rflab_core::entropy::{phi_t, phi_t_inv};
use rflab_core::flows::{make_model_flow, ModelSpec};
use rflab_core::geometry::{build_geometry, geodesic_distance, GeometryDescriptor};
use rflab_core::scenario::Scenario;
use rflab_core::transport::{
    self_variance, h_center, h_n, network_flow_w1, variance, w1_distance, W1Method,
};

fn normalized(weights: Vec<f64>) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.into_iter().map(|w| w / total).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Metric axioms hold on every sampled triple of a latitude grid.
    #[test]
    fn sphere_distance_metric_axioms(
        radius in 0.5f64..3.0,
        triples in proptest::collection::vec((0usize..384, 0usize..384, 0usize..384), 16)
    ) {
        let (_, slice) = build_geometry(&GeometryDescriptor::SphereLatitudeGrid {
            radius,
            nodes: [16, 24],
        }).unwrap();
        let t = geodesic_distance(&slice);
        for (a, b, c) in triples {
            let (a, b, c) = (a % t.n, b % t.n, c % t.n);
            prop_assert!((t.get(a, b) - t.get(b, a)).abs() < 1e-12);
            prop_assert_eq!(t.get(a, a), 0.0);
            prop_assert!(t.get(a, c) <= t.get(a, b) + t.get(b, c) + 1e-9);
        }
    }

    /// sqrt(Var) triangle inequality and the W1 sandwich on random measures.
    #[test]
    fn variance_triangle_and_w1_sandwich(
        raw1 in proptest::collection::vec(0.01f64..1.0, 64),
        raw2 in proptest::collection::vec(0.01f64..1.0, 64),
        raw3 in proptest::collection::vec(0.01f64..1.0, 64),
    ) {
        let (_, slice) =
            build_geometry(&GeometryDescriptor::Circle { len: 2.0, nodes: 64 }).unwrap();
        let dist = geodesic_distance(&slice);
        let (m1, m2, m3) = (normalized(raw1), normalized(raw2), normalized(raw3));
        let v12 = variance(&dist, &m1, &m2).unwrap().value.sqrt();
        let v13 = variance(&dist, &m1, &m3).unwrap().value.sqrt();
        let v23 = variance(&dist, &m2, &m3).unwrap().value.sqrt();
        prop_assert!(v13 <= v12 + v23 + 1e-9);
        let w = w1_distance(&slice, &dist, &m1, &m2, W1Method::Quantile1d).unwrap().value;
        let s1 = self_variance(&dist, &m1).unwrap().value.sqrt();
        let s2 = self_variance(&dist, &m2).unwrap().value.sqrt();
        prop_assert!(w <= v12 + 1e-9);
        prop_assert!(v12 <= w + s1 + s2 + 1e-9);
    }

    /// The exact transport routes agree on arbitrary chain instances.
    #[test]
    fn quantile_equals_network_flow(
        raw1 in proptest::collection::vec(0.0f64..1.0, 48),
        raw2 in proptest::collection::vec(0.0f64..1.0, 48),
    ) {
        prop_assume!(raw1.iter().sum::<f64>() > 0.1 && raw2.iter().sum::<f64>() > 0.1);
        let (_, slice) = build_geometry(&GeometryDescriptor::LineSegmentWithAbsorbingEnds {
            half_len: 1.0,
            nodes: 48,
        }).unwrap();
        let dist = geodesic_distance(&slice);
        let (m1, m2) = (normalized(raw1), normalized(raw2));
        let q = w1_distance(&slice, &dist, &m1, &m2, W1Method::Quantile1d).unwrap().value;
        let (nf, plan) = network_flow_w1(&dist, &m1, &m2).unwrap();
        prop_assert!((q - nf.value).abs() < 1e-10, "{} vs {}", q, nf.value);
        // The coupling plan really transports m1 to m2 over the difference.
        let plan_cost: f64 = plan.iter().map(|&(i, j, f)| dist.get(i, j) * f).sum();
        prop_assert!((plan_cost - nf.value).abs() < 1e-12);
    }

    /// The gradient transform inverts itself on the contract band
    /// |x| <= 10 sqrt(t) (beyond it the forward value saturates in f64).
    #[test]
    fn phi_transform_inverse_identity(t in 0.05f64..5.0, x in -8.0f64..8.0) {
        prop_assume!(x.abs() <= 10.0 * t.sqrt());
        let y = phi_t(t, x).unwrap();
        prop_assume!(y > 0.0 && y < 1.0);
        let back = phi_t_inv(t, y).unwrap();
        prop_assert!((back - x).abs() < 1e-10 * (1.0 + x.abs()));
    }
}

#[test]
fn h_center_on_the_line_sits_at_the_basepoint() {
    let flow = make_model_flow(
        &ModelSpec::EuclideanLine { half_len: 8.0, nodes: 512 },
        &(0..=10).map(|i| i as f64 * 0.1).collect::<Vec<_>>(),
    )
    .unwrap();
    let scn = Scenario::new("line", flow);
    let tau = 0.3;
    let basepoint = scn.center_node();
    let nu = scn.kernel_measure(basepoint, 1.0, 1.0 - tau).unwrap();
    let dist = scn.distance(1.0 - tau);
    let hc = h_center(&dist, &nu, 1, tau, scn.flow.slices[0].mesh_width());
    // The center of a Gaussian is its mean: the basepoint node.
    assert!(dist.get(hc.node, basepoint) <= 2.0 * scn.flow.slices[0].mesh_width());
    // Var = 2 tau for the Gaussian, comfortably below H_1 tau = 4 tau.
    assert!((hc.var - 2.0 * tau).abs() < 0.05 * tau, "var {}", hc.var);
    assert!(hc.within_bound);
    assert_eq!(h_n(1), 4.0);
}

#[test]
fn h_center_on_the_sphere_respects_rotational_symmetry() {
    let flow = make_model_flow(
        &ModelSpec::StaticSphere { radius: 1.0, nodes: [16, 32] },
        &(0..=10).map(|i| i as f64 * 0.1).collect::<Vec<_>>(),
    )
    .unwrap();
    let scn = Scenario::new("sphere", flow);
    let basepoint = scn.flow.disc.flat_index(&[0, 5]); // nearest the north pole
    let tau = 0.4;
    let nu = scn.kernel_measure(basepoint, 1.0, 1.0 - tau).unwrap();
    let dist = scn.distance(1.0 - tau);
    let hc = h_center(&dist, &nu, 2, tau, scn.flow.slices[0].mesh_width());
    // The kernel concentrates about its basepoint axis; the center snaps to
    // within a couple of cells of it.
    assert!(
        dist.get(hc.node, basepoint) <= 2.5 * scn.flow.slices[0].mesh_width(),
        "center {} vs basepoint {}",
        hc.node,
        basepoint
    );
    assert!(hc.within_bound);
}

#[test]
fn greedy_cover_of_a_single_point_has_one_center() {
    let flow = make_model_flow(
        &ModelSpec::Circle { len: 2.0 * std::f64::consts::PI, nodes: 128 },
        &(0..=10).map(|i| i as f64 * 0.1).collect::<Vec<_>>(),
    )
    .unwrap();
    let scn = Scenario::new("circle", flow);
    let x = vec![(7usize, 0.8f64)];
    let cover = rflab_core::transport::greedy_cover(&scn, &x, 0.5, 0.6).unwrap();
    assert_eq!(cover.count, 1);
    assert!(cover.coverage_verified);
}

#[test]
fn kernel_negative_lobes_stay_reported_and_tiny() {
    for (spec, t0) in [
        (ModelSpec::StaticSphere { radius: 1.0, nodes: [20, 40] }, 1.0),
        (ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [24, 24] }, 0.5),
    ] {
        let steps: Vec<f64> = (0..=10).map(|i| i as f64 * t0 / 10.0).collect();
        let flow = make_model_flow(&spec, &steps).unwrap();
        let scn = Scenario::new("probe", flow);
        let bp = scn.kernel_basepoints(1, 3)[0];
        let floor = rflab_core::heat::tau_floor(&scn.flow, t0);
        let kernel = scn.kernel(bp, t0, t0 - 1.6 * floor).unwrap();
        assert!(
            kernel.diagnostics.negative_mass < 1e-10,
            "negative mass {}",
            kernel.diagnostics.negative_mass
        );
        assert!((kernel.diagnostics.mass - 1.0).abs() < 1e-10);
    }
}

#[test]
fn cylinder_duality_and_constants() {
    let flow = make_model_flow(
        &ModelSpec::ShrinkingCylinder { radius: 1.0, circle_len: 3.0, nodes: [8, 12, 8] },
        &(0..=6).map(|i| i as f64 * 0.05).collect::<Vec<_>>(),
    )
    .unwrap();
    use rflab_core::heat::{
        solve_conjugate_backward, solve_heat_forward, total_mass, volume_inner, ScalarField,
    };
    let n = flow.disc.node_count();
    let u0: Vec<f64> = (0..n).map(|i| ((i * 37) % 11) as f64 / 11.0 - 0.4).collect();
    let vb: Vec<f64> = (0..n).map(|i| 1.0 + 0.3 * (((i * 13) % 7) as f64 / 7.0)).collect();
    let u = solve_heat_forward(&flow, &ScalarField::new(u0.clone(), 0.0), 0.0, 0.3).unwrap();
    let v = solve_conjugate_backward(&flow, &ScalarField::new(vb.clone(), 0.3), 0.3, 0.0).unwrap();
    let lhs = volume_inner(&flow, 0.3, &u.values, &vb);
    let rhs = volume_inner(&flow, 0.0, &u0, &v.values);
    assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    let mass_drift = (total_mass(&flow, 0.0, &v.values) - total_mass(&flow, 0.3, &vb)).abs();
    assert!(mass_drift < 1e-12 * n as f64);
    // Constants are preserved by the forward solve.
    let c = solve_heat_forward(&flow, &ScalarField::new(vec![1.5; n], 0.0), 0.0, 0.3).unwrap();
    assert!(c.values.iter().all(|&x| (x - 1.5).abs() < 1e-12));
    // Product curvature: R from the sphere factor, mixed planes flat.
    let curv = &flow.curvatures[0];
    assert!((curv.scalar[0] - 2.0).abs() < 1e-12);
    assert!((curv.rm_norm[0] - 1.0).abs() < 1e-12);
    assert_eq!(curv.ricci_min[0], 0.0);
}

#[test]
fn check_results_are_deterministic_given_the_seed() {
    use rflab_core::checks::{run_check, TolerancePolicy};
    let flow = make_model_flow(
        &ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] },
        &(0..=8).map(|i| i as f64 * 0.05).collect::<Vec<_>>(),
    )
    .unwrap();
    let pol = TolerancePolicy::default();
    for id in ["var-same-time", "poincare", "nash-basic"] {
        let scn1 = Scenario::new("torus", make_model_flow(
            &ModelSpec::FlatTorus { len: [1.0, 1.0], nodes: [16, 16] },
            &(0..=8).map(|i| i as f64 * 0.05).collect::<Vec<_>>(),
        ).unwrap());
        let scn2 = Scenario::new("torus", flow.clone());
        let a = run_check(id, &scn1, &pol, 42).unwrap();
        let b = run_check(id, &scn2, &pol, 42).unwrap();
        assert_eq!(a.margin.to_bits(), b.margin.to_bits(), "{id} margins differ");
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.pass, b.pass);
    }
}
