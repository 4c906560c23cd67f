//! Acceptance suite: one test per criterion, each printing a pass/fail line.
//!
//! The scenario set is shared across criteria (and across test threads), so
//! kernel and distance caches amortize the way a production run would.

use std::sync::OnceLock;

use rflab_core::checks::{empirical_constant, run_check, CheckResult, TolerancePolicy};
use rflab_core::entropy::nash_entropy;
use rflab_core::heat::{conjugate_kernel, kernel_basepoint_gradient};
use rflab_core::scenario::{standard_scenarios, Scenario, ScenarioProfile};
use rflab_core::transport::{self_variance, h_n};

const SEED: u64 = 2026;

fn scenarios() -> &'static Vec<Scenario> {
    static SCN: OnceLock<Vec<Scenario>> = OnceLock::new();
    SCN.get_or_init(|| standard_scenarios(ScenarioProfile::Default).expect("scenario set"))
}

fn by_id(id: &str) -> &'static Scenario {
    scenarios().iter().find(|s| s.id == id).expect("scenario present")
}

fn policy() -> TolerancePolicy {
    TolerancePolicy::default()
}

fn report(criterion: &str, pass: bool, detail: &str) {
    println!(
        "acceptance {:55} {} {}",
        criterion,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
    assert!(pass, "criterion failed: {criterion}: {detail}");
}

fn run_on(check: &str, scenario_id: &str) -> CheckResult {
    run_check(check, by_id(scenario_id), &policy(), SEED)
        .unwrap_or_else(|e| panic!("{check} on {scenario_id}: {e}"))
}

#[test]
fn criterion_01_duality_and_mass() {
    let mut all = true;
    let mut worst = f64::INFINITY;
    for scn in scenarios() {
        let r = run_on("duality-mass", &scn.id);
        all &= r.pass;
        worst = worst.min(r.margin);
    }
    report(
        "1 duality residual <= 1e-12, kernel mass 1 +- 1e-8",
        all,
        &format!("worst margin {worst:.3e}"),
    );
}

#[test]
fn criterion_02_sharp_variance_on_the_line() {
    let scn = by_id("euclidean-line");
    let (_, t0) = scn.flow.interval();
    let mut worst_rel: f64 = 0.0;
    for tau in [0.1, 0.2, 0.4] {
        let nu = scn.kernel_measure(scn.center_node(), t0, t0 - tau).unwrap();
        let dist = scn.distance(t0 - tau);
        let var = self_variance(&dist, &nu).unwrap().value;
        let expect = 4.0 * tau; // H_1 tau with H_1 = 4
        worst_rel = worst_rel.max((var - expect).abs() / expect);
    }
    assert_eq!(h_n(1), 4.0);
    report(
        "2 line kernel Var = 4(t-s) within 2% (sharp H_1)",
        worst_rel <= 0.02,
        &format!("worst relative deviation {worst_rel:.4}"),
    );
}

#[test]
fn criterion_03_variance_monotonicity() {
    let mut all = true;
    let mut details = String::new();
    for id in ["flat-torus", "static-sphere", "shrinking-sphere"] {
        let r = run_on("var-monotone", id);
        all &= r.pass;
        details.push_str(&format!("{id}: margin {:.2e} (tol {:.1e}); ", r.margin, r.tolerance));
    }
    report("3 Var + H_n t non-decreasing on 5 basepoint pairs", all, &details);
}

#[test]
fn criterion_04_gradient_estimate_sharpness() {
    let mut all = true;
    let mut worst = f64::INFINITY;
    for scn in scenarios() {
        let r = run_on("gradient-estimate", &scn.id);
        all &= r.pass;
        worst = worst.min(r.margin);
    }
    report(
        "4 step datum attains |grad Phi^-1(u)| = 1 +- 5h; others stay below",
        all,
        &format!("worst margin {worst:.3e}"),
    );
}

#[test]
fn criterion_05_kernel_score_bound() {
    // Line: (t-s) int (d_v K / K)^2 dnu = 1/2 within 2%.
    let scn = by_id("euclidean-line");
    let (_, t0) = scn.flow.interval();
    let mut worst_rel: f64 = 0.0;
    for tau in [0.15, 0.3] {
        let kernel = conjugate_kernel(&scn.flow, scn.center_node(), t0, t0 - tau).unwrap();
        let grad = kernel_basepoint_gradient(&scn.flow, &kernel, 0).unwrap();
        let second: f64 = grad
            .ratio
            .iter()
            .zip(&kernel.nu)
            .map(|(r, nu)| r * r * nu.max(0.0))
            .sum();
        worst_rel = worst_rel.max((tau * second - 0.5).abs() / 0.5);
    }
    let line_ok = worst_rel <= 0.02;
    // Static sphere: frame sum <= n/2 = 1 plus tolerance.
    let r = run_on("nabla-k-integral", "static-sphere");
    report(
        "5 score bound: line value 0.5 +- 2%, static sphere <= n/2",
        line_ok && r.pass,
        &format!("line rel dev {worst_rel:.4}; sphere margin {:.3e}", r.margin),
    );
}

#[test]
fn criterion_06_nash_entropy_properties() {
    // Euclidean line: N identically zero within 1e-3.
    let scn = by_id("euclidean-line");
    let (_, t0) = scn.flow.interval();
    let mut worst_n: f64 = 0.0;
    for tau in [0.05, 0.2, 0.5, 0.85] {
        let k = conjugate_kernel(&scn.flow, scn.center_node(), t0, t0 - tau).unwrap();
        worst_n = worst_n.max(nash_entropy(&k).abs());
    }
    let line_ok = worst_n <= 1e-3;
    let mut rest = true;
    let mut details = format!("line |N| max {worst_n:.2e}; ");
    for id in ["flat-torus", "shrinking-sphere"] {
        let basic = run_on("nash-basic", id);
        let dep = run_on("nash-dependence", id);
        rest &= basic.pass && dep.pass;
        details.push_str(&format!(
            "{id}: basic {:.1e}, dependence {:.1e}; ",
            basic.margin, dep.margin
        ));
    }
    report("6 N = 0 on the line; sign/monotone/doubling/gradient bounds", line_ok && rest, &details);
}

#[test]
fn criterion_07_poincare_constants() {
    let mut all = true;
    let mut details = String::new();
    for id in ["euclidean-line", "flat-torus", "shrinking-sphere"] {
        let r = run_on("poincare", id);
        all &= r.pass;
        if let Some(note) = r.notes.iter().find(|n| n.contains("linear ratio")) {
            details.push_str(&format!("{id}: {note}; "));
        } else {
            details.push_str(&format!("{id}: margin {:.2e}; ", r.margin));
        }
    }
    report("7 Poincare: p=2 linear ratio = 2 within 1%, p=1 sqrt(pi) bound", all, &details);
}

#[test]
fn criterion_08_hypercontractivity() {
    let mut all = true;
    let mut worst = f64::INFINITY;
    for id in ["euclidean-line", "flat-torus", "circle", "shrinking-sphere"] {
        let r = run_on("hypercontractivity", id);
        all &= r.pass;
        worst = worst.min(r.margin + r.tolerance);
    }
    report(
        "8 hypercontractivity at threshold and strict tau ratios",
        all,
        &format!("worst slack {worst:.3e}"),
    );
}

#[test]
fn criterion_09_concentration_and_gaussian_tail() {
    let mut all = true;
    let mut worst = f64::INFINITY;
    for scn in scenarios() {
        let ball = run_on("nu-ball", &scn.id);
        let tail = run_on("gaussian-integral", &scn.id);
        all &= ball.pass && tail.pass;
        worst = worst.min(ball.margin.min(tail.margin));
    }
    report(
        "9 nu(B(z, sqrt(A H_n tau))) >= 1 - 1/A and Gaussian tail bound",
        all,
        &format!("worst margin {worst:.3e}"),
    );
}

#[test]
fn criterion_10_empirical_constant_stability() {
    // The non-explicit constants depend on the dimension, so stability is
    // asserted per scenario sweep; the line and circle sweeps carry the two
    // decades of parabolic scale.
    let mut all = true;
    let mut details = String::new();
    for check in
        ["hk-linfty", "lower-vol-scalar", "lower-vol-hcenter", "upper-vol", "covering"]
    {
        let mut worst_factor: f64 = 0.0;
        let mut max_decades: f64 = 0.0;
        let mut swept = 0usize;
        for scn in scenarios() {
            let refs = [scn];
            let summary = match empirical_constant(check, &refs, SEED, 10.0) {
                Ok(s) => s,
                Err(_) => continue, // hypothesis leaves no sweep here
            };
            swept += 1;
            worst_factor = worst_factor.max(summary.max / summary.min);
            let lo = summary.ratios.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
            let hi = summary.ratios.iter().map(|r| r.1).fold(0.0f64, f64::max);
            max_decades = max_decades.max(hi / lo);
        }
        let decades_ok = check == "covering" || max_decades >= 99.0;
        all &= swept >= 2 && worst_factor < 10.0 && decades_ok;
        details.push_str(&format!(
            "{check}: worst factor {worst_factor:.2} over {swept} scenario sweeps (scale span {max_decades:.0}x); "
        ));
    }
    report("10 normalized constants stable within factor 10 across scales", all, &details);
}

#[test]
fn criterion_11_pstar_neighborhood_algebra() {
    let mut all = true;
    let mut details = String::new();
    for id in ["euclidean-line", "circle", "warped-rotsym"] {
        let r = run_on("pstar-props", id);
        all &= r.pass;
        let v = r
            .notes
            .iter()
            .find(|n| n.contains("violations"))
            .cloned()
            .unwrap_or_default();
        details.push_str(&format!("{id}: {v}; "));
    }
    report("11 P* containments (a),(b),(bb),(c),(d) hold exactly", all, &details);
}

#[test]
fn criterion_12_flat_converse_and_scatter() {
    let flat = run_on("eps-reg-converse-flat", "flat-torus");
    let scatter = run_on("eps-reg-scatter", "warped-rotsym");
    let spearman_note = scatter
        .notes
        .iter()
        .find(|n| n.contains("spearman"))
        .cloned()
        .unwrap_or_default();
    report(
        "12 flat torus: N -> 0, r_Rm infinite; warped scatter Spearman >= 0.9",
        flat.pass && scatter.pass,
        &format!("converse margin {:.2e}; {spearman_note}", flat.margin),
    );
}
