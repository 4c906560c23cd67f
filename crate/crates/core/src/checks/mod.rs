//! The theorem-check registry: every in-scope statement becomes a named
//! check with explicit inputs, a tolerance policy and a CheckResult.
//!
//! Checks whose statements carry non-explicit constants never pass or fail
//! against the unknown bound; they verify structure (finiteness and
//! stability of a normalized ratio across a scale sweep) and report the
//! empirical constant through [`empirical_constant`].

mod entropy_checks;
mod functional_checks;
mod kernel_checks;
mod neighborhood_checks;
mod transport_checks;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flows::FlowClass;
use crate::scenario::Scenario;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Applicability {
    Ricci,
    Both,
}

impl Applicability {
    pub fn admits(&self, class: FlowClass) -> bool {
        match self {
            Applicability::Both => true,
            Applicability::Ricci => class == FlowClass::Ricci,
        }
    }
}

impl std::fmt::Display for Applicability {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Applicability::Ricci => f.write_str("ricci"),
            Applicability::Both => f.write_str("both"),
        }
    }
}

/// How a check reaches its verdict.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    /// Inequality with explicit constants: margin against tolerance.
    PassFail,
    /// Non-explicit constant: stability of a normalized ratio sweep.
    EmpiricalRatio,
}

/// Registry entry for one named check.
#[derive(Debug, Clone, Serialize)]
pub struct CheckSpec {
    pub id: &'static str,
    /// The inequality or property the check measures, in plain math.
    pub statement: &'static str,
    pub applicability: Applicability,
    pub kind: CheckKind,
    /// Input recipe: basepoints, scales and test data the sweep uses.
    pub recipe: &'static str,
}

/// Tolerance policy: absolute floor for identities enforced by
/// construction, a declared constant for PDE-limited statements scaled by
/// (h^2 + dt), and a relative slack for transport-limited statements.
#[derive(Debug, Clone, Serialize)]
pub struct TolerancePolicy {
    pub absolute: f64,
    pub pde_constant: f64,
    pub transport_rel: f64,
    /// Declared stability factor for empirical-ratio sweeps.
    pub ratio_factor: f64,
}

impl Default for TolerancePolicy {
    fn default() -> Self {
        TolerancePolicy {
            absolute: 1e-8,
            pde_constant: 20.0,
            transport_rel: 0.05,
            ratio_factor: 10.0,
        }
    }
}

/// One check outcome: worst margin over the sweep, the tolerance in force,
/// pass/fail and reproducibility metadata.
#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub check_id: String,
    pub scenario_id: String,
    pub margin: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub samples: usize,
    pub seed: u64,
    pub runtime_ms: u64,
    pub notes: Vec<String>,
}

/// Margin accumulator: tracks the worst signed slack over a sweep.
#[derive(Debug)]
pub(crate) struct Margins {
    pub min_slack: f64,
    pub samples: usize,
    pub notes: Vec<String>,
}

impl Margins {
    pub fn new() -> Self {
        Margins { min_slack: f64::INFINITY, samples: 0, notes: Vec::new() }
    }

    pub fn add(&mut self, slack: f64) {
        self.min_slack = self.min_slack.min(slack);
        self.samples += 1;
    }

    pub fn note(&mut self, text: impl Into<String>) {
        self.notes.push(text.into());
    }

    pub fn finish(
        self,
        check_id: &str,
        scenario_id: &str,
        tolerance: f64,
        seed: u64,
        started: std::time::Instant,
    ) -> CheckResult {
        let margin = if self.min_slack.is_finite() { self.min_slack } else { 0.0 };
        CheckResult {
            check_id: check_id.to_string(),
            scenario_id: scenario_id.to_string(),
            margin,
            tolerance,
            pass: margin >= -tolerance,
            samples: self.samples,
            seed,
            runtime_ms: started.elapsed().as_millis() as u64,
            notes: self.notes,
        }
    }
}

/// Context handed to each check implementation.
pub(crate) struct CheckCtx<'a> {
    pub scn: &'a Scenario,
    pub pol: &'a TolerancePolicy,
    pub seed: u64,
}

impl CheckCtx<'_> {
    /// Representative mesh width of the scenario.
    pub fn mesh(&self) -> f64 {
        self.scn.flow.slices.iter().map(|s| s.mesh_width()).fold(0.0f64, f64::max)
    }

    /// Discretization tolerance C (h^2 + dt) at the policy's constant.
    pub fn pde_tol(&self, scale: f64) -> f64 {
        let h = self.mesh();
        let dt = crate::heat::Stepper::new(&self.scn.flow).dt_cap();
        self.pol.pde_constant * (h * h + dt) * scale.max(1.0)
    }

    /// Latest flow time, the default basepoint time.
    pub fn t0(&self) -> f64 {
        self.scn.flow.interval().1
    }

    /// Kernel-reliability floor at the default basepoint time.
    pub fn tau_floor(&self) -> f64 {
        crate::heat::tau_floor(&self.scn.flow, self.t0())
    }

    /// Geometric tau ladder spanning the usable backward range. Starts at
    /// the bootstrap floor even when the interval is short.
    pub fn tau_ladder(&self) -> Vec<f64> {
        let (lo, hi) = self.scn.flow.interval();
        let span = hi - lo;
        let floor = self.tau_floor();
        let tau_min = (1.5 * floor).min(0.45 * span).max(1.02 * floor);
        let tau_max = (0.9 * span).max(tau_min * 1.05);
        crate::entropy::tau_ladder(tau_min, tau_max)
    }
}

/// The full registry.
pub fn registry() -> Vec<CheckSpec> {
    use Applicability::*;
    use CheckKind::*;
    vec![
        CheckSpec { recipe: "seeded field pair over the full interval; 3 kernel basepoints on a 4-rung tau ladder", id: "duality-mass", statement: "⟨u,v⟩_{g_t} constant along forward/conjugate pairs; ∫ v dg_t and kernel mass conserved", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "3 seeded conjugate pairs (symmetry-reduced) across all slice times; kernel pairs on chain kinds", id: "w1-monotone", statement: "t ↦ d_{W1}^{g_t}(μ₁,t, μ₂,t) is non-decreasing for conjugately evolving measures", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "6 spread nodes, pairs with d in (0.1, 0.9) diam, midpoint time, centered time differences", id: "he-dist", statement: "(∂_t − Δ_x − Δ_y) d_t²(x,y) ≥ −(n−1)π²/2 − 4", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "5 kernel basepoint pairs tracked across all usable slice times", id: "var-monotone", statement: "t ↦ Var_t(μ₁,t, μ₂,t) + H_n t is non-decreasing", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "4 kernel basepoints, pair and self variance over the tau ladder", id: "var-same-time", statement: "Var_t(ν_{x₁,t₀;t}, ν_{x₂,t₀;t}) ≤ d_{t₀}²(x₁,x₂) + H_n(t₀−t) and Var(ν_{x,t₀;t}) ≤ H_n(t₀−t)", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "3 kernel basepoints on 4 tau rungs; all qualifying centers pairwise compared", id: "hn-center-exists", statement: "some z attains Var(δ_z, ν_{x₀,t₀;t}) ≤ H_n(t₀−t); any two centers satisfy d_t(z₁,z₂) ≤ 2√(H_n(t₀−t))", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "3 kernel basepoints, 4 tau rungs, A in {2, 4, 9}", id: "nu-ball", statement: "ν_{x₀,t₀;t}(B(z, t, √(A H_n (t₀−t)))) ≥ 1 − 1/A", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "3 kernel basepoints, 4 tau rungs, r in {1, 2, 3, 4.5, 6} sqrt(tau)", id: "gaussian-integral", statement: "ν_{x₀,t₀;t}(M∖B(z,t,r)) ≤ 2 exp(−(r−√(2H_n(t₀−t)))₊² / (8(t₀−t)))", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "4 seeded (0,1) data at T = 0, one Phi_T-shaped datum at T > 0, the half-circle step on circles; 3 sample times", id: "gradient-estimate", statement: "|∇(Φ⁻¹_{T+t−t₀}(u(·,t)))| ≤ 1 for (0,1)-valued heat solutions; equality for the 1d step datum", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "center basepoint, 3 tau rungs, dipoles along every grid axis", id: "nabla-k-integral", statement: "(t−s) ∫ (∂_v K / K)² dν ≤ 1/2 per unit direction; summed over a frame ≤ n/2", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "2 entropy basepoints on the geometric tau ladder; doubling on strided ladder pairs", id: "nash-basic", statement: "N ≤ 0, dN/dτ ∈ [−n/(2τ) + R_min, 0], d²/dτ²(τN) ≤ 0, and N(τ₁) − (n/2)log((τ₂/τ₁)(1 − (2/n)R_min(τ₂−τ₁))) ≤ N(τ₂) ≤ N(τ₁)", applicability: Ricci, kind: PassFail },
        CheckSpec { recipe: "entropy field at a 0.35-span horizon; basepoint pairs via exact kernel transport on chain kinds", id: "nash-dependence", statement: "|∇N*_s| ≤ (n/(2(t−s)) − R_min)^{1/2}; basepoint comparison via W1 at a common reference time", applicability: Ricci, kind: PassFail },
        CheckSpec { recipe: "2 entropy basepoints over the full tau ladder", id: "nash-moments", statement: "∫ τ(|∇f|² + R) dν ≤ n/2 and ∫ (f − N − n/2)² dν ≤ n − 2 R_min τ", applicability: Ricci, kind: PassFail },
        CheckSpec { recipe: "center basepoint; r = sqrt(tau) sweep capped at 0.45 diam where R <= r^-2 on the ball", id: "lower-vol-scalar", statement: "|B(x,t,r)|_t ≥ c exp(N_{x,t}(r²)) rⁿ when R ≤ r⁻² on B(x,t,r)", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "center basepoint; H_n-center balls of radius sqrt(2 H_n) r over the tau sweep", id: "lower-vol-hcenter", statement: "|B(z,t−r²,√(2H_n) r)| ≥ c exp(−2(n−2R_min r²)^{1/2}) exp(N_{x,t}(r²)) rⁿ at an H_n-center z", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "center basepoint; sup density over a two-decade tau sweep", id: "hk-linfty", statement: "K(x,t;y,s) ≤ C₀ (n − R_min(t−s))^{n/2} (t−s)^{−n/2} exp(−N_{x,t}(t−s))", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "center basepoint; Gaussian-weighted sup over resolved mass, epsilon = 1", id: "hk-gaussian", statement: "K(x,t;y,s) ≤ C(ε) (t−s)^{−n/2} exp(−N_{x,t}(t−s)) exp(−d_s²(z,y)/((8+ε)(t−s)))", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "center basepoint; dipole gradient sup over resolved mass, tau capped at (diam/2)^2", id: "hk-gradient", statement: "|∇_x K|/K ≤ C (t−s)^{−1/2} √(log(C₀ exp(−N_{x,t}(t−s)) / ((t−s)^{n/2} K)))", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "center basepoint; A in {1, 2} ball volumes over the tau sweep", id: "upper-vol", statement: "|B(x,t,Ar)|_t ≤ C(R_min r²) exp(N_{x,t}(r²)) exp(C₀A²) rⁿ", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "3 centers; A = 0.22 diam, T = 0.2 span windows; members picked at 0.7-0.8 of the threshold", id: "pstar-props", statement: "P*(x,t;A,0,0) = B(x,t,A)×{t}; monotone in parameters; P*(x₂,t₂;r) ⊂ P*(x₁,t₁;2r) for members; chain and overlap containments", applicability: Both, kind: PassFail },
        CheckSpec { recipe: "center basepoint; r^2 sweep by factors of 3; conventional neighborhood against the W1 threshold", id: "pstar-ric-compare", statement: "d_{W1}(ν_{x₀,t₀;t₀−r²}, δ_{x₀}) ≤ C(α,K) r under |Ric| ≤ K r⁻²; P ⊂ P* and P* ⊂ P with comparable parameters", applicability: Both, kind: EmpiricalRatio },
        CheckSpec { recipe: "center basepoint; T- in {0.15, 0.3, 0.45} span windows, every sampled slice", id: "timeslice-vol", statement: "|S_t| ≤ C(A,T⁻,T⁺,α) exp(N_{x₀,t₀}(T⁻r²)) rⁿ for P*-time slices S_t", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "members of one P* neighborhood (cap 420), lambda in {1/2, 1/4, 1/8} where the floor allows", id: "covering", statement: "N ≤ C(A,T−,T+,λ0) λ^{−n−2} packing/covering count for P*-balls at scale λr", applicability: Ricci, kind: EmpiricalRatio },
        CheckSpec { recipe: "40 spread nodes at the final time, r^2 = half the interval", id: "eps-reg-scatter", statement: "scatter of (N_{x,t}(r²), r_Rm/r): monotone association where both vary (Spearman ≥ 0.9)", applicability: Ricci, kind: PassFail },
        CheckSpec { recipe: "center basepoint; descending r ladder, |N| sampled at r = L/8 on tori", id: "eps-reg-converse-flat", statement: "flat flows: N_{x,t}(r²) → 0 monotonically as r → 0 while r_Rm = ∞", applicability: Ricci, kind: PassFail },
        CheckSpec { recipe: "center-basepoint kernel at mid-ladder tau; linear datum on lines plus 20 seeded mean-zero fields at p in {1, 2}", id: "poincare", statement: "∫ h dν = 0 ⇒ ∫|h|^p dν ≤ C(p) τ^{p/2} ∫ |∇h|^p dν with C(1)=√π, C(2)=2 (equality for linear h on the line)", applicability: Ricci, kind: PassFail },
        CheckSpec { recipe: "(q, p) in {(2,4), (2,2), (1.5,3)} at the threshold ratio and 1.5x it; 10 seeded positive data", id: "hypercontractivity", statement: "τ₂/τ₁ ≥ (p−1)/(q−1) ⇒ (∫|u|^p dν_{t₀−τ₁})^{1/p} ≤ (∫|u|^q dν_{t₀−τ₂})^{1/q}", applicability: Ricci, kind: PassFail },
    ]
}

pub fn find_check(id: &str) -> Result<CheckSpec> {
    registry().into_iter().find(|c| c.id == id).ok_or_else(|| Error::UnknownCheck(id.to_string()))
}

/// Run one registry check against a scenario.
pub fn run_check(
    id: &str,
    scn: &Scenario,
    pol: &TolerancePolicy,
    seed: u64,
) -> Result<CheckResult> {
    let spec = find_check(id)?;
    if !spec.applicability.admits(scn.flow.class) {
        return Err(Error::InapplicableCheck {
            id: id.to_string(),
            class: scn.flow.class.to_string(),
        });
    }
    let ctx = CheckCtx { scn, pol, seed };
    let started = std::time::Instant::now();
    match id {
        "duality-mass" => kernel_checks::duality_mass(&ctx, started),
        "w1-monotone" => transport_checks::w1_monotone(&ctx, started),
        "he-dist" => transport_checks::he_dist(&ctx, started),
        "var-monotone" => transport_checks::var_monotone(&ctx, started),
        "var-same-time" => transport_checks::var_same_time(&ctx, started),
        "hn-center-exists" => transport_checks::hn_center_exists(&ctx, started),
        "nu-ball" => transport_checks::nu_ball(&ctx, started),
        "gaussian-integral" => transport_checks::gaussian_integral(&ctx, started),
        "gradient-estimate" => functional_checks::gradient_estimate(&ctx, started),
        "nabla-k-integral" => kernel_checks::nabla_k_integral(&ctx, started),
        "nash-basic" => entropy_checks::nash_basic(&ctx, started),
        "nash-dependence" => entropy_checks::nash_dependence(&ctx, started),
        "nash-moments" => entropy_checks::nash_moments(&ctx, started),
        "lower-vol-scalar" | "lower-vol-hcenter" | "hk-linfty" | "hk-gaussian"
        | "hk-gradient" | "upper-vol" => kernel_checks::ratio_stability(&ctx, started, id),
        "pstar-props" => neighborhood_checks::pstar_props(&ctx, started),
        "pstar-ric-compare" => neighborhood_checks::pstar_ric_compare(&ctx, started),
        "timeslice-vol" => neighborhood_checks::timeslice_vol(&ctx, started),
        "covering" => neighborhood_checks::covering(&ctx, started),
        "eps-reg-scatter" => entropy_checks::eps_reg_scatter(&ctx, started),
        "eps-reg-converse-flat" => entropy_checks::eps_reg_converse_flat(&ctx, started),
        "poincare" => functional_checks::poincare(&ctx, started),
        "hypercontractivity" => functional_checks::hypercontractivity(&ctx, started),
        _ => Err(Error::UnknownCheck(id.to_string())),
    }
}

/// Normalized ratio series of one empirical check on one scenario.
pub fn ratio_series(id: &str, scn: &Scenario, seed: u64) -> Result<Vec<(f64, f64)>> {
    let pol = TolerancePolicy::default();
    let ctx = CheckCtx { scn, pol: &pol, seed };
    match id {
        "lower-vol-scalar" => kernel_checks::series_lower_vol_scalar(&ctx),
        "lower-vol-hcenter" => kernel_checks::series_lower_vol_hcenter(&ctx),
        "hk-linfty" => kernel_checks::series_hk_linfty(&ctx),
        "hk-gaussian" => kernel_checks::series_hk_gaussian(&ctx),
        "hk-gradient" => kernel_checks::series_hk_gradient(&ctx),
        "upper-vol" => kernel_checks::series_upper_vol(&ctx),
        "timeslice-vol" => neighborhood_checks::series_timeslice_vol(&ctx),
        "covering" => neighborhood_checks::series_covering(&ctx),
        "pstar-ric-compare" => neighborhood_checks::series_pstar_ric(&ctx),
        _ => Err(Error::InvalidArgument(format!("check {id} emits no ratio series"))),
    }
}

/// Summary of normalized ratios across scenarios.
#[derive(Debug, Clone, Serialize)]
pub struct EmpiricalSummary {
    pub check_id: String,
    /// (scenario id, scale, ratio) samples.
    pub ratios: Vec<(String, f64, f64)>,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// Declared stability factor and whether max/min stays below it.
    pub factor: f64,
    pub bounded: bool,
}

/// Collect the normalized-ratio summary of an empirical check across
/// scenarios. Errors when fewer than 3 sweep points are available.
pub fn empirical_constant(
    id: &str,
    scenarios: &[&Scenario],
    seed: u64,
    factor: f64,
) -> Result<EmpiricalSummary> {
    let mut ratios: Vec<(String, f64, f64)> = Vec::new();
    for scn in scenarios {
        match ratio_series(id, scn, seed) {
            Ok(series) => {
                for (scale, ratio) in series {
                    ratios.push((scn.id.clone(), scale, ratio));
                }
            }
            Err(Error::InapplicableCheck { .. }) => continue,
            Err(e) => return Err(e),
        }
    }
    if ratios.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "empirical sweep for {id} has {} points, need at least 3",
            ratios.len()
        )));
    }
    let mut vals: Vec<f64> = ratios.iter().map(|r| r.2).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min = vals[0];
    let max = vals[vals.len() - 1];
    let median = vals[vals.len() / 2];
    let bounded = min > 0.0 && max.is_finite() && max / min < factor;
    Ok(EmpiricalSummary { check_id: id.to_string(), ratios, min, max, median, factor, bounded })
}

/// Spearman rank correlation of paired samples.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    if n < 2 {
        return 1.0;
    }
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut order: Vec<usize> = (0..v.len()).collect();
        order.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < v.len() {
            let mut j = i;
            while j + 1 < v.len() && v[order[j + 1]] == v[order[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0;
            for k in i..=j {
                r[order[k]] = avg;
            }
            i = j + 1;
        }
        r
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..n {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx) * (rx[i] - mx);
        vy += (ry[i] - my) * (ry[i] - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return 1.0;
    }
    cov / (vx * vy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_has_unique_ids_and_the_mandated_entries() {
        let reg = registry();
        let mut ids: Vec<&str> = reg.iter().map(|c| c.id).collect();
        let count = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), count, "duplicate check ids");
        for required in [
            "w1-monotone", "he-dist", "var-monotone", "var-same-time", "hn-center-exists",
            "nu-ball", "gaussian-integral", "gradient-estimate", "nabla-k-integral",
            "nash-basic", "nash-dependence", "nash-moments", "lower-vol-scalar",
            "lower-vol-hcenter", "hk-linfty", "hk-gaussian", "hk-gradient", "upper-vol",
            "pstar-props", "pstar-ric-compare", "timeslice-vol", "covering",
            "eps-reg-scatter", "eps-reg-converse-flat", "poincare", "hypercontractivity",
        ] {
            assert!(ids.binary_search(&required).is_ok(), "missing check {required}");
        }
        let covering = reg.iter().find(|c| c.id == "covering").unwrap();
        assert!(covering.statement.contains("λ^{−n−2}"));
        let grad = reg.iter().find(|c| c.id == "gradient-estimate").unwrap();
        assert_eq!(grad.applicability, Applicability::Both);
    }

    #[test]
    fn spearman_detects_monotone_association() {
        let xs: Vec<f64> = (0..20).map(|i| i as f64).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x * x).collect();
        assert!((spearman(&xs, &ys) - 1.0).abs() < 1e-12);
        let yrev: Vec<f64> = xs.iter().map(|x| -x).collect();
        assert!((spearman(&xs, &yrev) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_check_id_is_reported() {
        assert!(matches!(find_check("no-such-check"), Err(Error::UnknownCheck(_))));
    }
}
