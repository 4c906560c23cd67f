//! Run orchestration: scenario construction, check scheduling and artifact
//! emission. Checks run in parallel over shared immutable scenarios; the
//! report writer is the single serialization point.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use rflab_core::checks::{
    empirical_constant, registry, run_check, CheckKind, CheckResult, TolerancePolicy,
};
use rflab_core::entropy::{entropy_curve, entropy_curve_csv, tau_ladder};
use rflab_core::error::Error as CoreError;
use rflab_core::flows::make_model_flow;
use rflab_core::heat::tau_floor;
use rflab_core::scenario::{standard_scenarios, Scenario, ScenarioProfile};

use crate::config::RunConfig;
use crate::report::{note_rows, RunReport, ScenarioMeta};

pub struct RunOutcome {
    pub report: RunReport,
    pub any_failed: bool,
}

fn policy_from(config: &RunConfig) -> TolerancePolicy {
    let mut pol = TolerancePolicy::default();
    if let Some(v) = config.tolerance.absolute {
        pol.absolute = v;
    }
    if let Some(v) = config.tolerance.pde_constant {
        pol.pde_constant = v;
    }
    if let Some(v) = config.tolerance.transport_rel {
        pol.transport_rel = v;
    }
    if let Some(v) = config.tolerance.ratio_factor {
        pol.ratio_factor = v;
    }
    pol
}

fn build_scenarios(config: &RunConfig) -> Result<Vec<Scenario>, String> {
    let profile = if config.profile == "coarse" {
        ScenarioProfile::Coarse
    } else {
        ScenarioProfile::Default
    };
    let mut all = standard_scenarios(profile).map_err(|e| e.to_string())?;
    if !config.scenarios.is_empty() {
        for want in &config.scenarios {
            if !all.iter().any(|s| s.id == *want) {
                return Err(format!("unknown scenario id {want:?}"));
            }
        }
        all.retain(|s| config.scenarios.contains(&s.id));
    }
    for custom in &config.custom_scenario {
        let flow = make_model_flow(&custom.model, &custom.times.expand())
            .map_err(|e| format!("scenario {:?}: {e}", custom.id))?;
        all.push(Scenario::new(custom.id.clone(), flow));
    }
    if all.is_empty() {
        return Err("no scenarios selected".to_string());
    }
    Ok(all)
}

fn selected_checks(config: &RunConfig) -> Vec<&'static str> {
    let reg = registry();
    if config.checks.iter().any(|c| c == "all-applicable") {
        reg.iter().map(|c| c.id).collect()
    } else {
        reg.iter().filter(|c| config.checks.iter().any(|w| w == c.id)).map(|c| c.id).collect()
    }
}

pub fn run(config: &RunConfig) -> Result<RunOutcome, String> {
    let started = std::time::Instant::now();
    let scenarios = build_scenarios(config)?;
    let checks = selected_checks(config);
    let pol = policy_from(config);

    // Method cross-validation gates every run that touches transport.
    let transport_validation =
        rflab_core::transport::cross_validate_methods(config.seed).map_err(|e| e.to_string())?;

    if config.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(config.workers)
            .build_global()
            .ok();
    }

    // All (check, scenario) pairs with matching flow class.
    let reg = registry();
    let mut jobs: Vec<(&'static str, usize)> = Vec::new();
    for check in &checks {
        let spec = reg.iter().find(|c| c.id == *check).unwrap();
        for (k, scn) in scenarios.iter().enumerate() {
            if spec.applicability.admits(scn.flow.class) {
                jobs.push((check, k));
            }
        }
    }

    let outcomes: Vec<Result<CheckResult, String>> = jobs
        .par_iter()
        .map(|&(check, k)| {
            run_check(check, &scenarios[k], &pol, config.seed)
                .map_err(|e| format!("{check} on {}: {e}", scenarios[k].id))
        })
        .collect();

    let mut results = Vec::new();
    let mut errors = Vec::new();
    for outcome in outcomes {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => errors.push(e),
        }
    }
    results.sort_by(|a, b| (a.check_id.clone(), a.scenario_id.clone())
        .cmp(&(b.check_id.clone(), b.scenario_id.clone())));

    // Empirical-constant summaries for the ratio checks that ran.
    let scenario_refs: Vec<&Scenario> = scenarios.iter().collect();
    let mut empirical = Vec::new();
    for check in &checks {
        let spec = reg.iter().find(|c| c.id == *check).unwrap();
        if spec.kind == CheckKind::EmpiricalRatio {
            match empirical_constant(check, &scenario_refs, config.seed, pol.ratio_factor) {
                Ok(summary) => empirical.push(summary),
                Err(CoreError::InvalidArgument(msg)) => {
                    errors.push(format!("empirical {check}: {msg}"))
                }
                Err(e) => errors.push(format!("empirical {check}: {e}")),
            }
        }
    }

    let passed = results.iter().filter(|r| r.pass).count();
    let failed = results.len() - passed;

    let report = RunReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        seed: config.seed,
        profile: config.profile.clone(),
        scenarios: scenarios
            .iter()
            .map(|s| ScenarioMeta {
                id: s.id.clone(),
                model: s.flow.model.to_string(),
                class: s.flow.class.to_string(),
                dim: s.flow.dim(),
                nodes: s.flow.disc.node_count(),
                time_start: s.flow.interval().0,
                time_end: s.flow.interval().1,
                mesh_width: s.flow.slices.iter().map(|x| x.mesh_width()).fold(0.0, f64::max),
                flow_residual: s.flow.flow_residual(),
            })
            .collect(),
        transport_validation,
        results,
        empirical,
        passed,
        failed,
        errors,
        wall_ms: started.elapsed().as_millis() as u64,
    };

    write_artifacts(config, &scenarios, &report)?;
    let any_failed = report.failed > 0 || !report.errors.is_empty();
    Ok(RunOutcome { report, any_failed })
}

fn write_artifacts(
    config: &RunConfig,
    scenarios: &[Scenario],
    report: &RunReport,
) -> Result<(), String> {
    let out = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| format!("output dir: {e}"))?;
    std::fs::write(out.join("report.json"), report.to_json())
        .map_err(|e| format!("report write: {e}"))?;

    if config.data_series {
        for scn in scenarios {
            // Entropy curve of the first entropy basepoint.
            let (lo, hi) = scn.flow.interval();
            let floor = tau_floor(&scn.flow, hi);
            let tau_min = (1.5 * floor).min(0.45 * (hi - lo)).max(1.02 * floor);
            let taus = tau_ladder(tau_min, 0.9 * (hi - lo));
            let bp = scn.entropy_basepoints(1, config.seed)[0];
            if let Ok(curve) = entropy_curve(&scn.flow, bp, hi, &taus) {
                let path = out.join(format!("entropy_{}.csv", scn.id));
                std::fs::write(path, entropy_curve_csv(&curve))
                    .map_err(|e| format!("entropy csv: {e}"))?;
            }
        }
        // Scatter and ratio series extracted from check notes.
        for r in &report.results {
            let scatter = note_rows(r, "scatter,");
            if !scatter.is_empty() {
                let mut text = String::from("nash,r_rm_over_r\n");
                for row in scatter {
                    text.push_str(row.trim_start_matches("scatter,"));
                    text.push('\n');
                }
                let path = out.join(format!("scatter_{}_{}.csv", r.check_id, r.scenario_id));
                std::fs::write(path, text).map_err(|e| format!("scatter csv: {e}"))?;
            }
            let ratios = note_rows(r, "ratio,");
            if !ratios.is_empty() {
                let mut text = String::from("scale,ratio\n");
                for row in ratios {
                    text.push_str(row.trim_start_matches("ratio,"));
                    text.push('\n');
                }
                let path = out.join(format!("series_{}_{}.csv", r.check_id, r.scenario_id));
                std::fs::write(path, text).map_err(|e| format!("series csv: {e}"))?;
            }
        }
    }

    if config.kernel_snapshots {
        for scn in scenarios {
            write_kernel_snapshot(&out, scn, config.seed)?;
        }
    }
    if config.coupling_plan {
        for scn in scenarios {
            write_coupling_plan(&out, scn, config.seed)?;
        }
    }
    Ok(())
}

/// Audit dump: the exact min-cost coupling between two seeded measures.
fn write_coupling_plan(out: &Path, scn: &Scenario, seed: u64) -> Result<(), String> {
    let t = scn.flow.interval().1;
    let slice = scn.flow.slice_at(t);
    let fields = scn.seeded_fields(2, seed ^ 0x9a7);
    let normalize = |f: &[f64]| -> Vec<f64> {
        let raw: Vec<f64> =
            f.iter().zip(&slice.weights).map(|(v, w)| (0.9 * v).exp() * w).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|x| x / total).collect()
    };
    let m1 = normalize(&fields[0]);
    let m2 = normalize(&fields[1]);
    let dist = scn.distance(t);
    let (result, plan) =
        rflab_core::transport::network_flow_w1(&dist, &m1, &m2).map_err(|e| e.to_string())?;
    let mut csv = format!("# w1 = {}
from,to,mass
", result.value);
    for (i, j, f) in plan {
        csv.push_str(&format!("{i},{j},{f}
"));
    }
    std::fs::write(out.join(format!("coupling_{}.csv", scn.id)), csv)
        .map_err(|e| format!("coupling csv: {e}"))
}

fn write_kernel_snapshot(out: &Path, scn: &Scenario, seed: u64) -> Result<(), String> {
    let (lo, hi) = scn.flow.interval();
    let floor = tau_floor(&scn.flow, hi);
    let tau = (0.5 * (hi - lo)).max(1.5 * floor);
    let s = hi - tau;
    if s < lo {
        return Ok(());
    }
    let bp = scn.kernel_basepoints(1, seed)[0];
    let kernel = scn.kernel(bp, hi, s).map_err(|e| e.to_string())?;
    let mut csv = String::from("node,weight,potential\n");
    for i in 0..kernel.nu.len() {
        csv.push_str(&format!("{},{},{}\n", i, kernel.nu[i], kernel.f[i]));
    }
    std::fs::write(out.join(format!("kernel_{}.csv", scn.id)), csv)
        .map_err(|e| format!("kernel csv: {e}"))?;
    let sidecar = serde_json::json!({
        "scenario": scn.id,
        "basepoint": kernel.basepoint,
        "t0": kernel.t0,
        "s": kernel.s,
        "tau": kernel.tau,
        "dim": kernel.dim,
        "bootstrap_tau": kernel.diagnostics.bootstrap_tau,
        "bootstrap_error": kernel.diagnostics.bootstrap_error,
        "mass": kernel.diagnostics.mass,
        "negative_mass": kernel.diagnostics.negative_mass,
        "excluded_mass": kernel.diagnostics.excluded_mass,
    });
    std::fs::write(
        out.join(format!("kernel_{}.json", scn.id)),
        serde_json::to_string_pretty(&sidecar).unwrap(),
    )
    .map_err(|e| format!("kernel sidecar: {e}"))?;
    Ok(())
}
