//! End-to-end CLI tests: config handling, exit codes, determinism and the
//! registry listing.

use std::path::PathBuf;
use std::process::Command;

fn rflab() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rflab"))
}

fn temp_dir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("rflab-test-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn list_checks_prints_the_registry() {
    let out = rflab().arg("list-checks").output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("covering"));
    assert!(text.contains("λ^{−n−2}"));
    let grad_line = text.lines().find(|l| l.starts_with("gradient-estimate")).unwrap();
    assert!(grad_line.contains("both"));
    // Row count matches the registry, no duplicates.
    let rows = text.lines().count() - 1;
    assert_eq!(rows, rflab_core::checks::registry().len());
}

#[test]
fn describe_reports_unknown_ids() {
    let out = rflab().args(["describe", "no-such-check"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let out = rflab().args(["describe", "poincare"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("√π") || text.contains("C(1)"));
}

#[test]
fn unknown_check_id_in_config_names_the_id_and_exits_nonzero() {
    let dir = temp_dir("badcfg");
    let cfg = dir.join("run.toml");
    std::fs::write(&cfg, "checks = [\"not-a-check\"]\n").unwrap();
    let out = rflab().args(["run", cfg.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("not-a-check"), "{err}");
}

#[test]
fn run_selected_checks_and_reports_deterministically() {
    let dir = temp_dir("run");
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 11
profile = "coarse"
checks = ["nash-basic", "poincare"]
scenarios = ["flat-torus"]
data_series = false
"#,
    )
    .unwrap();
    let out1 = dir.join("out1");
    let out2 = dir.join("out2");
    for (k, out_dir) in [(1, &out1), (2, &out2)] {
        let out = rflab()
            .args(["run", cfg.to_str().unwrap()])
            .env("RFLAB_OUTPUT_DIR", out_dir.to_str().unwrap())
            .output()
            .unwrap();
        assert_eq!(out.status.code(), Some(0), "run {k}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let strip_timing = |text: &str| -> String {
        let mut v: serde_json::Value = serde_json::from_str(text).unwrap();
        v["wall_ms"] = 0.into();
        for r in v["results"].as_array_mut().unwrap() {
            r["runtime_ms"] = 0.into();
        }
        serde_json::to_string_pretty(&v).unwrap()
    };
    let r1 = strip_timing(&std::fs::read_to_string(out1.join("report.json")).unwrap());
    let r2 = strip_timing(&std::fs::read_to_string(out2.join("report.json")).unwrap());
    assert_eq!(r1, r2, "reports differ between identical runs");
    // Two CheckResults, one per selected check.
    let report: serde_json::Value = serde_json::from_str(&r1).unwrap();
    assert_eq!(report["results"].as_array().unwrap().len(), 2);
    assert_eq!(report["failed"], 0);
    assert_eq!(report["seed"], 11);
}

#[test]
fn kernel_snapshots_round_trip_through_snapshot_dump() {
    let dir = temp_dir("snap");
    let cfg = dir.join("run.toml");
    std::fs::write(
        &cfg,
        r#"
seed = 5
profile = "coarse"
checks = ["duality-mass"]
scenarios = ["circle"]
kernel_snapshots = true
coupling_plan = true
data_series = false
"#,
    )
    .unwrap();
    let out_dir = dir.join("out");
    let out = rflab()
        .args(["run", cfg.to_str().unwrap()])
        .env("RFLAB_OUTPUT_DIR", out_dir.to_str().unwrap())
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let snap = out_dir.join("kernel_circle.csv");
    assert!(snap.exists());
    let plan = std::fs::read_to_string(out_dir.join("coupling_circle.csv")).unwrap();
    assert!(plan.starts_with("# w1 = "), "{plan}");
    assert!(plan.lines().count() > 3);
    let dump = rflab().args(["snapshot-dump", snap.to_str().unwrap()]).output().unwrap();
    assert!(dump.status.success());
    let text = String::from_utf8(dump.stdout).unwrap();
    assert!(text.contains("total mass"), "{text}");
}
