//! Batch CLI for the flow laboratory. Verbs:
//!   run <config>            execute checks per configuration
//!   list-checks             print the registry table
//!   describe <check-id>     print one registry entry in full
//!   snapshot-dump <file>    summarize a persisted kernel snapshot
//!
//! Exit status: 0 all checks pass, 1 any check failed, 2 configuration or
//! runtime error.

mod config;
mod report;
mod runner;

use config::RunConfig;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = match args.first().map(String::as_str) {
        Some("run") => cmd_run(args.get(1).map(String::as_str)),
        Some("list-checks") => cmd_list_checks(),
        Some("describe") => cmd_describe(args.get(1).map(String::as_str)),
        Some("snapshot-dump") => cmd_snapshot_dump(args.get(1).map(String::as_str)),
        Some(other) => {
            eprintln!("unknown verb {other:?}");
            usage();
            2
        }
        None => {
            usage();
            2
        }
    };
    std::process::exit(code);
}

fn usage() {
    eprintln!("usage: rflab <run CONFIG | list-checks | describe CHECK-ID | snapshot-dump FILE>");
    eprintln!("env: RFLAB_OUTPUT_DIR overrides the configured output directory");
}

fn cmd_run(path: Option<&str>) -> i32 {
    let Some(path) = path else {
        eprintln!("run: missing config path");
        return 2;
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("run: cannot read {path}: {e}");
            return 2;
        }
    };
    let mut config = match RunConfig::parse(path, &text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("run: {e}");
            return 2;
        }
    };
    if let Ok(dir) = std::env::var("RFLAB_OUTPUT_DIR") {
        config.output_dir = dir;
    }
    match runner::run(&config) {
        Ok(outcome) => {
            for r in &outcome.report.results {
                println!(
                    "{:24} {:18} {} margin={:+.4e} tol={:.2e} ({} samples, {} ms)",
                    r.check_id,
                    r.scenario_id,
                    if r.pass { "PASS" } else { "FAIL" },
                    r.margin,
                    r.tolerance,
                    r.samples,
                    r.runtime_ms
                );
            }
            for e in &outcome.report.errors {
                eprintln!("error: {e}");
            }
            println!(
                "{} passed, {} failed, {} errors; report in {}/report.json",
                outcome.report.passed,
                outcome.report.failed,
                outcome.report.errors.len(),
                config.output_dir
            );
            if outcome.any_failed {
                1
            } else {
                0
            }
        }
        Err(e) => {
            eprintln!("run: {e}");
            2
        }
    }
}

fn cmd_list_checks() -> i32 {
    println!("{:24} {:6} {:10} statement", "id", "kind", "applies");
    for c in rflab_core::checks::registry() {
        let kind = match c.kind {
            rflab_core::checks::CheckKind::PassFail => "bound",
            rflab_core::checks::CheckKind::EmpiricalRatio => "ratio",
        };
        println!("{:24} {:6} {:10} {}", c.id, kind, c.applicability.to_string(), c.statement);
    }
    0
}

fn cmd_describe(id: Option<&str>) -> i32 {
    let Some(id) = id else {
        eprintln!("describe: missing check id");
        return 2;
    };
    match rflab_core::checks::find_check(id) {
        Ok(c) => {
            println!("id:            {}", c.id);
            println!("kind:          {:?}", c.kind);
            println!("applicability: {}", c.applicability);
            println!("statement:     {}", c.statement);
            println!("recipe:        {}", c.recipe);
            0
        }
        Err(e) => {
            eprintln!("describe: {e}");
            2
        }
    }
}

fn cmd_snapshot_dump(path: Option<&str>) -> i32 {
    let Some(path) = path else {
        eprintln!("snapshot-dump: missing snapshot path");
        return 2;
    };
    let text = match std::fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("snapshot-dump: cannot read {path}: {e}");
            return 2;
        }
    };
    let mut count = 0usize;
    let mut mass = 0.0f64;
    let mut min_w = f64::INFINITY;
    let mut max_w = f64::NEG_INFINITY;
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 && line.starts_with("node") {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            eprintln!("snapshot-dump: malformed line {}", ln + 1);
            return 2;
        }
        let w: f64 = match parts[1].parse() {
            Ok(v) => v,
            Err(e) => {
                eprintln!("snapshot-dump: line {}: {e}", ln + 1);
                return 2;
            }
        };
        count += 1;
        mass += w;
        min_w = min_w.min(w);
        max_w = max_w.max(w);
    }
    println!("nodes:      {count}");
    println!("total mass: {mass}");
    println!("weights:    [{min_w:.3e}, {max_w:.3e}]");
    let sidecar = path.replace(".csv", ".json");
    if let Ok(meta) = std::fs::read_to_string(&sidecar) {
        println!("sidecar:    {sidecar}");
        println!("{meta}");
    }
    0
}
