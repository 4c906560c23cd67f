//! Run report assembly and serialization. The report body is deterministic
//! for a fixed config and seed; wall-clock fields are the only varying part.

use serde::Serialize;

use rflab_core::checks::{CheckResult, EmpiricalSummary};

#[derive(Debug, Serialize)]
pub struct ScenarioMeta {
    pub id: String,
    pub model: String,
    pub class: String,
    pub dim: usize,
    pub nodes: usize,
    pub time_start: f64,
    pub time_end: f64,
    pub mesh_width: f64,
    pub flow_residual: f64,
}

#[derive(Debug, Serialize)]
pub struct RunReport {
    pub version: String,
    pub seed: u64,
    pub profile: String,
    pub scenarios: Vec<ScenarioMeta>,
    /// Worst deviation of the transport method cross-validation.
    pub transport_validation: f64,
    pub results: Vec<CheckResult>,
    pub empirical: Vec<EmpiricalSummary>,
    pub passed: usize,
    pub failed: usize,
    pub errors: Vec<String>,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialization")
    }
}

/// Extract structured data rows a check left in its notes
/// (comma-separated records behind a known prefix).
pub fn note_rows<'a>(result: &'a CheckResult, prefix: &str) -> Vec<&'a str> {
    result
        .notes
        .iter()
        .filter(|n| n.starts_with(prefix))
        .map(|n| n.as_str())
        .collect()
}
