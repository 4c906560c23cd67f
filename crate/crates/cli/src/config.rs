//! Run configuration: TOML by default, JSON accepted, schema-validated
//! before any computation starts.

use serde::{Deserialize, Serialize};

use rflab_core::flows::ModelSpec;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seed recorded verbatim in every output.
    #[serde(default = "default_seed")]
    pub seed: u64,
    /// Check ids, or the single entry "all-applicable".
    #[serde(default = "default_checks")]
    pub checks: Vec<String>,
    /// Ids from the bundled scenario set; empty means the whole set.
    #[serde(default)]
    pub scenarios: Vec<String>,
    /// Resolution profile of the bundled set: "default" or "coarse".
    #[serde(default = "default_profile")]
    pub profile: String,
    /// Extra scenarios built from explicit model descriptors.
    #[serde(default)]
    pub custom_scenario: Vec<CustomScenario>,
    #[serde(default = "default_output")]
    pub output_dir: String,
    /// Worker cap for check-level parallelism; 0 uses all cores.
    #[serde(default)]
    pub workers: usize,
    /// Persist one kernel snapshot per scenario (CSV + JSON sidecar).
    #[serde(default)]
    pub kernel_snapshots: bool,
    /// Dump one optimal coupling plan per scenario as CSV for audit.
    #[serde(default)]
    pub coupling_plan: bool,
    /// Emit entropy-curve and check data series as CSV.
    #[serde(default = "default_true")]
    pub data_series: bool,
    #[serde(default)]
    pub tolerance: ToleranceOverrides,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToleranceOverrides {
    pub absolute: Option<f64>,
    pub pde_constant: Option<f64>,
    pub transport_rel: Option<f64>,
    pub ratio_factor: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CustomScenario {
    pub id: String,
    pub model: ModelSpec,
    pub times: TimeGrid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn expand(&self) -> Vec<f64> {
        (0..=self.steps)
            .map(|i| self.start + (self.end - self.start) * i as f64 / self.steps as f64)
            .collect()
    }
}

fn default_seed() -> u64 {
    7
}

fn default_checks() -> Vec<String> {
    vec!["all-applicable".to_string()]
}

fn default_profile() -> String {
    "default".to_string()
}

fn default_output() -> String {
    "rflab-out".to_string()
}

fn default_true() -> bool {
    true
}

impl RunConfig {
    pub fn parse(path: &str, text: &str) -> Result<RunConfig, String> {
        let config: RunConfig = if path.ends_with(".json") {
            serde_json::from_str(text).map_err(|e| format!("config parse error: {e}"))?
        } else {
            toml::from_str(text).map_err(|e| format!("config parse error: {e}"))?
        };
        config.validate()?;
        Ok(config)
    }

    fn validate(&self) -> Result<(), String> {
        if self.profile != "default" && self.profile != "coarse" {
            return Err(format!("unknown profile {:?}", self.profile));
        }
        let registry = rflab_core::checks::registry();
        for id in &self.checks {
            if id != "all-applicable" && !registry.iter().any(|c| c.id == *id) {
                return Err(format!("unknown check id {id:?}"));
            }
        }
        if self.checks.is_empty() {
            return Err("check selection is empty".to_string());
        }
        for c in &self.custom_scenario {
            if c.times.steps < 2 || c.times.end <= c.times.start {
                return Err(format!("scenario {:?} has a degenerate time grid", c.id));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_both_parse() {
        let toml_text = r#"
seed = 9
checks = ["nash-basic", "poincare"]
scenarios = ["flat-torus"]
"#;
        let c = RunConfig::parse("run.toml", toml_text).unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.checks.len(), 2);
        let json_text = r#"{"seed": 9, "checks": ["nash-basic"], "scenarios": []}"#;
        let c = RunConfig::parse("run.json", json_text).unwrap();
        assert_eq!(c.checks, vec!["nash-basic"]);
    }

    #[test]
    fn unknown_check_id_is_rejected_by_name() {
        let text = r#"checks = ["no-such-check"]"#;
        let err = RunConfig::parse("run.toml", text).unwrap_err();
        assert!(err.contains("no-such-check"), "{err}");
    }
}
