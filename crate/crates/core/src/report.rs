//! Machine-readable run reports.

use crate::jet::Check;
use serde::{Deserialize, Serialize};

/// One named check result in a report.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct CheckResult {
    pub name: String,
    pub status: String,
    pub residual: String,
}

impl From<&Check> for CheckResult {
    fn from(c: &Check) -> CheckResult {
        CheckResult {
            name: c.name.clone(),
            status: if c.pass { "pass" } else { "fail" }.into(),
            residual: c.residual.clone(),
        }
    }
}

/// The full report of one command invocation.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct RunReport {
    pub command: String,
    pub file: String,
    pub checks: Vec<CheckResult>,
    pub seed: u64,
    pub elapsed_ms: u64,
}

impl RunReport {
    pub fn new(command: impl Into<String>, file: impl Into<String>, seed: u64) -> RunReport {
        RunReport {
            command: command.into(),
            file: file.into(),
            checks: Vec::new(),
            seed,
            elapsed_ms: 0,
        }
    }

    pub fn push_checks(&mut self, checks: &[Check]) {
        self.checks.extend(checks.iter().map(CheckResult::from));
    }

    pub fn push(&mut self, name: impl Into<String>, pass: bool, residual: impl Into<String>) {
        self.checks.push(CheckResult {
            name: name.into(),
            status: if pass { "pass" } else { "fail" }.into(),
            residual: residual.into(),
        });
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.status == "pass")
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Human-readable rendering, one line per check.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("{} {}\n", self.command, self.file));
        for c in &self.checks {
            out.push_str(&format!("  [{}] {}", c.status.to_uppercase(), c.name));
            if c.status != "pass" && !c.residual.is_empty() {
                out.push_str(&format!("  residual: {}", c.residual));
            }
            out.push('\n');
        }
        out.push_str(&format!(
            "{}: {} checks, seed {}, {} ms\n",
            if self.all_pass() { "PASS" } else { "FAIL" },
            self.checks.len(),
            self.seed,
            self.elapsed_ms
        ));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn json_round_trip() {
        let mut r = RunReport::new("ro verify", "corpus/pavlov.its", 42);
        r.push("i:commutator", true, "0");
        r.push("ii:factor", false, "u[x]");
        r.elapsed_ms = 7;
        let back: RunReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
        assert!(!back.all_pass());
    }

    #[test]
    fn schema_field_names_are_stable() {
        let r = RunReport::new("validate", "f.its", 1);
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        for key in ["command", "file", "checks", "seed", "elapsed_ms"] {
            assert!(v.get(key).is_some(), "missing {}", key);
        }
    }
}
