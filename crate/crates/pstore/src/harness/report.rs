//! Machine-readable run reports. A report is a pure function of the
//! scenario file bytes: every map is ordered and no host-specific detail
//! (paths, wall-clock times) is recorded.

use serde::Serialize;
use std::collections::BTreeMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct EventOutcome {
    pub tick: u64,
    pub action: String,
    pub outcome: String,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq, Default)]
pub struct AssertSummary {
    pub passed: u32,
    pub failed: u32,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct CensusLine {
    pub service: String,
    pub key: String,
    pub kind: String,
    pub copies: usize,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq, Default)]
pub struct CensusReport {
    pub live_nodes: usize,
    pub distinct_keys: usize,
    pub entries: Vec<CensusLine>,
    pub version_log_lengths: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq, Default)]
pub struct RoutingReport {
    pub dol_calls: u64,
    pub hops_total: u64,
    pub hops_max: u64,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct Report {
    pub v: u32,
    pub scenario: String,
    pub seed: u64,
    pub events: Vec<EventOutcome>,
    pub asserts: AssertSummary,
    pub census: CensusReport,
    pub routing: RoutingReport,
}

impl Report {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => {
                serde_json::to_string_pretty(self).expect("report serializes") + "\n"
            }
            ReportFormat::Text => {
                let mut out = String::new();
                out.push_str(&format!("scenario {} (seed {})\n", self.scenario, self.seed));
                for e in &self.events {
                    out.push_str(&format!("@{:<6} {:<44} {}\n", e.tick, e.action, e.outcome));
                }
                out.push_str(&format!(
                    "asserts: {} passed, {} failed\n",
                    self.asserts.passed, self.asserts.failed
                ));
                out.push_str(&format!(
                    "census: {} live nodes, {} distinct keys, {} entries\n",
                    self.census.live_nodes,
                    self.census.distinct_keys,
                    self.census.entries.len()
                ));
                out.push_str(&format!(
                    "routing: {} dol calls, {} hops total, {} hops max\n",
                    self.routing.dol_calls, self.routing.hops_total, self.routing.hops_max
                ));
                out
            }
        }
    }
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct SweepOutcome {
    pub crash_after_step: u32,
    pub commit_outcome: String,
    pub classification: String,
}

#[derive(Clone, Debug, Serialize, PartialEq, Eq)]
pub struct SweepReport {
    pub v: u32,
    pub scenario: String,
    pub seed: u64,
    pub commit_index: usize,
    pub total_steps: u32,
    pub outcomes: Vec<SweepOutcome>,
}

impl SweepReport {
    pub fn mixed_or_lost(&self) -> usize {
        self.outcomes
            .iter()
            .filter(|o| o.classification == "MIXED" || o.classification == "LOST")
            .count()
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => {
                serde_json::to_string_pretty(self).expect("report serializes") + "\n"
            }
            ReportFormat::Text => {
                let mut out = String::new();
                out.push_str(&format!(
                    "crash sweep of {} commit #{} ({} internal steps)\n",
                    self.scenario, self.commit_index, self.total_steps
                ));
                for o in &self.outcomes {
                    out.push_str(&format!(
                        "crash after step {:<3} commit={:<8} readers see {}\n",
                        o.crash_after_step, o.commit_outcome, o.classification
                    ));
                }
                out.push_str(&format!("mixed or lost: {}\n", self.mixed_or_lost()));
                out
            }
        }
    }
}
