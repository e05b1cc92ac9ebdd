//! Scenario harness: deterministic event schedules, fault injection, and
//! machine-readable reports.
//!
//! A scenario is a line-oriented UTF-8 file with `#` comments: header lines
//! (`seed=`, `nodes=`, `replication=`, `durability=`, optionally
//! `datastore=`), `class` and `policy` declarations, and one event per line
//! as `@<tick> <ACTION> <args...>`. Replaying the same file with the same
//! seed produces a byte-identical JSON report.

mod report;
mod runner;
mod scenario;

pub use report::{
    EventOutcome, Report, ReportFormat, RoutingReport, SweepOutcome, SweepReport,
};
pub use runner::{
    committed_state, interleavings, load_scenario, restart_all, run_scenario, sweep_crash_points,
    RunOutcome,
};
pub use scenario::{
    Action, AssertExpr, DurabilitySpec, Leg, PolicyDecl, PolicyScopeDecl, Scenario,
    ScheduledEvent, ValueLit,
};

/// Built-in scenarios shipped with the binary, addressable by name.
pub const BUILTIN_SCENARIOS: &[(&str, &str)] = &[
    ("bank-default", include_str!("../../fixtures/bank-default.scn")),
    ("bank-optimistic", include_str!("../../fixtures/bank-optimistic.scn")),
    ("failover-basic", include_str!("../../fixtures/failover-basic.scn")),
    ("ring-repair", include_str!("../../fixtures/ring-repair.scn")),
    (
        "restart-persistence",
        include_str!("../../fixtures/restart-persistence.scn"),
    ),
];
