//! Simulation study orchestration.
//!
//! A [`Study`] expands into a grid of scenarios. Each scenario draws its
//! replicates from a covariate-constrained randomization pool shared by all
//! scenarios with the same number of villages per arm, simulates follow-up
//! outcomes, and records the decisions of all three analyses. Every
//! replicate uses substreams keyed by the master seed, the scenario id and
//! the replicate index, so results do not depend on the worker count.

mod config;
mod report;
mod run;

pub use config::{default_critical_z, CensusSource, CoefSpec, PoolConfig, Scale, Study, StudyConfig};
pub use report::{
    closed_form_rows, compare_report, mcse, read_results, write_results, ClosedFormRow, ComparisonRow,
    ComparisonTable, FormulaParams, Mcse, MethodSummary, ScenarioSummary, COMPARISON_CSV_HEADER,
    RESULTS_CSV_HEADER,
};
pub use run::{
    build_pools, coef_label, expand_grid, pool_seed, replicate_key, run_scenario, run_study, scenario_id,
    CalibrationCache, PoolStats, RunOptions, StudyReport, RESULTS_FILE, STUDY_FILE, SUMMARY_FILE,
};
