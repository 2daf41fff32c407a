//! Synthetic populations and Monte Carlo coverage checks.

mod harness;
mod population;
mod sample;
mod tables;

pub use harness::{
    accumulate_report, classify_cells, mc_se, replication_mcmc, replication_sample, run_replication, run_simulation,
    CellCoverage, CellOutcome, CoverageRate, CoverageReport, McConfig, ReplicationOutcome, ReplicationStatus,
};
pub use population::{
    generate_population, AttributeModel, HoursModel, LogitModel, OutcomeKind, OutcomeModel, SyntheticFrame,
    SyntheticPopulationSpec, EMPLOYED, HOURS, UNEMPLOYED,
};
pub use sample::{allocation, draw_stratified_sample};
pub use tables::{coverage_csv, coverage_summary, cv_summary, coverage_by_tier_csv, cv_by_tier_csv, tables_text, CoverageSummaryRow, CvSummaryRow};
