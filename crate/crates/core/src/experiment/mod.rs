//! Experiment driver: configuration, the round loop, multi-seed suites and
//! CSV / JSON output.

mod config;
pub mod output;
mod run;
mod suite;

pub use config::{
    AttackSection, DatasetConfig, ExperimentConfig, ExtractorSchedule, PartitionSection,
    ResolvedSeeds, Seeds, Variant,
};
pub use run::{attack_at, run_experiment, run_id, PrivacyProbe, RunRecord, Simulation};
pub use suite::{mean_std, run_suite, Aggregate, RunFailure, SuiteOutcome, DEFAULT_SEEDS};
