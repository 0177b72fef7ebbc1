use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run::{heterogeneity, run_experiment, RunRecord};
use crate::error::Result;

pub const DEFAULT_SEEDS: [u64; 3] = [42, 1999, 2024];

/// Mean and sample standard deviation of final metrics over the seeds of
/// one configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub config_index: usize,
    pub variant: String,
    pub heterogeneity: f64,
    pub seeds: Vec<u64>,
    pub mean_final_acc_all: f64,
    pub std_final_acc_all: f64,
    pub mean_utility: f64,
    pub std_utility: f64,
    pub mean_privacy: f64,
    pub std_privacy: f64,
    pub mean_efficiency: f64,
    pub std_efficiency: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunFailure {
    pub config_index: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteOutcome {
    pub records: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    pub failures: Vec<RunFailure>,
}

/// Returns `(mean, sample std)`; the std of a single value is 0.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Runs every configuration under every seed (the seed replaces each
/// config's master seed). Configurations are validated up front; a run that
/// fails at runtime is recorded and the rest continue.
pub fn run_suite(configs: &[ExperimentConfig], seeds: &[u64]) -> Result<SuiteOutcome> {
    for c in configs {
        c.validate()?;
    }
    let jobs: Vec<(usize, u64)> = configs
        .iter()
        .enumerate()
        .flat_map(|(i, _)| seeds.iter().map(move |&s| (i, s)))
        .collect();
    let results: Vec<(usize, u64, Result<RunRecord>)> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let mut cfg = configs[i].clone();
            cfg.seeds.master = seed;
            (i, seed, run_experiment(&cfg))
        })
        .collect();

    let mut out = SuiteOutcome::default();
    let mut per_config: Vec<Vec<usize>> = vec![Vec::new(); configs.len()];
    for (i, seed, res) in results {
        match res {
            Ok(rec) => {
                per_config[i].push(out.records.len());
                out.records.push(rec);
            }
            Err(e) => out.failures.push(RunFailure {
                config_index: i,
                seed,
                error: e.to_string(),
            }),
        }
    }
    for (i, idx) in per_config.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        let recs: Vec<&RunRecord> = idx.iter().map(|&j| &out.records[j]).collect();
        let col = |f: &dyn Fn(&RunRecord) -> f64| mean_std(&recs.iter().map(|r| f(r)).collect::<Vec<_>>());
        let (mean_final_acc_all, std_final_acc_all) = col(&|r| r.final_acc_all);
        let (mean_utility, std_utility) = col(&|r| r.trust.utility);
        let (mean_privacy, std_privacy) = col(&|r| r.trust.privacy);
        let (mean_efficiency, std_efficiency) = col(&|r| r.trust.efficiency);
        out.aggregates.push(Aggregate {
            config_index: i,
            variant: configs[i].variant.name().to_string(),
            heterogeneity: heterogeneity(&configs[i]),
            seeds: recs.iter().map(|r| r.seed).collect(),
            mean_final_acc_all,
            std_final_acc_all,
            mean_utility,
            std_utility,
            mean_privacy,
            std_privacy,
            mean_efficiency,
            std_efficiency,
        });
    }
    Ok(out)
}
