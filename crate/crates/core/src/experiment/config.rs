use serde::{Deserialize, Serialize};

use crate::client::BaseClassRule;
use crate::data::{consensus_split, DatasetSpec, PartitionConfig, PartitionMode};
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Training method. The two ablations drop one component each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "fedprok")]
    FedProK,
    /// No feature translation on clients.
    #[serde(rename = "wo_ft")]
    WithoutFt,
    /// No prototype fusion on the server; clients keep local prototypes only.
    #[serde(rename = "wo_pkf")]
    WithoutPkf,
    #[serde(rename = "fedavg")]
    FedAvg,
}

impl Variant {
    pub fn translates(self) -> bool {
        matches!(self, Variant::FedProK | Variant::WithoutPkf)
    }

    /// Prototypes are uploaded, fused and distributed.
    pub fn fuses(self) -> bool {
        matches!(self, Variant::FedProK | Variant::WithoutFt)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::FedProK => "fedprok",
            Variant::WithoutFt => "wo_ft",
            Variant::WithoutPkf => "wo_pkf",
            Variant::FedAvg => "fedavg",
        }
    }
}

/// When the feature extractor receives gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractorSchedule {
    /// Trained during the first task, frozen afterwards.
    #[default]
    FirstTask,
    /// Frozen from initialisation.
    Never,
    /// Trained in every task.
    Always,
}

impl ExtractorSchedule {
    pub fn trains_in(self, task: usize) -> bool {
        match self {
            ExtractorSchedule::FirstTask => task == 1,
            ExtractorSchedule::Never => false,
            ExtractorSchedule::Always => true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub class_center_scale: f64,
    pub within_class_stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PartitionSection {
    pub mode: PartitionMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub num_clients: usize,
    pub num_tasks: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSection {
    #[serde(default = "default_attack_iters")]
    pub iters: usize,
    #[serde(default = "default_attack_lr")]
    pub lr: f64,
    /// Samples attacked at the end of a run; scores are averaged.
    #[serde(default = "default_attack_samples")]
    pub samples: usize,
    /// Random starting points per attack.
    #[serde(default = "default_attack_restarts")]
    pub restarts: usize,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            iters: default_attack_iters(),
            lr: default_attack_lr(),
            samples: default_attack_samples(),
            restarts: default_attack_restarts(),
        }
    }
}

/// Master seed plus optional per-component overrides; unset components are
/// derived from the master seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub partition: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub training: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub attack: Option<u64>,
}

impl Default for Seeds {
    fn default() -> Self {
        Self {
            master: 42,
            data: None,
            partition: None,
            init: None,
            training: None,
            attack: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedSeeds {
    pub data: u64,
    pub partition: u64,
    pub init: u64,
    pub training: u64,
    pub attack: u64,
}

impl Seeds {
    pub fn resolve(&self) -> ResolvedSeeds {
        let pick = |explicit: Option<u64>, tag: u64| {
            explicit.unwrap_or_else(|| derive_seed(self.master, &[tag]))
        };
        ResolvedSeeds {
            data: pick(self.data, 1),
            partition: pick(self.partition, 2),
            init: pick(self.init, 3),
            training: pick(self.training, 4),
            attack: pick(self.attack, 5),
        }
    }
}

/// Complete identity of one experiment run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variant: Variant,
    pub dataset: DatasetConfig,
    pub partition: PartitionSection,
    /// Extractor layer widths; the last one is the feature dimension.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    #[serde(default)]
    pub pseudo_per_class: Option<usize>,
    #[serde(default = "half")]
    pub beta: f64,
    #[serde(default = "half")]
    pub lambda: f64,
    #[serde(default)]
    pub extractor_schedule: ExtractorSchedule,
    #[serde(default)]
    pub base_class_rule: BaseClassRule,
    #[serde(default)]
    pub weighted_fedavg: bool,
    /// Simulated link speed in bytes per second.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
    #[serde(default)]
    pub attack: AttackSection,
    #[serde(default)]
    pub seeds: Seeds,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 16]
}

fn half() -> f64 {
    0.5
}

fn default_bandwidth() -> f64 {
    // 100 Mbit/s
    12.5e6
}

fn default_attack_iters() -> usize {
    300
}

fn default_attack_lr() -> f64 {
    0.1
}

fn default_attack_samples() -> usize {
    1
}

fn default_attack_restarts() -> usize {
    8
}

fn unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Config(format!("{name} must lie in [0, 1], got {v}")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        let d = &self.dataset;
        DatasetSpec {
            num_classes: d.num_classes,
            input_dim: d.input_dim,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            class_center_scale: d.class_center_scale,
            within_class_stddev: d.within_class_stddev,
            seed: self.seeds.resolve().data,
        }
    }

    pub fn partition_config(&self) -> PartitionConfig {
        let p = &self.partition;
        PartitionConfig {
            mode: p.mode,
            alpha: p.alpha,
            gamma: p.gamma,
            num_clients: p.num_clients,
            num_tasks: p.num_tasks,
            seed: self.seeds.resolve().partition,
        }
    }

    pub fn rounds_per_task(&self) -> usize {
        self.rounds / self.partition.num_tasks.max(1)
    }

    /// Checks every constraint the run would otherwise hit midway.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        let part = self.partition_config();
        part.validate()?;
        let (m, k, t) = (
            self.dataset.num_classes,
            self.partition.num_clients,
            self.partition.num_tasks,
        );
        if self.rounds == 0 || self.rounds % t != 0 {
            return Err(Error::Config(format!(
                "rounds ({}) must be a positive multiple of num_tasks ({t})",
                self.rounds
            )));
        }
        if self.local_epochs == 0 {
            return Err(Error::Config("local_epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be >= 1".into()));
        }
        unit("beta", self.beta)?;
        unit("lambda", self.lambda)?;
        if !(self.bandwidth > 0.0) || !self.bandwidth.is_finite() {
            return Err(Error::Config("bandwidth must be > 0".into()));
        }
        let a = &self.attack;
        if a.samples == 0 || a.iters == 0 || a.restarts == 0 || !(a.lr > 0.0) {
            return Err(Error::Config(
                "attack needs samples, iters and restarts >= 1 and lr > 0".into(),
            ));
        }
        let per_client = match part.mode {
            PartitionMode::Synchronous => {
                if self.dataset.train_per_class < k {
                    return Err(Error::Config(format!(
                        "train_per_class ({}) must be >= num_clients ({k})",
                        self.dataset.train_per_class
                    )));
                }
                m
            }
            PartitionMode::Asynchronous => {
                let (common, unique) =
                    consensus_split(m, k, part.gamma.expect("validated"))?;
                if common > 0 && self.dataset.train_per_class < k {
                    return Err(Error::Config(format!(
                        "train_per_class ({}) must be >= num_clients ({k}) for common classes",
                        self.dataset.train_per_class
                    )));
                }
                common + unique
            }
        };
        if per_client % t != 0 {
            return Err(Error::Config(format!(
                "each client holds {per_client} classes, not divisible into {t} tasks"
            )));
        }
        Ok(())
    }
}
