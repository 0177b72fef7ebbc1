use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::dataset::LabeledSample;
use super::partition::{ClientShard, PartitionConfig, PartitionMode};
use crate::error::{Error, Result};
use crate::seed::rng_for;

const TASK_ORDER: u64 = 20;

/// One incremental task on one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Task<S> {
    /// 1-based task index.
    pub index: usize,
    pub classes: Vec<usize>,
    pub samples: Vec<LabeledSample<S>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskStream<S> {
    pub client_id: usize,
    pub tasks: Vec<Task<S>>,
    pub rounds_per_task: usize,
}

impl<S> TaskStream<S> {
    pub fn task(&self, t: usize) -> &Task<S> {
        &self.tasks[t - 1]
    }

    /// Classes of tasks `1..t` (exclusive of `t`).
    pub fn classes_before(&self, t: usize) -> BTreeSet<usize> {
        self.tasks[..t - 1]
            .iter()
            .flat_map(|task| task.classes.iter().copied())
            .collect()
    }
}

/// Global class order shared by every client of a run.
pub fn class_order(num_classes: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..num_classes).collect();
    perm.shuffle(&mut rng_for(seed, &[TASK_ORDER]));
    perm
}

/// Slices a client's classes into `cfg.num_tasks` contiguous task class sets.
///
/// Classes follow the run-wide seeded permutation of `0..num_classes`; in asynchronous mode the
/// client's common classes come first so that shared classes line up across
/// clients task by task.
pub fn build_task_stream<S: Clone>(
    shard: &ClientShard<S>,
    num_classes: usize,
    cfg: &PartitionConfig,
    rounds_per_task: usize,
) -> Result<TaskStream<S>> {
    let t = cfg.num_tasks;
    if t == 0 {
        return Err(Error::Config("num_tasks must be >= 1".into()));
    }
    if rounds_per_task == 0 {
        return Err(Error::Config("rounds_per_task must be >= 1".into()));
    }
    if let Some(c) = shard.common.iter().chain(&shard.unique).find(|&&c| c >= num_classes) {
        return Err(Error::Label {
            label: *c,
            num_classes,
        });
    }
    let perm = class_order(num_classes, cfg.seed);
    let ordered: Vec<usize> = match cfg.mode {
        PartitionMode::Synchronous => perm
            .iter()
            .copied()
            .filter(|c| shard.common.contains(c) || shard.unique.contains(c))
            .collect(),
        PartitionMode::Asynchronous => perm
            .iter()
            .copied()
            .filter(|c| shard.common.contains(c))
            .chain(perm.iter().copied().filter(|c| shard.unique.contains(c)))
            .collect(),
    };
    if ordered.len() % t != 0 {
        return Err(Error::Config(format!(
            "client {} holds {} classes, not divisible into {t} tasks",
            shard.client_id,
            ordered.len()
        )));
    }
    let per_task = ordered.len() / t;
    let tasks = ordered
        .chunks(per_task.max(1))
        .take(t)
        .enumerate()
        .map(|(i, classes)| {
            let set: BTreeSet<usize> = classes.iter().copied().collect();
            Task {
                index: i + 1,
                classes: classes.to_vec(),
                samples: shard
                    .samples
                    .iter()
                    .filter(|s| set.contains(&s.label))
                    .cloned()
                    .collect(),
            }
        })
        .collect();
    Ok(TaskStream {
        client_id: shard.client_id,
        tasks,
        rounds_per_task,
    })
}

/// Active task for 1-based round `r` of `total_rounds`, with `num_tasks` tasks
/// each lasting `total_rounds / num_tasks` rounds: `(r − 1) / (R / T) + 1`.
pub fn round_to_task(r: usize, total_rounds: usize, num_tasks: usize) -> Result<usize> {
    if num_tasks == 0 || total_rounds == 0 || total_rounds % num_tasks != 0 {
        return Err(Error::Config(format!(
            "rounds ({total_rounds}) must be a positive multiple of tasks ({num_tasks})"
        )));
    }
    if r == 0 || r > total_rounds {
        return Err(Error::Argument(format!("round {r} outside 1..={total_rounds}")));
    }
    Ok((r - 1) / (total_rounds / num_tasks) + 1)
}
