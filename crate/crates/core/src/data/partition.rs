//! Splitting a training set across clients.
//!
//! Synchronous: every client holds every class, with per-class shares drawn
//! from a symmetric Dirichlet(α). Asynchronous: a block of common classes is
//! shared by all clients and the remaining classes are split into equal
//! private pools, one per client.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionMode {
    Synchronous,
    Asynchronous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub mode: PartitionMode,
    /// Dirichlet concentration; synchronous mode only.
    pub alpha: Option<f64>,
    /// Consensus rate; asynchronous mode only.
    pub gamma: Option<f64>,
    pub num_clients: usize,
    pub num_tasks: usize,
    pub seed: u64,
}

impl PartitionConfig {
    pub fn synchronous(alpha: f64, num_clients: usize, num_tasks: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Synchronous,
            alpha: Some(alpha),
            gamma: None,
            num_clients,
            num_tasks,
            seed,
        }
    }

    pub fn asynchronous(gamma: f64, num_clients: usize, num_tasks: usize, seed: u64) -> Self {
        Self {
            mode: PartitionMode::Asynchronous,
            alpha: None,
            gamma: Some(gamma),
            num_clients,
            num_tasks,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_clients < 2 {
            return Err(Error::Config("num_clients must be >= 2".into()));
        }
        if self.num_tasks < 1 {
            return Err(Error::Config("num_tasks must be >= 1".into()));
        }
        match self.mode {
            PartitionMode::Synchronous => {
                if self.gamma.is_some() {
                    return Err(Error::Config("gamma is not used in synchronous mode".into()));
                }
                let a = self.alpha.ok_or_else(|| {
                    Error::Config("synchronous mode requires alpha".into())
                })?;
                if !(a > 0.0) || !a.is_finite() {
                    return Err(Error::Config(format!("alpha must be > 0, got {a}")));
                }
            }
            PartitionMode::Asynchronous => {
                if self.alpha.is_some() {
                    return Err(Error::Config("alpha is not used in asynchronous mode".into()));
                }
                let g = self.gamma.ok_or_else(|| {
                    Error::Config("asynchronous mode requires gamma".into())
                })?;
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Config(format!("gamma must lie in [0, 1], got {g}")));
                }
            }
        }
        Ok(())
    }

    /// The heterogeneity knob of the active mode.
    pub fn heterogeneity(&self) -> f64 {
        match self.mode {
            PartitionMode::Synchronous => self.alpha.unwrap_or(f64::NAN),
            PartitionMode::Asynchronous => self.gamma.unwrap_or(f64::NAN),
        }
    }
}

/// One client's share of the training set.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard<S> {
    pub client_id: usize,
    pub samples: Vec<LabeledSample<S>>,
    /// Classes held by every client (all classes in synchronous mode).
    pub common: BTreeSet<usize>,
    /// Classes private to this client.
    pub unique: BTreeSet<usize>,
}

impl<S> ClientShard<S> {
    pub fn classes(&self) -> BTreeSet<usize> {
        self.common.union(&self.unique).copied().collect()
    }
}

const SHUFFLE: u64 = 10;
const DIRICHLET: u64 = 11;
const CLASS_PERM: u64 = 12;
const MAX_DIRICHLET_DRAWS: usize = 10_000;

fn indices_by_class<S>(train: &[LabeledSample<S>]) -> Vec<Vec<usize>> {
    let m = train.iter().map(|s| s.label + 1).max().unwrap_or(0);
    let mut by_class = vec![Vec::new(); m];
    for (i, s) in train.iter().enumerate() {
        by_class[s.label].push(i);
    }
    by_class
}

/// Normalised Gamma(α, 1) draws, i.e. one Dirichlet(α, …, α) sample.
pub(crate) fn dirichlet<R: rand::Rng>(alpha: f64, k: usize, rng: &mut R) -> Result<Vec<f64>> {
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| Error::Config(format!("invalid Dirichlet concentration {alpha}: {e}")))?;
    loop {
        let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let total: f64 = draws.iter().sum();
        // all-underflow happens for tiny alpha; redraw
        if total > 0.0 && total.is_finite() {
            return Ok(draws.into_iter().map(|g| g / total).collect());
        }
    }
}

/// Integer shares from proportions via rounded cumulative boundaries.
fn shares(n: usize, props: &[f64]) -> Vec<usize> {
    let mut out = Vec::with_capacity(props.len());
    let mut cum = 0.0;
    let mut prev = 0usize;
    for (i, p) in props.iter().enumerate() {
        cum += p;
        let edge = if i + 1 == props.len() {
            n
        } else {
            ((cum * n as f64).round() as usize).min(n)
        };
        let edge = edge.max(prev);
        out.push(edge - prev);
        prev = edge;
    }
    out
}

pub fn partition_synchronous<S: Scalar>(
    train: &[LabeledSample<S>],
    cfg: &PartitionConfig,
) -> Result<Vec<ClientShard<S>>> {
    cfg.validate()?;
    if cfg.mode != PartitionMode::Synchronous {
        return Err(Error::Config("partition_synchronous needs synchronous mode".into()));
    }
    let alpha = cfg.alpha.expect("validated");
    let k = cfg.num_clients;
    let by_class = indices_by_class(train);
    let all: BTreeSet<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (class, idx) in by_class.iter().enumerate() {
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            return Err(Error::Config(format!(
                "class {class} has {} samples, fewer than {k} clients",
                idx.len()
            )));
        }
        let mut order = idx.clone();
        order.shuffle(&mut rng_for(cfg.seed, &[SHUFFLE, class as u64]));
        let mut rng = rng_for(cfg.seed, &[DIRICHLET, class as u64]);
        let mut counts = None;
        for _ in 0..MAX_DIRICHLET_DRAWS {
            let c = shares(order.len(), &dirichlet(alpha, k, &mut rng)?);
            if c.iter().all(|&n| n >= 1) {
                counts = Some(c);
                break;
            }
        }
        let counts = counts.ok_or_else(|| {
            Error::Config(format!(
                "could not give every client a sample of class {class} in {MAX_DIRICHLET_DRAWS} Dirichlet draws"
            ))
        })?;
        let mut start = 0;
        for (client, n) in counts.into_iter().enumerate() {
            assigned[client].extend_from_slice(&order[start..start + n]);
            start += n;
        }
    }

    Ok(assigned
        .into_iter()
        .enumerate()
        .map(|(client_id, idx)| ClientShard {
            client_id,
            samples: idx.into_iter().map(|i| train[i].clone()).collect(),
            common: all.clone(),
            unique: BTreeSet::new(),
        })
        .collect())
}

/// Number of common classes and private classes per client for `num_classes`
/// total classes shared among `num_clients` at consensus rate `gamma`.
///
/// The consensus rate is the fraction of each client's own class set that is
/// common, `common / (common + unique)`. Totals must satisfy
/// `common + num_clients · unique == num_classes`, so the split whose realised
/// rate is closest to `gamma` is returned (ties go to more common classes).
pub fn consensus_split(num_classes: usize, num_clients: usize, gamma: f64) -> Result<(usize, usize)> {
    if num_classes == 0 || num_clients == 0 {
        return Err(Error::Config("need at least one class and one client".into()));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    let mut best: Option<(f64, usize, usize)> = None;
    for unique in 0..=num_classes / num_clients {
        let common = num_classes - num_clients * unique;
        if common + unique == 0 {
            continue;
        }
        let rate = common as f64 / (common + unique) as f64;
        let gap = (rate - gamma).abs();
        let better = match best {
            None => true,
            Some((g, c, _)) => gap < g - 1e-12 || ((gap - g).abs() <= 1e-12 && common > c),
        };
        if better {
            best = Some((gap, common, unique));
        }
    }
    let (_, common, unique) = best.expect("unique = 0 is always feasible");
    Ok((common, unique))
}

pub fn realized_consensus(common: usize, unique: usize) -> f64 {
    common as f64 / (common + unique) as f64
}

pub fn partition_asynchronous<S: Scalar>(
    train: &[LabeledSample<S>],
    cfg: &PartitionConfig,
) -> Result<Vec<ClientShard<S>>> {
    cfg.validate()?;
    if cfg.mode != PartitionMode::Asynchronous {
        return Err(Error::Config("partition_asynchronous needs asynchronous mode".into()));
    }
    let k = cfg.num_clients;
    let by_class = indices_by_class(train);
    let present: Vec<usize> = (0..by_class.len()).filter(|&c| !by_class[c].is_empty()).collect();
    let (n_common, n_unique) = consensus_split(present.len(), k, cfg.gamma.expect("validated"))?;

    let mut perm = present.clone();
    perm.shuffle(&mut rng_for(cfg.seed, &[CLASS_PERM]));
    let common: BTreeSet<usize> = perm[..n_common].iter().copied().collect();
    let pools: Vec<BTreeSet<usize>> = (0..k)
        .map(|client| {
            let start = n_common + client * n_unique;
            perm[start..start + n_unique].iter().copied().collect()
        })
        .collect();

    let mut assigned: Vec<Vec<usize>> = vec![Vec::new(); k];
    for &class in &present {
        let mut order = by_class[class].clone();
        order.shuffle(&mut rng_for(cfg.seed, &[SHUFFLE, class as u64]));
        if common.contains(&class) {
            if order.len() < k {
                return Err(Error::Config(format!(
                    "common class {class} has {} samples, fewer than {k} clients",
                    order.len()
                )));
            }
            for (j, i) in order.into_iter().enumerate() {
                assigned[j % k].push(i);
            }
        } else {
            let owner = pools
                .iter()
                .position(|p| p.contains(&class))
                .expect("every class is common or owned");
            assigned[owner].extend(order);
        }
    }

    Ok(assigned
        .into_iter()
        .zip(pools)
        .enumerate()
        .map(|(client_id, (idx, unique))| ClientShard {
            client_id,
            samples: idx.into_iter().map(|i| train[i].clone()).collect(),
            common: common.clone(),
            unique,
        })
        .collect())
}

pub fn partition<S: Scalar>(
    train: &[LabeledSample<S>],
    cfg: &PartitionConfig,
) -> Result<Vec<ClientShard<S>>> {
    match cfg.mode {
        PartitionMode::Synchronous => partition_synchronous(train, cfg),
        PartitionMode::Asynchronous => partition_asynchronous(train, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shares_sum_to_n() {
        assert_eq!(shares(10, &[0.5, 0.5]), vec![5, 5]);
        assert_eq!(shares(7, &[0.0, 0.0, 1.0]), vec![0, 0, 7]);
        let s = shares(101, &[0.33, 0.33, 0.34]);
        assert_eq!(s.iter().sum::<usize>(), 101);
    }

    #[test]
    fn consensus_split_cases() {
        // 25 common + 3 × 25 private → each client holds 50 classes, half common
        assert_eq!(consensus_split(100, 3, 0.5).unwrap(), (25, 25));
        assert_eq!(realized_consensus(25, 25), 0.5);
        assert_eq!(consensus_split(9, 3, 0.0).unwrap(), (0, 3));
        assert_eq!(consensus_split(9, 3, 1.0).unwrap(), (9, 0));
        assert_eq!(consensus_split(9, 3, 0.5).unwrap(), (3, 2));
        assert_eq!(consensus_split(9, 3, 0.2).unwrap(), (0, 3));
        assert!(consensus_split(9, 3, 1.5).is_err());
    }

    #[test]
    fn config_requires_the_mode_parameter_only() {
        let mut c = PartitionConfig::synchronous(0.5, 3, 2, 0);
        assert!(c.validate().is_ok());
        c.gamma = Some(0.5);
        assert!(c.validate().is_err());
        let mut a = PartitionConfig::asynchronous(0.5, 3, 2, 0);
        assert!(a.validate().is_ok());
        a.gamma = None;
        assert!(a.validate().is_err());
        assert!(PartitionConfig::synchronous(0.5, 1, 2, 0).validate().is_err());
        assert!(PartitionConfig::synchronous(0.0, 2, 2, 0).validate().is_err());
    }
}
