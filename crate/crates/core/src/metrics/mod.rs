//! Trustworthiness scores: continual utility, privacy and efficiency.

mod attack;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use attack::{
    attack_init, gradient_inversion_attack, prototype_inversion_attack, AttackConfig, AttackResult,
};

use crate::data::{stack_features, LabeledSample};
use crate::error::{Error, Result};
use crate::nn::{forward_features, forward_logits, ModelParams};
use crate::scalar::Scalar;

/// Accuracies of the global model after one round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySnapshot {
    pub round: usize,
    pub task: usize,
    /// Classes of earlier tasks; absent during the first task.
    pub acc_previous: Option<f64>,
    pub acc_current: f64,
    pub acc_all: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RoundCost {
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub compute_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyLedger {
    pub rounds: Vec<RoundCost>,
    /// Simulated link speed in bytes per second.
    pub bandwidth: f64,
}

impl EfficiencyLedger {
    pub fn new(bandwidth: f64) -> Self {
        Self {
            rounds: Vec::new(),
            bandwidth,
        }
    }

    pub fn push(&mut self, cost: RoundCost) {
        self.rounds.push(cost);
    }

    pub fn total_bytes(&self) -> u64 {
        self.rounds.iter().map(|c| c.bytes_up + c.bytes_down).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrustReport {
    /// Continual utility averaged over task ends.
    pub utility: f64,
    /// Mean privacy score of inversion attacks on single-sample gradients.
    pub privacy: f64,
    /// Mean privacy score of inversion attacks on shared prototypes, for
    /// methods that transmit them.
    pub privacy_prototype: Option<f64>,
    /// Seconds per round.
    pub efficiency: f64,
    pub lambda: f64,
}

/// Top-1 accuracy over test samples whose label lies in `class_filter`.
/// Predictions range over every allocated class.
pub fn evaluate<S: Scalar>(
    params: &ModelParams<S>,
    test: &[LabeledSample<S>],
    class_filter: &BTreeSet<usize>,
) -> Result<f64> {
    if class_filter.is_empty() {
        return Err(Error::Argument("empty class filter".into()));
    }
    let picked: Vec<&LabeledSample<S>> = test
        .iter()
        .filter(|s| class_filter.contains(&s.label))
        .collect();
    if picked.is_empty() {
        return Err(Error::Argument(format!(
            "no test samples for classes {class_filter:?}"
        )));
    }
    if params.num_classes() == 0 {
        return Err(Error::Argument("model has no classifier rows".into()));
    }
    let x = stack_features(&picked, params.input_dim())?;
    let logits = forward_logits(params, &forward_features(params, &x)?)?;
    let correct = picked
        .iter()
        .enumerate()
        .filter(|(r, s)| argmax(logits.row(*r)) == s.label)
        .count();
    Ok(correct as f64 / picked.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn check_unit(name: &str, v: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&v) {
        return Err(Error::Argument(format!("{name} = {v} outside [0, 1]")));
    }
    Ok(())
}

/// `λ·A_prev + (1 − λ)·A_cur`.
pub fn continual_utility(acc_previous: f64, acc_current: f64, lambda: f64) -> Result<f64> {
    check_unit("lambda", lambda)?;
    check_unit("acc_previous", acc_previous)?;
    check_unit("acc_current", acc_current)?;
    Ok(lambda * acc_previous + (1.0 - lambda) * acc_current)
}

/// `1 − 1/(1 + mse)`.
pub fn privacy_score(mse: f64) -> Result<f64> {
    if !(mse >= 0.0) {
        return Err(Error::Argument(format!("mse must be >= 0, got {mse}")));
    }
    Ok(1.0 - 1.0 / (1.0 + mse))
}

/// `(τ1 + τ2) / R` with τ1 the simulated transfer time of all traffic and τ2
/// the summed compute time.
pub fn efficiency_score(ledger: &EfficiencyLedger, rounds: usize) -> Result<f64> {
    if rounds == 0 {
        return Err(Error::Argument("rounds must be >= 1".into()));
    }
    if !(ledger.bandwidth > 0.0) || !ledger.bandwidth.is_finite() {
        return Err(Error::Argument(format!(
            "bandwidth must be positive, got {}",
            ledger.bandwidth
        )));
    }
    if ledger.rounds.len() != rounds {
        return Err(Error::Argument(format!(
            "ledger covers {} rounds, expected {rounds}",
            ledger.rounds.len()
        )));
    }
    let tau1 = ledger.total_bytes() as f64 / ledger.bandwidth;
    let tau2: f64 = ledger.rounds.iter().map(|c| c.compute_seconds).sum();
    Ok((tau1 + tau2) / rounds as f64)
}

/// Continual utility averaged over the last snapshot of every task that has
/// previous classes. With a single task there is no stability term and the
/// final current-task accuracy is returned.
pub fn utility_over_tasks(snapshots: &[AccuracySnapshot], lambda: f64) -> Result<f64> {
    let mut ends: Vec<&AccuracySnapshot> = Vec::new();
    for (i, s) in snapshots.iter().enumerate() {
        let last_of_task = snapshots.get(i + 1).is_none_or(|n| n.task != s.task);
        if last_of_task {
            ends.push(s);
        }
    }
    let scored: Vec<f64> = ends
        .iter()
        .filter_map(|s| s.acc_previous.map(|p| continual_utility(p, s.acc_current, lambda)))
        .collect::<Result<_>>()?;
    if scored.is_empty() {
        return snapshots
            .last()
            .map(|s| s.acc_current)
            .ok_or_else(|| Error::Argument("no snapshots".into()));
    }
    Ok(scored.iter().sum::<f64>() / scored.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn utility_points() {
        assert!((continual_utility(0.4, 0.6, 0.5).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(continual_utility(0.37, 0.81, 1.0).unwrap(), 0.37);
        assert_eq!(continual_utility(0.37, 0.81, 0.0).unwrap(), 0.81);
        assert!(continual_utility(0.4, 0.6, 1.1).is_err());
        assert!(continual_utility(0.4, 0.6, -0.1).is_err());
    }

    #[test]
    fn privacy_points() {
        assert_eq!(privacy_score(0.0).unwrap(), 0.0);
        assert_eq!(privacy_score(1.0).unwrap(), 0.5);
        assert_eq!(privacy_score(9.0).unwrap(), 0.9);
        assert!(privacy_score(-1e-9).is_err());
        assert!(privacy_score(f64::NAN).is_err());
    }

    #[test]
    fn efficiency_points() {
        let zero = EfficiencyLedger {
            rounds: vec![RoundCost::default()],
            bandwidth: 1e6,
        };
        assert_eq!(efficiency_score(&zero, 1).unwrap(), 0.0);
        let one = EfficiencyLedger {
            rounds: vec![RoundCost {
                bytes_up: 400_000,
                bytes_down: 600_000,
                compute_seconds: 0.0,
            }],
            bandwidth: 1e6,
        };
        assert_eq!(efficiency_score(&one, 1).unwrap(), 1.0);
        assert!(efficiency_score(&EfficiencyLedger { bandwidth: 0.0, ..one.clone() }, 1).is_err());
        assert!(efficiency_score(&one, 2).is_err());
    }

    #[test]
    fn utility_over_task_ends() {
        let snap = |round, task, prev: Option<f64>, cur| AccuracySnapshot {
            round,
            task,
            acc_previous: prev,
            acc_current: cur,
            acc_all: 0.0,
        };
        let s = vec![
            snap(1, 1, None, 0.9),
            snap(2, 2, Some(0.1), 0.2),
            snap(3, 2, Some(0.4), 0.8),
            snap(4, 3, Some(0.2), 1.0),
        ];
        // task ends: round 3 (0.6) and round 4 (0.6)
        assert!((utility_over_tasks(&s, 0.5).unwrap() - 0.6).abs() < 1e-15);
        assert_eq!(utility_over_tasks(&s[..1], 0.5).unwrap(), 0.9);
    }
}
