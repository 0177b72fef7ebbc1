//! Reconstruction attacks used to score privacy.
//!
//! Gradient inversion: the attacker knows the model, the label and the
//! parameter gradients of a single-sample update, and descends on a dummy
//! input until its gradients match. The derivative of the matching loss with
//! respect to the dummy needs a mixed second derivative; it is obtained as a
//! central difference of the input gradient along the residual direction in
//! parameter space:
//!
//! ```text
//! ∇ₓ ½‖G(x) − g‖² = Jᵀv,   v = G(x) − g
//! Jᵀv ≈ (∇ₓL(θ + εv, x) − ∇ₓL(θ − εv, x)) / 2ε
//! ```
//!
//! Prototype inversion: the attacker only sees a class prototype and searches
//! for an input whose features land on it.
//!
//! Both use gradient descent with backtracking: a step that would raise the
//! loss is halved until it does not, so the loss sequence never increases.
//! ReLU units that are off at the dummy input pass no gradient, so descent can
//! stall in a flat region; the attack restarts from several seeded points and
//! keeps the run with the lowest attack loss (a quantity the attacker can
//! observe, unlike the reconstruction error).

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{extractor_vjp, forward_features, loss_and_grads, GradientSet, ModelParams, Tensor};
use crate::scalar::Scalar;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    /// Iterations per restart.
    pub iters: usize,
    /// Initial step size.
    pub lr: f64,
    pub seed: u64,
    /// Number of starting points; 0 is treated as 1.
    pub restarts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackResult<S> {
    pub target_client: usize,
    pub round: usize,
    pub reconstructed_input: Tensor<S>,
    pub ground_truth: Tensor<S>,
    pub mse: S,
    pub iterations_used: usize,
    /// Attack loss of the kept run, before the first step and after every
    /// accepted step.
    pub loss_history: Vec<S>,
}

const MAX_HALVINGS: usize = 60;
const GROWTH: f64 = 1.25;

/// Seeded standard-normal starting point `[1, input_dim]`.
pub fn attack_init<S: Scalar>(input_dim: usize, seed: u64) -> Tensor<S> {
    let mut rng = rng_for(seed, &[]);
    let data = (0..input_dim)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            S::lit(z)
        })
        .collect();
    Tensor::matrix(1, input_dim, data).expect("sized")
}

fn restart_seed(seed: u64, i: usize) -> u64 {
    if i == 0 {
        seed
    } else {
        crate::seed::derive_seed(seed, &[i as u64])
    }
}

/// Runs `descend` from every restart point and keeps the lowest final loss
/// (earliest restart on ties).
fn best_of<S: Scalar>(
    dim: usize,
    cfg: &AttackConfig,
    mut objective: impl FnMut(&Tensor<S>) -> Result<S>,
    mut gradient: impl FnMut(&Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Descent<S>> {
    let mut best: Option<Descent<S>> = None;
    for i in 0..cfg.restarts.max(1) {
        let x0 = attack_init(dim, restart_seed(cfg.seed, i));
        let run = descend(x0, cfg, &mut objective, &mut gradient)?;
        let better = match &best {
            None => true,
            Some(b) => run.final_loss() < b.final_loss(),
        };
        if better {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

struct Descent<S> {
    x: Tensor<S>,
    history: Vec<S>,
    iterations: usize,
}

impl<S: Scalar> Descent<S> {
    fn final_loss(&self) -> S {
        *self.history.last().expect("history starts with the initial loss")
    }
}

fn descend<S: Scalar>(
    x0: Tensor<S>,
    cfg: &AttackConfig,
    mut objective: impl FnMut(&Tensor<S>) -> Result<S>,
    mut gradient: impl FnMut(&Tensor<S>) -> Result<Tensor<S>>,
) -> Result<Descent<S>> {
    let mut x = x0;
    let mut loss = objective(&x)?;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite attack loss at iteration 0".into()));
    }
    let mut history = vec![loss];
    let mut step = S::lit(cfg.lr);
    let mut iterations = 0;
    for it in 0..cfg.iters {
        if loss == S::zero() {
            break;
        }
        let g = gradient(&x)?;
        if !g.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite attack gradient at iteration {it}"
            )));
        }
        let mut accepted = false;
        for _ in 0..MAX_HALVINGS {
            let cand = x.add_scaled(&g, -step)?;
            let cand_loss = objective(&cand)?;
            if cand_loss.is_finite() && cand_loss <= loss {
                x = cand;
                loss = cand_loss;
                step = step * S::lit(GROWTH);
                accepted = true;
                break;
            }
            step = step * S::lit(0.5);
        }
        if !accepted {
            break;
        }
        history.push(loss);
        iterations = it + 1;
    }
    Ok(Descent {
        x,
        history,
        iterations,
    })
}

fn param_grads<S: Scalar>(params: &ModelParams<S>, x: &Tensor<S>, label: usize) -> Result<GradientSet<S>> {
    Ok(loss_and_grads(params, x, &[label], true, true)?.1)
}

/// Reconstructs a single training input from its parameter gradients.
///
/// `observed` must come from a one-sample batch through the full network
/// (extractor included). `ground_truth` is only used to score the result.
pub fn gradient_inversion_attack<S: Scalar>(
    params: &ModelParams<S>,
    observed: &GradientSet<S>,
    label: usize,
    ground_truth: &Tensor<S>,
    cfg: &AttackConfig,
    target: (usize, usize),
) -> Result<AttackResult<S>> {
    let dim = params.input_dim();
    if ground_truth.len() != dim {
        return Err(Error::dim("attack ground truth", dim, ground_truth.len()));
    }
    let objective = |x: &Tensor<S>| -> Result<S> {
        Ok(param_grads(params, x, label)?.sub(observed)?.norm_sq())
    };
    let gradient = |x: &Tensor<S>| -> Result<Tensor<S>> {
        let v = param_grads(params, x, label)?.sub(observed)?;
        let norm = v.norm_sq().sqrt();
        if norm == S::zero() {
            return Ok(Tensor::zeros(x.shape().to_vec()));
        }
        let scale = S::one().max(params_scale(params));
        let eps = S::lit(1e-6) * scale / norm;
        let plus = param_grads(&params.offset(&v, eps)?, x, label)?;
        let minus = param_grads(&params.offset(&v, -eps)?, x, label)?;
        let (gp, gm) = (plus.input.expect("requested"), minus.input.expect("requested"));
        // d/dx ‖v‖² = 2 Jᵀv
        gp.add_scaled(&gm, -S::one())
            .map(|d| d.map(|e| e / eps))
    };
    let out = best_of(dim, cfg, objective, gradient)?;
    finish(out, ground_truth, target)
}

fn params_scale<S: Scalar>(params: &ModelParams<S>) -> S {
    let mut g = GradientSet::zeros_like(params);
    g.extractor = params.extractor().to_vec();
    g.classifier = params.classifier().clone();
    (g.norm_sq() / S::lit(params.param_count().max(1) as f64)).sqrt()
}

/// Searches for an input whose extracted features match `prototype`.
pub fn prototype_inversion_attack<S: Scalar>(
    params: &ModelParams<S>,
    prototype: &Tensor<S>,
    ground_truth: &Tensor<S>,
    cfg: &AttackConfig,
    target: (usize, usize),
) -> Result<AttackResult<S>> {
    let dim = params.input_dim();
    if prototype.len() != params.feature_dim() {
        return Err(Error::dim("prototype", params.feature_dim(), prototype.len()));
    }
    if ground_truth.len() != dim {
        return Err(Error::dim("attack ground truth", dim, ground_truth.len()));
    }
    let target_row = Tensor::matrix(1, prototype.len(), prototype.data().to_vec())?;
    let objective = |x: &Tensor<S>| -> Result<S> {
        let f = forward_features(params, x)?;
        Ok(f.add_scaled(&target_row, -S::one())?.norm_sq())
    };
    let gradient = |x: &Tensor<S>| -> Result<Tensor<S>> {
        let f = forward_features(params, x)?;
        let upstream = f.add_scaled(&target_row, -S::one())?.map(|v| v + v);
        Ok(extractor_vjp(params, x, &upstream)?.1)
    };
    let out = best_of(dim, cfg, objective, gradient)?;
    finish(out, ground_truth, target)
}

fn finish<S: Scalar>(
    out: Descent<S>,
    ground_truth: &Tensor<S>,
    (target_client, round): (usize, usize),
) -> Result<AttackResult<S>> {
    let reconstructed_input = Tensor::vector(out.x.into_data());
    let truth = Tensor::vector(ground_truth.data().to_vec());
    let mse = reconstructed_input.mse(&truth)?;
    Ok(AttackResult {
        target_client,
        round,
        reconstructed_input,
        ground_truth: truth,
        mse,
        iterations_used: out.iterations,
        loss_history: out.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grow_classifier;

    fn cfg(iters: usize) -> AttackConfig {
        AttackConfig {
            iters,
            lr: 0.1,
            seed: 3,
            restarts: 1,
        }
    }

    #[test]
    fn zero_iterations_returns_the_seeded_start() {
        let p = grow_classifier(&ModelParams::<f64>::init(4, &[5], 0, 1), 3, 0.5, 2).unwrap();
        let truth = Tensor::matrix(1, 4, vec![0.5, -0.5, 1.0, 0.0]).unwrap();
        let (_, g) = loss_and_grads(&p, &truth, &[1], true, false).unwrap();
        let r = gradient_inversion_attack(&p, &g, 1, &truth, &cfg(0), (0, 1)).unwrap();
        let start = attack_init::<f64>(4, 3);
        assert_eq!(r.reconstructed_input.data(), start.data());
        assert_eq!(r.mse, start.mse(&truth).unwrap());
        assert_eq!(r.iterations_used, 0);
    }

    #[test]
    fn gradients_of_the_start_point_are_a_fixed_point() {
        let p = grow_classifier(&ModelParams::<f64>::init(4, &[5], 0, 1), 3, 0.5, 2).unwrap();
        let start = attack_init::<f64>(4, 3);
        let (_, g) = loss_and_grads(&p, &start, &[2], true, false).unwrap();
        let r = gradient_inversion_attack(&p, &g, 2, &start, &cfg(50), (0, 1)).unwrap();
        assert_eq!(r.loss_history[0], 0.0);
        assert_eq!(r.reconstructed_input.data(), start.data());
        assert_eq!(r.mse, 0.0);
    }
}
