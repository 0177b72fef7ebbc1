//! A simulated client: local prototypes, feature translation of previous
//! classes, and the local training round.

mod prototype;

use std::collections::BTreeSet;

use rand::seq::{index, SliceRandom};

pub use prototype::{
    compute_prototypes, cosine_relation, select_base_class, translate_features, BaseClassRule,
    PrototypeEntry, PrototypeList,
};
pub(crate) use prototype::prototypes_from_features;

use crate::data::{stack_features, LabeledSample, Task};
use crate::error::{Error, Result};
use crate::nn::{apply_sgd, forward_features, loss_and_grads, serialized_len, ModelParams, Tensor};
use crate::scalar::Scalar;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState<S> {
    pub client_id: usize,
    pub params: ModelParams<S>,
    pub prototypes: PrototypeList<S>,
    /// Classes of all earlier tasks of this client.
    pub seen_classes: BTreeSet<usize>,
    pub current_task: usize,
}

impl<S: Scalar> ClientState<S> {
    pub fn new(client_id: usize, params: ModelParams<S>) -> Self {
        Self {
            client_id,
            params,
            prototypes: PrototypeList::new(),
            seen_classes: BTreeSet::new(),
            current_task: 0,
        }
    }

    /// Enters task `t`, moving the classes of the finished task into the
    /// previous-class set.
    pub fn begin_task(&mut self, t: usize, finished_classes: impl IntoIterator<Item = usize>) {
        self.seen_classes.extend(finished_classes);
        self.current_task = t;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate<S> {
    pub client_id: usize,
    pub params: ModelParams<S>,
    /// Prototypes of the current task's classes; empty when not uploaded.
    pub prototypes: PrototypeList<S>,
    pub num_samples: usize,
    pub bytes_uploaded: usize,
}

/// Local optimisation settings for one round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalHyper<S> {
    pub epochs: usize,
    pub lr: S,
    pub batch_size: usize,
    /// Pseudo features per previous class per epoch; `None` matches the mean
    /// per-class count of real current-task samples.
    pub pseudo_per_class: Option<usize>,
    pub train_extractor: bool,
    pub translate: bool,
    pub base_rule: BaseClassRule,
    pub upload_prototypes: bool,
}

/// Translation plan for one previous class.
struct Replay<S> {
    class: usize,
    base: usize,
    shift_from: Tensor<S>,
    shift_to: Tensor<S>,
    count: usize,
}

#[derive(Clone, Copy)]
enum Item {
    Real(usize),
    Pseudo(usize),
}

const TRAIN_STREAM: u64 = 1;
const PSEUDO_STREAM: u64 = 2;

/// One round of local work on the active task.
///
/// Order of operations: stored prototypes of classes also present in
/// `global_prototypes` are replaced by the global ones; prototypes of the
/// current task's classes are recomputed with the received extractor; then,
/// from the second task on and when translation is enabled, every previous
/// class gets a base class and pseudo features are regenerated each epoch by
/// translating real base-class features. Training is mini-batch SGD on real
/// plus pseudo features.
pub fn local_train_round<S: Scalar>(
    mut state: ClientState<S>,
    task: &Task<S>,
    global_prototypes: Option<&PrototypeList<S>>,
    hyper: &LocalHyper<S>,
    seed: u64,
) -> Result<(ClientState<S>, ClientUpdate<S>)> {
    if task.samples.is_empty() {
        return Err(Error::Argument(format!(
            "client {} has no samples for task {}",
            state.client_id, task.index
        )));
    }
    if hyper.batch_size == 0 {
        return Err(Error::Argument("batch_size must be >= 1".into()));
    }
    if let Some(c) = task.classes.iter().find(|c| state.seen_classes.contains(c)) {
        return Err(Error::Internal(format!(
            "class {c} of task {} was already learned by client {}",
            task.index, state.client_id
        )));
    }

    if let Some(global) = global_prototypes {
        state.prototypes.overwrite_overlapping(global);
    }

    let refs: Vec<&LabeledSample<S>> = task.samples.iter().collect();
    let inputs = stack_features(&refs, state.params.input_dim())?;
    let labels: Vec<usize> = task.samples.iter().map(|s| s.label).collect();
    let frozen_features = forward_features(&state.params, &inputs)?;

    let fresh = prototypes_from_features(&frozen_features, &labels, task.index);
    for e in fresh.iter() {
        state.prototypes.insert(e.clone());
    }

    let replays = if task.index > 1 && hyper.translate {
        plan_replays(&state, &fresh, &labels, hyper)?
    } else {
        Vec::new()
    };

    let mut train_rng = rng_for(seed, &[TRAIN_STREAM]);
    let mut pseudo_rng = rng_for(seed, &[PSEUDO_STREAM]);
    let mut params = state.params.clone();
    let by_class = |class: usize| -> Vec<usize> {
        labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    };

    for _ in 0..hyper.epochs {
        let features = if hyper.train_extractor {
            forward_features(&params, &inputs)?
        } else {
            frozen_features.clone()
        };

        let mut pseudo_rows: Vec<Vec<S>> = Vec::new();
        let mut pseudo_labels: Vec<usize> = Vec::new();
        for plan in &replays {
            let pool = by_class(plan.base);
            let picked: Vec<usize> = index::sample(&mut pseudo_rng, pool.len(), plan.count)
                .into_iter()
                .map(|j| pool[j])
                .collect();
            let translated =
                translate_features(&features.select_rows(&picked), &plan.shift_from, &plan.shift_to)?;
            for r in 0..translated.rows() {
                pseudo_rows.push(translated.row(r).to_vec());
                pseudo_labels.push(plan.class);
            }
        }

        let mut items: Vec<Item> = (0..labels.len())
            .map(Item::Real)
            .chain((0..pseudo_rows.len()).map(Item::Pseudo))
            .collect();
        items.shuffle(&mut train_rng);

        for batch in items.chunks(hyper.batch_size) {
            let grads = if hyper.train_extractor {
                mixed_batch_grads(&params, &inputs, &labels, &pseudo_rows, &pseudo_labels, batch)?
            } else {
                let mut rows: Vec<&[S]> = Vec::with_capacity(batch.len());
                let mut ys = Vec::with_capacity(batch.len());
                for item in batch {
                    match *item {
                        Item::Real(i) => {
                            rows.push(features.row(i));
                            ys.push(labels[i]);
                        }
                        Item::Pseudo(j) => {
                            rows.push(&pseudo_rows[j]);
                            ys.push(pseudo_labels[j]);
                        }
                    }
                }
                let x = Tensor::from_rows(&rows, params.feature_dim())?;
                loss_and_grads(&params, &x, &ys, false, false)?.1
            };
            params = apply_sgd(&params, &grads, hyper.lr)?;
        }
    }

    let upload = if hyper.upload_prototypes {
        fresh
    } else {
        PrototypeList::new()
    };
    let bytes_uploaded = serialized_len(&params) + upload.wire_len();
    state.params = params.clone();
    let update = ClientUpdate {
        client_id: state.client_id,
        params,
        prototypes: upload,
        num_samples: task.samples.len(),
        bytes_uploaded,
    };
    Ok((state, update))
}

fn plan_replays<S: Scalar>(
    state: &ClientState<S>,
    fresh: &PrototypeList<S>,
    labels: &[usize],
    hyper: &LocalHyper<S>,
) -> Result<Vec<Replay<S>>> {
    let per_class = hyper.pseudo_per_class.unwrap_or_else(|| {
        let n = fresh.len().max(1);
        ((labels.len() as f64) / n as f64).round() as usize
    });
    if per_class == 0 || state.seen_classes.is_empty() {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(state.seen_classes.len());
    for &p in &state.seen_classes {
        let stored = state.prototypes.get(p).ok_or_else(|| {
            Error::Internal(format!(
                "client {} has no stored prototype for previous class {p}",
                state.client_id
            ))
        })?;
        let base = select_base_class(&stored.prototype, fresh, hyper.base_rule)?;
        let base_entry = fresh.get(base).expect("selected from fresh");
        out.push(Replay {
            class: p,
            base,
            shift_from: base_entry.prototype.clone(),
            shift_to: stored.prototype.clone(),
            count: per_class.min(base_entry.sample_count),
        });
    }
    Ok(out)
}

/// Gradient of the mean loss over a batch mixing raw samples (through the
/// extractor) and pseudo features (classifier only).
fn mixed_batch_grads<S: Scalar>(
    params: &ModelParams<S>,
    inputs: &Tensor<S>,
    labels: &[usize],
    pseudo_rows: &[Vec<S>],
    pseudo_labels: &[usize],
    batch: &[Item],
) -> Result<crate::nn::GradientSet<S>> {
    let (mut real_idx, mut real_y, mut fake_rows, mut fake_y) =
        (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for item in batch {
        match *item {
            Item::Real(i) => {
                real_idx.push(i);
                real_y.push(labels[i]);
            }
            Item::Pseudo(j) => {
                fake_rows.push(pseudo_rows[j].as_slice());
                fake_y.push(pseudo_labels[j]);
            }
        }
    }
    let total = S::lit(batch.len() as f64);
    let mut grads = crate::nn::GradientSet::zeros_like(params);
    if !real_idx.is_empty() {
        let x = inputs.select_rows(&real_idx);
        let (_, g) = loss_and_grads(params, &x, &real_y, true, false)?;
        grads = grads.add_scaled(&g, S::lit(real_idx.len() as f64) / total)?;
    }
    if !fake_rows.is_empty() {
        let f = Tensor::from_rows(&fake_rows, params.feature_dim())?;
        let (_, g) = loss_and_grads(params, &f, &fake_y, false, false)?;
        grads = grads.add_scaled(&g, S::lit(fake_rows.len() as f64) / total)?;
    }
    Ok(grads)
}
