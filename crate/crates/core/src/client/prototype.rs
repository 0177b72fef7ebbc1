//! Class prototypes (mean feature vectors) and their wire format.
//!
//! Prototype list wire format, little-endian, one record per entry in
//! ascending class order and no list header:
//!
//! ```text
//! u32 class_id, u32 sample_count, feature_dim × f64
//! ```

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::{stack_features, LabeledSample};
use crate::error::{Error, Result};
use crate::nn::wire::{put_f64, put_u32, Reader};
use crate::nn::{forward_features, ModelParams, Tensor};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeEntry<S> {
    pub class_id: usize,
    pub prototype: Tensor<S>,
    pub sample_count: usize,
    pub task_of_origin: usize,
}

/// At most one prototype per class, iterated in class order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PrototypeList<S> {
    entries: BTreeMap<usize, PrototypeEntry<S>>,
}

impl<S: Scalar> PrototypeList<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, entry: PrototypeEntry<S>) -> Option<PrototypeEntry<S>> {
        self.entries.insert(entry.class_id, entry)
    }

    pub fn get(&self, class_id: usize) -> Option<&PrototypeEntry<S>> {
        self.entries.get(&class_id)
    }

    pub fn contains(&self, class_id: usize) -> bool {
        self.entries.contains_key(&class_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &PrototypeEntry<S>> {
        self.entries.values()
    }

    pub fn class_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    /// Replaces entries for classes already present; others are ignored.
    pub fn overwrite_overlapping(&mut self, source: &PrototypeList<S>) {
        for (c, e) in &source.entries {
            if let Some(slot) = self.entries.get_mut(c) {
                *slot = e.clone();
            }
        }
    }

    pub fn wire_len(&self) -> usize {
        self.iter().map(|e| 8 + 8 * e.prototype.len()).sum()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(self.wire_len());
        for e in self.iter() {
            put_u32(&mut buf, e.class_id);
            put_u32(&mut buf, e.sample_count);
            put_f64(&mut buf, e.prototype.data());
        }
        buf
    }

    /// Inverse of [`encode`](Self::encode); the receiver supplies the feature
    /// width and stamps `task` as origin.
    pub fn decode(bytes: &[u8], feature_dim: usize, task: usize) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let mut out = Self::new();
        while r.remaining() > 0 {
            let at = r.offset();
            let class_id = r.u32("class id")?;
            let sample_count = r.u32("sample count")?;
            let v = r.f64s(feature_dim, "prototype")?;
            if sample_count == 0 {
                return Err(Error::Format {
                    offset: at + 4,
                    reason: format!("class {class_id} has zero sample count"),
                });
            }
            let dup = out.insert(PrototypeEntry {
                class_id,
                prototype: Tensor::vector(v),
                sample_count,
                task_of_origin: task,
            });
            if dup.is_some() {
                return Err(Error::Format {
                    offset: at,
                    reason: format!("duplicate class {class_id}"),
                });
            }
        }
        Ok(out)
    }
}

impl<S> FromIterator<PrototypeEntry<S>> for PrototypeList<S> {
    fn from_iter<I: IntoIterator<Item = PrototypeEntry<S>>>(iter: I) -> Self {
        Self {
            entries: iter.into_iter().map(|e| (e.class_id, e)).collect(),
        }
    }
}

/// Per-class means of precomputed feature rows.
pub(crate) fn prototypes_from_features<S: Scalar>(
    features: &Tensor<S>,
    labels: &[usize],
    task: usize,
) -> PrototypeList<S> {
    let dim = features.cols();
    let mut sums: BTreeMap<usize, (Vec<S>, usize)> = BTreeMap::new();
    for (r, &label) in labels.iter().enumerate() {
        let (acc, n) = sums
            .entry(label)
            .or_insert_with(|| (vec![S::zero(); dim], 0));
        for (a, &v) in acc.iter_mut().zip(features.row(r)) {
            *a = *a + v;
        }
        *n += 1;
    }
    sums.into_iter()
        .map(|(class_id, (sum, n))| {
            let inv = S::one() / S::lit(n as f64);
            PrototypeEntry {
                class_id,
                prototype: Tensor::vector(sum.into_iter().map(|v| v * inv).collect()),
                sample_count: n,
                task_of_origin: task,
            }
        })
        .collect()
}

/// Mean feature vector of each class present in `samples`.
pub fn compute_prototypes<S: Scalar>(
    params: &ModelParams<S>,
    samples: &[LabeledSample<S>],
    task: usize,
) -> Result<PrototypeList<S>> {
    if samples.is_empty() {
        return Err(Error::Argument("no samples to compute prototypes from".into()));
    }
    let refs: Vec<&LabeledSample<S>> = samples.iter().collect();
    let x = stack_features(&refs, params.input_dim())?;
    let f = forward_features(params, &x)?;
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    Ok(prototypes_from_features(&f, &labels, task))
}

/// Cosine similarity `a·b / (‖a‖‖b‖)`.
pub fn cosine_relation<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<S> {
    if a.len() != b.len() {
        return Err(Error::dim("cosine relation", a.len(), b.len()));
    }
    let na = a.norm_sq().sqrt();
    let nb = b.norm_sq().sqrt();
    if na == S::zero() || nb == S::zero() {
        return Err(Error::Numeric(
            "cosine relation undefined for a zero vector".into(),
        ));
    }
    let c = a.dot(b) / (na * nb);
    Ok(c.max(-S::one()).min(S::one()))
}

/// How the base class for translating a previous class is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseClassRule {
    /// Most similar new class (nearest in angle).
    #[default]
    ArgmaxSimilarity,
    /// Least similar new class; the formula read literally.
    LiteralArgmin,
}

/// Picks the new class whose prototype relates best to `prev_proto` under
/// `rule`; ties go to the smallest class id.
pub fn select_base_class<S: Scalar>(
    prev_proto: &Tensor<S>,
    candidates: &PrototypeList<S>,
    rule: BaseClassRule,
) -> Result<usize> {
    let mut best: Option<(usize, S)> = None;
    for e in candidates.iter() {
        let sim = cosine_relation(prev_proto, &e.prototype)?;
        let better = match (best, rule) {
            (None, _) => true,
            (Some((_, b)), BaseClassRule::ArgmaxSimilarity) => sim > b,
            (Some((_, b)), BaseClassRule::LiteralArgmin) => sim < b,
        };
        if better {
            best = Some((e.class_id, sim));
        }
    }
    best.map(|(c, _)| c)
        .ok_or_else(|| Error::Argument("no candidate base classes".into()))
}

/// Pseudo features of a previous class: each row `f + μ_p − μ_n`.
pub fn translate_features<S: Scalar>(
    real_features: &Tensor<S>,
    mu_n: &Tensor<S>,
    mu_p: &Tensor<S>,
) -> Result<Tensor<S>> {
    let dim = real_features.cols();
    if mu_n.len() != dim || mu_p.len() != dim {
        return Err(Error::dim(
            "feature translation",
            dim,
            format!("prototypes of width {} and {}", mu_n.len(), mu_p.len()),
        ));
    }
    let mut out = real_features.clone();
    for r in 0..out.rows() {
        for ((v, &p), &n) in out.row_mut(r).iter_mut().zip(mu_p.data()).zip(mu_n.data()) {
            *v = *v + p - n;
        }
    }
    Ok(out)
}
