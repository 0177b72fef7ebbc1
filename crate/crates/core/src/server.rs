//! Server-side aggregation: weight averaging and the global prototype
//! knowledge base.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::client::{ClientUpdate, PrototypeEntry, PrototypeList};
use crate::error::{Error, Result};
use crate::nn::{
    average_params, average_params_weighted, grow_classifier, serialized_len, ModelParams, Tensor,
};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KbEntry<S> {
    pub prototype: Tensor<S>,
    /// Σ_k |D_{k,c}| over the clients that uploaded the class in the last fusion.
    pub total_count: usize,
    /// Task during which the class first entered the knowledge base.
    pub origin_task: usize,
    pub last_fused_task: usize,
}

/// Global class → prototype map.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct KnowledgeBase<S> {
    pub entries: BTreeMap<usize, KbEntry<S>>,
}

impl<S: Scalar> KnowledgeBase<S> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, class_id: usize) -> Option<&KbEntry<S>> {
        self.entries.get(&class_id)
    }

    pub fn to_prototype_list(&self) -> PrototypeList<S> {
        self.entries
            .iter()
            .map(|(&class_id, e)| PrototypeEntry {
                class_id,
                prototype: e.prototype.clone(),
                sample_count: e.total_count,
                task_of_origin: e.origin_task,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GlobalState<S> {
    pub params: ModelParams<S>,
    pub kb: KnowledgeBase<S>,
    pub round: usize,
}

/// Grows every head to the widest one with zero rows so shapes agree.
pub fn align_heads<S: Scalar>(params: &[ModelParams<S>]) -> Result<Vec<ModelParams<S>>> {
    let widest = params.iter().map(ModelParams::num_classes).max().unwrap_or(0);
    params
        .iter()
        .map(|p| grow_classifier(p, widest, S::zero(), 0))
        .collect()
}

/// FedAvg over client weights after head alignment; unweighted (1/K) unless
/// `weighted`, which uses each client's sample count.
pub fn fedavg<S: Scalar>(updates: &[ClientUpdate<S>], weighted: bool) -> Result<ModelParams<S>> {
    if updates.is_empty() {
        return Err(Error::Argument("fedavg needs at least one update".into()));
    }
    let params: Vec<ModelParams<S>> = updates.iter().map(|u| u.params.clone()).collect();
    let aligned = align_heads(&params)?;
    if weighted {
        let w: Vec<S> = updates.iter().map(|u| S::lit(u.num_samples as f64)).collect();
        average_params_weighted(&aligned, &w)
    } else {
        average_params(&aligned)
    }
}

/// Count-weighted horizontal mean per uploaded class, blended over time with
/// weight `beta` for classes that entered the knowledge base in an earlier
/// task. Classes nobody uploaded are carried over unchanged.
pub fn fuse_prototypes<S: Scalar>(
    kb: &KnowledgeBase<S>,
    updates: &[ClientUpdate<S>],
    t: usize,
    beta: S,
) -> Result<KnowledgeBase<S>> {
    if !(beta >= S::zero() && beta <= S::one()) {
        return Err(Error::Argument(format!("beta {beta} outside [0, 1]")));
    }
    let mut grouped: BTreeMap<usize, Vec<&PrototypeEntry<S>>> = BTreeMap::new();
    for u in updates {
        for e in u.prototypes.iter() {
            if e.sample_count == 0 {
                return Err(Error::Argument(format!(
                    "client {} uploaded class {} with zero samples",
                    u.client_id, e.class_id
                )));
            }
            grouped.entry(e.class_id).or_default().push(e);
        }
    }

    let mut next = kb.clone();
    for (class, uploads) in grouped {
        let total: usize = uploads.iter().map(|e| e.sample_count).sum();
        if total == 0 {
            return Err(Error::Argument(format!("class {class} has zero total count")));
        }
        let dim = uploads[0].prototype.len();
        let mut mean = vec![S::zero(); dim];
        for e in &uploads {
            if e.prototype.len() != dim {
                return Err(Error::dim(format!("prototype of class {class}"), dim, e.prototype.len()));
            }
            let w = S::lit(e.sample_count as f64) / S::lit(total as f64);
            for (m, &v) in mean.iter_mut().zip(e.prototype.data()) {
                *m = *m + w * v;
            }
        }
        let entry = match kb.get(class) {
            Some(prev) if prev.origin_task < t => {
                if prev.prototype.len() != dim {
                    return Err(Error::dim(format!("stored prototype of class {class}"), dim, prev.prototype.len()));
                }
                let blended = mean
                    .iter()
                    .zip(prev.prototype.data())
                    .map(|(&m, &old)| beta * m + (S::one() - beta) * old)
                    .collect();
                KbEntry {
                    prototype: Tensor::vector(blended),
                    total_count: total,
                    origin_task: prev.origin_task,
                    last_fused_task: t,
                }
            }
            Some(prev) => KbEntry {
                prototype: Tensor::vector(mean),
                total_count: total,
                origin_task: prev.origin_task,
                last_fused_task: t,
            },
            None => KbEntry {
                prototype: Tensor::vector(mean),
                total_count: total,
                origin_task: t,
                last_fused_task: t,
            },
        };
        next.entries.insert(class, entry);
    }
    Ok(next)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution<S> {
    pub params: ModelParams<S>,
    pub prototypes: PrototypeList<S>,
    /// Bytes sent to one client.
    pub bytes_downloaded: usize,
}

/// Snapshot of the global model and knowledge base as sent to each client.
pub fn distribute<S: Scalar>(global: &GlobalState<S>) -> Distribution<S> {
    let prototypes = global.kb.to_prototype_list();
    let bytes_downloaded = serialized_len(&global.params) + prototypes.wire_len();
    Distribution {
        params: global.params.clone(),
        prototypes,
        bytes_downloaded,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn upload(client: usize, entries: &[(usize, Vec<f64>, usize)]) -> ClientUpdate<f64> {
        let params = ModelParams::init(2, &[3], 2, client as u64);
        ClientUpdate {
            client_id: client,
            params,
            prototypes: entries
                .iter()
                .map(|(c, v, n)| PrototypeEntry {
                    class_id: *c,
                    prototype: Tensor::vector(v.clone()),
                    sample_count: *n,
                    task_of_origin: 1,
                })
                .collect(),
            num_samples: 4,
            bytes_uploaded: 0,
        }
    }

    #[test]
    fn single_upload_becomes_entry() {
        let kb = KnowledgeBase::new();
        let next = fuse_prototypes(&kb, &[upload(0, &[(3, vec![1.0, 2.0], 5)])], 1, 0.5).unwrap();
        let e = next.get(3).unwrap();
        assert_eq!(e.prototype.data(), &[1.0, 2.0]);
        assert_eq!((e.total_count, e.origin_task), (5, 1));
    }

    #[test]
    fn beta_zero_keeps_previous() {
        let kb = fuse_prototypes(&KnowledgeBase::new(), &[upload(0, &[(1, vec![1.0, 1.0], 2)])], 1, 0.5)
            .unwrap();
        let next = fuse_prototypes(&kb, &[upload(1, &[(1, vec![9.0, -3.0], 4)])], 2, 0.0).unwrap();
        assert_eq!(next.get(1).unwrap().prototype.data(), &[1.0, 1.0]);
        assert_eq!(next.get(1).unwrap().last_fused_task, 2);
    }

    #[test]
    fn same_task_refusion_overwrites() {
        let kb = fuse_prototypes(&KnowledgeBase::new(), &[upload(0, &[(1, vec![1.0, 1.0], 2)])], 2, 0.5)
            .unwrap();
        let next = fuse_prototypes(&kb, &[upload(0, &[(1, vec![3.0, 3.0], 2)])], 2, 0.5).unwrap();
        assert_eq!(next.get(1).unwrap().prototype.data(), &[3.0, 3.0]);
    }

    #[test]
    fn absent_classes_carry_forward() {
        let kb = fuse_prototypes(&KnowledgeBase::new(), &[upload(0, &[(1, vec![1.0, 1.0], 2)])], 1, 0.5)
            .unwrap();
        let next = fuse_prototypes(&kb, &[upload(0, &[(2, vec![0.0, 1.0], 2)])], 2, 0.5).unwrap();
        assert_eq!(next.get(1), kb.get(1));
        assert_eq!(next.len(), 2);
    }

    #[test]
    fn invalid_inputs() {
        assert!(fedavg::<f64>(&[], false).is_err());
        let kb = KnowledgeBase::new();
        assert!(fuse_prototypes(&kb, &[upload(0, &[(1, vec![1.0, 1.0], 0)])], 1, 0.5).is_err());
        assert!(fuse_prototypes(&kb, &[], 1, 1.5).is_err());
    }

    #[test]
    fn fedavg_aligns_heads_with_zero_rows() {
        let mut a = upload(0, &[]);
        let b = upload(1, &[]);
        a.params = grow_classifier(&a.params, 4, 0.5, 1).unwrap();
        let avg = fedavg(&[a.clone(), b.clone()], false).unwrap();
        assert_eq!(avg.num_classes(), 4);
        let w = avg.classifier().weight.data();
        // rows 2..4 exist only on client 0, so the mean halves them
        for (x, y) in w[6..].iter().zip(&a.params.classifier().weight.data()[6..]) {
            assert!((x - y / 2.0).abs() < 1e-15);
        }
    }

    #[test]
    fn distribution_bytes() {
        let kb = fuse_prototypes(&KnowledgeBase::new(), &[upload(0, &[(1, vec![1.0, 1.0, 0.5], 2)])], 1, 0.5)
            .unwrap();
        let g = GlobalState {
            params: ModelParams::init(2, &[3], 2, 0),
            kb,
            round: 1,
        };
        let d = distribute(&g);
        assert_eq!(d.prototypes.len(), 1);
        assert_eq!(d.prototypes.get(1).unwrap().prototype, g.kb.get(1).unwrap().prototype);
        assert_eq!(
            d.bytes_downloaded,
            crate::nn::serialize_params(&g.params).len() + 8 + 3 * 8
        );
        let empty = distribute(&GlobalState {
            kb: KnowledgeBase::new(),
            ..g
        });
        assert!(empty.prototypes.is_empty());
    }
}
