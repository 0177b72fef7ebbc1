use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::scalar::Scalar;
use crate::seed::rng_for;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample<S> {
    pub features: Tensor<S>,
    pub label: usize,
}

/// Gaussian-cluster dataset recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub class_center_scale: f64,
    pub within_class_stddev: f64,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("input_dim", self.input_dim),
            ("train_per_class", self.train_per_class),
            ("test_per_class", self.test_per_class),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("dataset {name} must be >= 1")));
            }
        }
        if !(self.within_class_stddev > 0.0) || !self.within_class_stddev.is_finite() {
            return Err(Error::Config("within_class_stddev must be > 0".into()));
        }
        if !(self.class_center_scale >= 0.0) || !self.class_center_scale.is_finite() {
            return Err(Error::Config("class_center_scale must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<S> {
    pub train: Vec<LabeledSample<S>>,
    pub test: Vec<LabeledSample<S>>,
    /// Per-class cluster centre, indexed by label.
    pub centers: Vec<Tensor<S>>,
}

impl<S: Scalar> Dataset<S> {
    pub fn num_classes(&self) -> usize {
        self.centers.len()
    }
}

const CENTERS: u64 = 0;
const TRAIN: u64 = 1;
const TEST: u64 = 2;

/// Samples `center_c + N(0, σ²I)` per class; train and test use separate
/// random streams. Samples are ordered by class, then draw index.
pub fn generate_dataset<S: Scalar>(spec: &DatasetSpec) -> Result<Dataset<S>> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, &[CENTERS]);
    let scale = spec.class_center_scale;
    let centers: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.input_dim)
                .map(|_| {
                    if scale > 0.0 {
                        rng.random_range(-scale..=scale)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();

    let draw = |stream: u64, per_class: usize| -> Vec<LabeledSample<S>> {
        let mut rng = rng_for(spec.seed, &[stream]);
        let mut out = Vec::with_capacity(per_class * spec.num_classes);
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..per_class {
                let x: Vec<S> = center
                    .iter()
                    .map(|&m| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        S::lit(m + spec.within_class_stddev * z)
                    })
                    .collect();
                out.push(LabeledSample {
                    features: Tensor::vector(x),
                    label,
                });
            }
        }
        out
    };

    Ok(Dataset {
        train: draw(TRAIN, spec.train_per_class),
        test: draw(TEST, spec.test_per_class),
        centers: centers
            .into_iter()
            .map(|c| Tensor::vector(c.into_iter().map(S::lit).collect()))
            .collect(),
    })
}

/// Stacks sample feature vectors into a `[n, dim]` matrix.
pub fn stack_features<S: Scalar>(samples: &[&LabeledSample<S>], dim: usize) -> Result<Tensor<S>> {
    let rows: Vec<&[S]> = samples.iter().map(|s| s.features.data()).collect();
    Tensor::from_rows(&rows, dim)
}
