//! Two-part network: a ReLU multilayer perceptron as feature extractor and a
//! single linear classification head on top of it.
//!
//! Gradients are derived by hand. The classifier head is the only part whose
//! shape changes during a run (it grows as new classes arrive).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{affine, back_project, column_sum, outer_sum, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::rng_for;

/// Affine layer, weight `[out, in]`, bias `[out]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense<S> {
    pub weight: Tensor<S>,
    pub bias: Tensor<S>,
}

impl<S: Scalar> Dense<S> {
    pub fn new(weight: Tensor<S>, bias: Tensor<S>) -> Result<Self> {
        if weight.shape().len() != 2 {
            return Err(Error::dim("dense weight rank", 2, weight.shape().len()));
        }
        if bias.shape() != [weight.rows()] {
            return Err(Error::dim(
                "dense bias",
                weight.rows(),
                format!("{:?}", bias.shape()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![out, inp]),
            bias: Tensor::zeros(vec![out]),
        }
    }

    /// Uniform(−1/√fan_in, 1/√fan_in) for weights and biases.
    pub fn init<R: Rng>(out: usize, inp: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (inp.max(1) as f64).sqrt();
        let mut draw = |n: usize| -> Vec<S> {
            (0..n)
                .map(|_| S::lit(rng.random_range(-bound..=bound)))
                .collect()
        };
        let w = draw(out * inp);
        let b = draw(out);
        Self {
            weight: Tensor::matrix(out, inp, w).expect("sized"),
            bias: Tensor::vector(b),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn congruent(&self, other: &Self) -> bool {
        self.weight.same_shape(&other.weight) && self.bias.same_shape(&other.bias)
    }

    fn zip_map(&self, other: &Self, f: impl Fn(S, S) -> S + Copy) -> Self {
        let z = |a: &Tensor<S>, b: &Tensor<S>| {
            Tensor::new(
                a.shape().to_vec(),
                a.data()
                    .iter()
                    .zip(b.data())
                    .map(|(&x, &y)| f(x, y))
                    .collect(),
            )
            .expect("congruent")
        };
        Self {
            weight: z(&self.weight, &other.weight),
            bias: z(&self.bias, &other.bias),
        }
    }

    fn values(&self) -> impl Iterator<Item = &S> {
        self.weight.data().iter().chain(self.bias.data())
    }
}

/// Network weights: extractor layers F followed by classifier head L.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams<S> {
    extractor: Vec<Dense<S>>,
    classifier: Dense<S>,
}

/// One gradient per parameter, plus optionally the gradient with respect to
/// whatever was fed in as input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet<S> {
    pub extractor: Vec<Dense<S>>,
    pub classifier: Dense<S>,
    pub input: Option<Tensor<S>>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn new(extractor: Vec<Dense<S>>, classifier: Dense<S>) -> Result<Self> {
        for (i, pair) in extractor.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(
                    format!("extractor layer {}", i + 1),
                    pair[0].out_dim(),
                    pair[1].in_dim(),
                ));
            }
        }
        if let Some(last) = extractor.last() {
            if last.out_dim() != classifier.in_dim() {
                return Err(Error::dim(
                    "classifier input",
                    last.out_dim(),
                    classifier.in_dim(),
                ));
            }
        }
        Ok(Self {
            extractor,
            classifier,
        })
    }

    /// Seeded MLP: `input -> widths[0] -> ... -> widths[last]` with ReLU after
    /// every extractor layer, then a head of `num_classes` rows.
    pub fn init(input_dim: usize, widths: &[usize], num_classes: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, &[]);
        let mut extractor = Vec::with_capacity(widths.len());
        let mut prev = input_dim;
        for &w in widths {
            extractor.push(Dense::init(w, prev, &mut rng));
            prev = w;
        }
        let classifier = Dense::init(num_classes, prev, &mut rng);
        Self {
            extractor,
            classifier,
        }
    }

    pub fn extractor(&self) -> &[Dense<S>] {
        &self.extractor
    }

    pub fn classifier(&self) -> &Dense<S> {
        &self.classifier
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier.in_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.extractor
            .first()
            .map_or(self.feature_dim(), Dense::in_dim)
    }

    pub fn congruent(&self, other: &Self) -> bool {
        self.extractor.len() == other.extractor.len()
            && self
                .extractor
                .iter()
                .zip(&other.extractor)
                .all(|(a, b)| a.congruent(b))
            && self.classifier.congruent(&other.classifier)
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<S>> {
        self.extractor.iter().chain(std::iter::once(&self.classifier))
    }

    pub fn param_count(&self) -> usize {
        self.layers()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers().flat_map(Dense::values).all(|v| v.is_finite())
    }

    /// `self + scale * direction`, used for perturbing along a gradient direction.
    pub fn offset(&self, direction: &GradientSet<S>, scale: S) -> Result<Self> {
        self.check_grads(direction)?;
        Ok(self.combine(direction, |p, g| p + scale * g))
    }

    fn check_grads(&self, grads: &GradientSet<S>) -> Result<()> {
        let ok = self.extractor.len() == grads.extractor.len()
            && self
                .extractor
                .iter()
                .zip(&grads.extractor)
                .all(|(a, b)| a.congruent(b))
            && self.classifier.congruent(&grads.classifier);
        if ok {
            Ok(())
        } else {
            Err(Error::dim(
                "gradient set",
                "shape of parameters",
                "incongruent gradient set",
            ))
        }
    }

    fn combine(&self, grads: &GradientSet<S>, f: impl Fn(S, S) -> S + Copy) -> Self {
        Self {
            extractor: self
                .extractor
                .iter()
                .zip(&grads.extractor)
                .map(|(p, g)| p.zip_map(g, f))
                .collect(),
            classifier: self.classifier.zip_map(&grads.classifier, f),
        }
    }
}

impl<S: Scalar> GradientSet<S> {
    pub fn zeros_like(params: &ModelParams<S>) -> Self {
        Self {
            extractor: params
                .extractor
                .iter()
                .map(|l| Dense::zeros(l.out_dim(), l.in_dim()))
                .collect(),
            classifier: Dense::zeros(params.num_classes(), params.feature_dim()),
            input: None,
        }
    }

    fn layers(&self) -> impl Iterator<Item = &Dense<S>> {
        self.extractor.iter().chain(std::iter::once(&self.classifier))
    }

    fn zip_layers(&self, other: &Self, f: impl Fn(S, S) -> S + Copy) -> Result<Self> {
        let ok = self.extractor.len() == other.extractor.len()
            && self
                .extractor
                .iter()
                .zip(&other.extractor)
                .all(|(a, b)| a.congruent(b))
            && self.classifier.congruent(&other.classifier);
        if !ok {
            return Err(Error::dim("gradient sets", "congruent", "incongruent"));
        }
        Ok(Self {
            extractor: self
                .extractor
                .iter()
                .zip(&other.extractor)
                .map(|(a, b)| a.zip_map(b, f))
                .collect(),
            classifier: self.classifier.zip_map(&other.classifier, f),
            input: None,
        })
    }

    /// `self + scale * other` over parameter gradients; the input gradient is dropped.
    pub fn add_scaled(&self, other: &Self, scale: S) -> Result<Self> {
        self.zip_layers(other, |a, b| a + scale * b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_layers(other, |a, b| a - b)
    }

    pub fn scale(&self, factor: S) -> Self {
        let f = |d: &Dense<S>| Dense {
            weight: d.weight.map(|v| v * factor),
            bias: d.bias.map(|v| v * factor),
        };
        Self {
            extractor: self.extractor.iter().map(f).collect(),
            classifier: f(&self.classifier),
            input: self.input.as_ref().map(|t| t.map(|v| v * factor)),
        }
    }

    /// Squared Euclidean norm over parameter gradients.
    pub fn norm_sq(&self) -> S {
        self.layers()
            .flat_map(Dense::values)
            .fold(S::zero(), |acc, &v| acc + v * v)
    }

    pub fn is_finite(&self) -> bool {
        self.layers().flat_map(Dense::values).all(|v| v.is_finite())
    }

    pub fn extractor_is_zero(&self) -> bool {
        self.extractor
            .iter()
            .flat_map(Dense::values)
            .all(|v| *v == S::zero())
    }
}

struct ForwardCache<S> {
    /// activations[0] is the input; activations[i+1] is the output of layer i.
    activations: Vec<Tensor<S>>,
}

fn check_input<S: Scalar>(width: usize, batch: &Tensor<S>, context: &str) -> Result<()> {
    if batch.shape().len() != 2 {
        return Err(Error::dim(
            format!("{context} rank"),
            2,
            batch.shape().len(),
        ));
    }
    if batch.cols() != width {
        return Err(Error::dim(context, width, batch.cols()));
    }
    Ok(())
}

fn relu_in_place<S: Scalar>(t: &mut Tensor<S>) {
    for v in t.data_mut() {
        if *v < S::zero() {
            *v = S::zero();
        }
    }
}

fn forward_cached<S: Scalar>(params: &ModelParams<S>, batch: &Tensor<S>) -> Result<ForwardCache<S>> {
    let mut activations = Vec::with_capacity(params.extractor.len() + 1);
    activations.push(batch.clone());
    for (i, layer) in params.extractor.iter().enumerate() {
        let x = activations.last().expect("non-empty");
        check_input(layer.in_dim(), x, &format!("extractor layer {i} input"))?;
        let mut z = affine(x, &layer.weight, &layer.bias);
        relu_in_place(&mut z);
        activations.push(z);
    }
    if params.extractor.is_empty() {
        check_input(params.feature_dim(), batch, "feature input")?;
    }
    Ok(ForwardCache { activations })
}

/// Feature vectors `f(x)` for a `[B, input_dim]` batch.
pub fn forward_features<S: Scalar>(params: &ModelParams<S>, batch: &Tensor<S>) -> Result<Tensor<S>> {
    let mut cache = forward_cached(params, batch)?;
    Ok(cache.activations.pop().expect("non-empty"))
}

/// Classifier logits for `[B, feature_dim]` features (real or translated).
pub fn forward_logits<S: Scalar>(params: &ModelParams<S>, features: &Tensor<S>) -> Result<Tensor<S>> {
    check_input(params.feature_dim(), features, "classifier input")?;
    Ok(affine(features, &params.classifier.weight, &params.classifier.bias))
}

/// Backpropagates `grad_features` (∂loss/∂f(x)) through the extractor.
///
/// Returns per-layer gradients and ∂loss/∂x.
pub fn extractor_vjp<S: Scalar>(
    params: &ModelParams<S>,
    input: &Tensor<S>,
    grad_features: &Tensor<S>,
) -> Result<(Vec<Dense<S>>, Tensor<S>)> {
    let cache = forward_cached(params, input)?;
    let out = cache.activations.last().expect("non-empty");
    if grad_features.shape() != out.shape() {
        return Err(Error::dim(
            "feature gradient",
            format!("{:?}", out.shape()),
            format!("{:?}", grad_features.shape()),
        ));
    }
    Ok(backprop_extractor(params, &cache, grad_features.clone()))
}

fn backprop_extractor<S: Scalar>(
    params: &ModelParams<S>,
    cache: &ForwardCache<S>,
    mut upstream: Tensor<S>,
) -> (Vec<Dense<S>>, Tensor<S>) {
    let mut grads = Vec::with_capacity(params.extractor.len());
    for (i, layer) in params.extractor.iter().enumerate().rev() {
        // post-ReLU activation > 0 iff pre-activation > 0
        let post = &cache.activations[i + 1];
        for (g, &a) in upstream.data_mut().iter_mut().zip(post.data()) {
            if a <= S::zero() {
                *g = S::zero();
            }
        }
        let prev = &cache.activations[i];
        grads.push(Dense {
            weight: outer_sum(&upstream, prev),
            bias: column_sum(&upstream),
        });
        upstream = back_project(&upstream, &layer.weight);
    }
    grads.reverse();
    (grads, upstream)
}

/// Mean softmax cross-entropy and its gradients.
///
/// When `train_extractor` is set, `input` holds raw samples and gradients flow
/// through the extractor; otherwise `input` holds features, the extractor is
/// treated as frozen and its gradients are exactly zero. The optional input
/// gradient is taken with respect to whatever `input` holds.
pub fn loss_and_grads<S: Scalar>(
    params: &ModelParams<S>,
    input: &Tensor<S>,
    labels: &[usize],
    train_extractor: bool,
    want_input_grad: bool,
) -> Result<(S, GradientSet<S>)> {
    let batch = input.rows();
    if batch == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::dim("labels", batch, labels.len()));
    }
    let num_classes = params.num_classes();
    if let Some(&label) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::Label { label, num_classes });
    }

    let cache = if train_extractor {
        Some(forward_cached(params, input)?)
    } else {
        None
    };
    let features = match &cache {
        Some(c) => c.activations.last().expect("non-empty"),
        None => input,
    };
    let logits = forward_logits(params, features)?;

    let inv_b = S::one() / S::lit(batch as f64);
    let mut loss = S::zero();
    let mut dlogits = logits;
    for (r, &label) in labels.iter().enumerate() {
        let row = dlogits.row_mut(r);
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let z_label = row[label];
        let mut sum = S::zero();
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        let log_z = sum.ln() + max;
        loss = loss + (log_z - z_label);
        for (c, v) in row.iter_mut().enumerate() {
            let p = *v / sum;
            *v = (p - if c == label { S::one() } else { S::zero() }) * inv_b;
        }
    }
    loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::Numeric("non-finite cross-entropy".into()));
    }

    let classifier = Dense {
        weight: outer_sum(&dlogits, features),
        bias: column_sum(&dlogits),
    };
    let dfeatures = back_project(&dlogits, &params.classifier.weight);

    let (extractor, input_grad) = match &cache {
        Some(c) => {
            let (g, dx) = backprop_extractor(params, c, dfeatures);
            (g, want_input_grad.then_some(dx))
        }
        None => (
            GradientSet::zeros_like(params).extractor,
            want_input_grad.then_some(dfeatures),
        ),
    };
    Ok((
        loss,
        GradientSet {
            extractor,
            classifier,
            input: input_grad,
        },
    ))
}

/// `p' = p − lr·g` for every parameter.
pub fn apply_sgd<S: Scalar>(
    params: &ModelParams<S>,
    grads: &GradientSet<S>,
    lr: S,
) -> Result<ModelParams<S>> {
    if !(lr >= S::zero()) || !lr.is_finite() {
        return Err(Error::Argument(format!("learning rate {lr} must be finite and >= 0")));
    }
    params.check_grads(grads)?;
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(params.combine(grads, |p, g| p - lr * g))
}

/// Unweighted elementwise mean.
pub fn average_params<S: Scalar>(list: &[ModelParams<S>]) -> Result<ModelParams<S>> {
    let weights = vec![S::one(); list.len()];
    average_params_weighted(list, &weights)
}

/// Elementwise mean with non-negative weights normalised to sum to one.
pub fn average_params_weighted<S: Scalar>(
    list: &[ModelParams<S>],
    weights: &[S],
) -> Result<ModelParams<S>> {
    let first = list
        .first()
        .ok_or_else(|| Error::Argument("cannot average an empty list".into()))?;
    if weights.len() != list.len() {
        return Err(Error::dim("averaging weights", list.len(), weights.len()));
    }
    for (i, p) in list.iter().enumerate() {
        if !p.congruent(first) {
            return Err(Error::dim(
                format!("model {i}"),
                "shape of model 0",
                "incongruent shape",
            ));
        }
    }
    let total: S = weights.iter().copied().sum();
    if weights.iter().any(|w| *w < S::zero()) || !(total > S::zero()) {
        return Err(Error::Argument("averaging weights must be >= 0 with positive sum".into()));
    }
    let avg_tensor = |pick: &dyn Fn(&ModelParams<S>) -> &Tensor<S>| -> Tensor<S> {
        let shape = pick(first).shape().to_vec();
        let mut acc = vec![S::zero(); pick(first).len()];
        for (p, &w) in list.iter().zip(weights) {
            let scale = w / total;
            for (a, &v) in acc.iter_mut().zip(pick(p).data()) {
                *a = *a + scale * v;
            }
        }
        Tensor::new(shape, acc).expect("congruent")
    };
    let extractor = (0..first.extractor.len())
        .map(|i| Dense {
            weight: avg_tensor(&|p| &p.extractor[i].weight),
            bias: avg_tensor(&|p| &p.extractor[i].bias),
        })
        .collect();
    let classifier = Dense {
        weight: avg_tensor(&|p| &p.classifier.weight),
        bias: avg_tensor(&|p| &p.classifier.bias),
    };
    Ok(ModelParams {
        extractor,
        classifier,
    })
}

/// Appends classifier rows up to `new_num_classes`; new weights are drawn
/// from a seeded uniform(−init_scale, init_scale), new biases are zero.
pub fn grow_classifier<S: Scalar>(
    params: &ModelParams<S>,
    new_num_classes: usize,
    init_scale: S,
    seed: u64,
) -> Result<ModelParams<S>> {
    let current = params.num_classes();
    if new_num_classes < current {
        return Err(Error::Argument(format!(
            "cannot shrink classifier from {current} to {new_num_classes} classes"
        )));
    }
    if new_num_classes == current {
        return Ok(params.clone());
    }
    let dim = params.feature_dim();
    let mut rng = rng_for(seed, &[]);
    let bound = init_scale.abs().as_f64();
    let mut weight = params.classifier.weight.data().to_vec();
    for _ in 0..(new_num_classes - current) * dim {
        let v = if bound > 0.0 {
            rng.random_range(-bound..=bound)
        } else {
            0.0
        };
        weight.push(S::lit(v));
    }
    let mut bias = params.classifier.bias.data().to_vec();
    bias.resize(new_num_classes, S::zero());
    Ok(ModelParams {
        extractor: params.extractor.clone(),
        classifier: Dense {
            weight: Tensor::matrix(new_num_classes, dim, weight)?,
            bias: Tensor::vector(bias),
        },
    })
}
