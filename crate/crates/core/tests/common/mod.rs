//! Independent oracles shared by the integration tests: plain scalar loops
//! over `Vec<Vec<f64>>`, written without touching the library's tensor code.

#![allow(dead_code)]

use fedprok::nn::{Dense, ModelParams, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_dense(rng: &mut impl Rng, out: usize, inp: usize) -> Dense<f64> {
    Dense::new(
        Tensor::matrix(out, inp, uniform_vec(rng, out * inp, 1.0)).unwrap(),
        Tensor::vector(uniform_vec(rng, out, 0.5)),
    )
    .unwrap()
}

/// Net with `widths` ReLU layers and a linear head of `classes` rows.
pub fn random_net(rng: &mut impl Rng, input: usize, widths: &[usize], classes: usize) -> ModelParams<f64> {
    let mut layers = Vec::new();
    let mut prev = input;
    for &w in widths {
        layers.push(random_dense(rng, w, prev));
        prev = w;
    }
    let head = random_dense(rng, classes, prev);
    ModelParams::new(layers, head).unwrap()
}

pub fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Weight matrix as nested rows.
pub fn weight_rows(d: &Dense<f64>) -> Vec<Vec<f64>> {
    rows(&d.weight)
}

/// Layer by layer: `relu(W x + b)` for each extractor layer; returns every
/// pre-activation and the final features.
pub fn oracle_features(params: &ModelParams<f64>, x: &[f64]) -> (Vec<Vec<f64>>, Vec<f64>) {
    let mut h = x.to_vec();
    let mut pre = Vec::new();
    for layer in params.extractor() {
        let w = weight_rows(layer);
        let b = layer.bias.data();
        let mut z = vec![0.0; w.len()];
        for i in 0..w.len() {
            let mut acc = b[i];
            for j in 0..h.len() {
                acc += w[i][j] * h[j];
            }
            z[i] = acc;
        }
        h = z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        pre.push(z);
    }
    (pre, h)
}

pub fn oracle_logits(params: &ModelParams<f64>, f: &[f64]) -> Vec<f64> {
    let w = weight_rows(params.classifier());
    let b = params.classifier().bias.data();
    (0..w.len())
        .map(|i| b[i] + (0..f.len()).map(|j| w[i][j] * f[j]).sum::<f64>())
        .collect()
}

/// Mean softmax cross-entropy over the rows of `x`.
pub fn oracle_loss(params: &ModelParams<f64>, x: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (xi, &y) in x.iter().zip(labels) {
        let z = oracle_logits(params, &oracle_features(params, xi).1);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - z[y];
    }
    total / x.len() as f64
}

/// Flat list of every parameter, extractor layers first, weights before bias.
pub fn flatten(params: &ModelParams<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for d in params.extractor().iter().chain(std::iter::once(params.classifier())) {
        out.extend_from_slice(d.weight.data());
        out.extend_from_slice(d.bias.data());
    }
    out
}

/// Inverse of [`flatten`] using `like` for shapes.
pub fn unflatten(like: &ModelParams<f64>, flat: &[f64]) -> ModelParams<f64> {
    let mut at = 0;
    let mut take = |t: &Tensor<f64>| {
        let v = flat[at..at + t.len()].to_vec();
        at += t.len();
        Tensor::new(t.shape().to_vec(), v).unwrap()
    };
    let mut layers = Vec::new();
    for d in like.extractor() {
        let w = take(&d.weight);
        let b = take(&d.bias);
        layers.push(Dense::new(w, b).unwrap());
    }
    let c = like.classifier();
    let w = take(&c.weight);
    let b = take(&c.bias);
    ModelParams::new(layers, Dense::new(w, b).unwrap()).unwrap()
}

pub fn flatten_grads(g: &fedprok::nn::GradientSet<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    for d in g.extractor.iter().chain(std::iter::once(&g.classifier)) {
        out.extend_from_slice(d.weight.data());
        out.extend_from_slice(d.bias.data());
    }
    out
}

/// `|a − n| / max(|a|, |n|, floor)`; the floor keeps vanishing gradients from
/// amplifying round-off.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Smallest pre-activation magnitude over a batch; a finite difference that
/// straddles a ReLU kink is meaningless.
pub fn min_kink_distance(params: &ModelParams<f64>, x: &[Vec<f64>]) -> f64 {
    x.iter()
        .flat_map(|xi| oracle_features(params, xi).0.into_iter().flatten())
        .map(f64::abs)
        .fold(f64::INFINITY, f64::min)
}

pub struct FdReport {
    pub max_rel_err: f64,
    pub checked: usize,
}

/// Central differences at step `h` for every parameter and every input
/// coordinate, compared against `loss_and_grads`.
pub fn finite_difference_check(
    params: &ModelParams<f64>,
    x: &[Vec<f64>],
    labels: &[usize],
    h: f64,
) -> FdReport {
    let dim = x[0].len();
    let batch = Tensor::from_rows(x, dim).unwrap();
    let (_, g) = fedprok::nn::loss_and_grads(params, &batch, labels, true, true).unwrap();
    let analytic = flatten_grads(&g);
    let base = flatten(params);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] += h;
        let lp = oracle_loss(&unflatten(params, &p), x, labels);
        p[i] -= 2.0 * h;
        let lm = oracle_loss(&unflatten(params, &p), x, labels);
        worst = worst.max(rel_err(analytic[i], (lp - lm) / (2.0 * h)));
        checked += 1;
    }
    let gx = g.input.unwrap();
    for r in 0..x.len() {
        for c in 0..dim {
            let mut xp = x.to_vec();
            xp[r][c] += h;
            let lp = oracle_loss(params, &xp, labels);
            xp[r][c] -= 2.0 * h;
            let lm = oracle_loss(params, &xp, labels);
            worst = worst.max(rel_err(gx.row(r)[c], (lp - lm) / (2.0 * h)));
            checked += 1;
        }
    }
    FdReport {
        max_rel_err: worst,
        checked,
    }
}

/// Scalar-loop elementwise weighted mean of flat parameter vectors.
pub fn oracle_weighted_mean(models: &[Vec<f64>], weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    let mut out = vec![0.0; models[0].len()];
    for (m, w) in models.iter().zip(weights) {
        for i in 0..out.len() {
            out[i] += (w / total) * m[i];
        }
    }
    out
}

pub fn oracle_cosine(a: &[f64], b: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for i in 0..a.len() {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    dot / (na.sqrt() * nb.sqrt())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Randomised oracle comparisons; each returns the worst absolute error over
// `n` instances.

use fedprok::client::{
    compute_prototypes, select_base_class, translate_features, BaseClassRule, ClientUpdate,
    PrototypeEntry, PrototypeList,
};
use fedprok::data::LabeledSample;
use fedprok::server::{fedavg, fuse_prototypes, KnowledgeBase};

fn update(client: usize, params: ModelParams<f64>, protos: PrototypeList<f64>, n: usize) -> ClientUpdate<f64> {
    ClientUpdate {
        client_id: client,
        params,
        prototypes: protos,
        num_samples: n,
        bytes_uploaded: 0,
    }
}

pub fn fedavg_oracle_error(n: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = rng(seed ^ (i as u64).wrapping_mul(0x9E37));
        let k = r.random_range(1..6);
        let input = r.random_range(1..5);
        let widths: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(1..5)).collect();
        let classes = r.random_range(1..5);
        let weighted = r.random_bool(0.5);
        let mut updates = Vec::new();
        let mut flats = Vec::new();
        let mut weights = Vec::new();
        for c in 0..k {
            let p = random_net(&mut r, input, &widths, classes);
            let count = r.random_range(1..50);
            flats.push(flatten(&p));
            weights.push(if weighted { count as f64 } else { 1.0 });
            updates.push(update(c, p, PrototypeList::new(), count));
        }
        let avg = flatten(&fedavg(&updates, weighted).unwrap());
        worst = worst.max(max_abs_diff(&avg, &oracle_weighted_mean(&flats, &weights)));
    }
    worst
}

pub fn prototype_oracle_error(n: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = rng(seed ^ (i as u64).wrapping_mul(0x51ED));
        let input = r.random_range(1..5);
        let width = r.random_range(1..6);
        let params = random_net(&mut r, input, &[width], 2);
        let classes = r.random_range(1..4);
        let samples: Vec<LabeledSample<f64>> = (0..r.random_range(classes..20))
            .enumerate()
            .map(|(j, _)| LabeledSample {
                features: Tensor::vector(uniform_vec(&mut r, input, 2.0)),
                label: 10 + j % classes,
            })
            .collect();
        let got = compute_prototypes(&params, &samples, 1).unwrap();
        for c in 10..10 + classes {
            let feats: Vec<Vec<f64>> = samples
                .iter()
                .filter(|s| s.label == c)
                .map(|s| oracle_features(&params, s.features.data()).1)
                .collect();
            let mut mean = vec![0.0; feats[0].len()];
            for f in &feats {
                for d in 0..mean.len() {
                    mean[d] += f[d];
                }
            }
            for m in &mut mean {
                *m /= feats.len() as f64;
            }
            let e = got.get(c).unwrap();
            assert_eq!(e.sample_count, feats.len());
            worst = worst.max(max_abs_diff(e.prototype.data(), &mean));
        }
    }
    worst
}

fn entry(class_id: usize, v: Vec<f64>, count: usize) -> PrototypeEntry<f64> {
    PrototypeEntry {
        class_id,
        prototype: Tensor::vector(v),
        sample_count: count,
        task_of_origin: 1,
    }
}

/// Fusion of a fresh upload round followed by a later-task round, both
/// checked against hand-rolled weighted sums.
pub fn fusion_oracle_error(n: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = rng(seed ^ (i as u64).wrapping_mul(0xF00D));
        let dim = r.random_range(1..6);
        let k = r.random_range(1..5);
        let beta: f64 = r.random_range(0.0..=1.0);
        let dummy = ModelParams::init(1, &[], 0, 0);
        let rounds: Vec<Vec<(Vec<f64>, usize)>> = (0..2)
            .map(|_| (0..k).map(|_| (uniform_vec(&mut r, dim, 3.0), r.random_range(1..30))).collect())
            .collect();
        let mk = |ups: &Vec<(Vec<f64>, usize)>| -> Vec<ClientUpdate<f64>> {
            ups.iter()
                .enumerate()
                .map(|(c, (v, cnt))| update(c, dummy.clone(), [entry(7, v.clone(), *cnt)].into_iter().collect(), *cnt))
                .collect()
        };
        let oracle_mean = |ups: &Vec<(Vec<f64>, usize)>| -> Vec<f64> {
            let total: usize = ups.iter().map(|u| u.1).sum();
            let mut m = vec![0.0; dim];
            for (v, cnt) in ups {
                for d in 0..dim {
                    m[d] += (*cnt as f64 / total as f64) * v[d];
                }
            }
            m
        };
        let kb1 = fuse_prototypes(&KnowledgeBase::new(), &mk(&rounds[0]), 1, beta).unwrap();
        let m1 = oracle_mean(&rounds[0]);
        worst = worst.max(max_abs_diff(kb1.get(7).unwrap().prototype.data(), &m1));
        let kb2 = fuse_prototypes(&kb1, &mk(&rounds[1]), 2, beta).unwrap();
        let m2 = oracle_mean(&rounds[1]);
        let blended: Vec<f64> = (0..dim).map(|d| beta * m2[d] + (1.0 - beta) * m1[d]).collect();
        worst = worst.max(max_abs_diff(kb2.get(7).unwrap().prototype.data(), &blended));
    }
    worst
}

/// Returns the number of mismatched selections (0 expected) plus the worst
/// error in the chosen similarity.
pub fn selection_oracle_error(n: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = rng(seed ^ (i as u64).wrapping_mul(0xBA5E));
        let dim = r.random_range(2..8);
        let prev = uniform_vec(&mut r, dim, 1.0);
        let cands: Vec<(usize, Vec<f64>)> = (0..r.random_range(1..7))
            .map(|j| (3 * j + 1, uniform_vec(&mut r, dim, 1.0)))
            .collect();
        let list: PrototypeList<f64> = cands.iter().map(|(c, v)| entry(*c, v.clone(), 1)).collect();
        for rule in [BaseClassRule::ArgmaxSimilarity, BaseClassRule::LiteralArgmin] {
            let got = select_base_class(&Tensor::vector(prev.clone()), &list, rule).unwrap();
            let mut best = cands[0].0;
            let mut best_sim = oracle_cosine(&prev, &cands[0].1);
            for (c, v) in &cands[1..] {
                let s = oracle_cosine(&prev, v);
                let better = match rule {
                    BaseClassRule::ArgmaxSimilarity => s > best_sim,
                    BaseClassRule::LiteralArgmin => s < best_sim,
                };
                if better {
                    best = *c;
                    best_sim = s;
                }
            }
            if got != best {
                return f64::INFINITY;
            }
            let got_sim = oracle_cosine(&prev, &cands.iter().find(|(c, _)| *c == got).unwrap().1);
            worst = worst.max((got_sim - best_sim).abs());
        }
    }
    worst
}

pub fn translation_oracle_error(n: usize, seed: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..n {
        let mut r = rng(seed ^ (i as u64).wrapping_mul(0x7EA5));
        let dim = r.random_range(1..8);
        let nrows = r.random_range(1..10);
        let x: Vec<Vec<f64>> = (0..nrows).map(|_| uniform_vec(&mut r, dim, 2.0)).collect();
        let mu_n = uniform_vec(&mut r, dim, 2.0);
        let mu_p = uniform_vec(&mut r, dim, 2.0);
        let got = translate_features(
            &Tensor::from_rows(&x, dim).unwrap(),
            &Tensor::vector(mu_n.clone()),
            &Tensor::vector(mu_p.clone()),
        )
        .unwrap();
        for (row, xr) in x.iter().enumerate() {
            let expect: Vec<f64> = (0..dim).map(|d| xr[d] - mu_n[d] + mu_p[d]).collect();
            worst = worst.max(max_abs_diff(got.row(row), &expect));
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Toy gradient inversion: one input, one hidden ReLU unit, two classes.

use fedprok::metrics::{gradient_inversion_attack, AttackConfig, AttackResult};

pub struct ToyAttack {
    pub truth: f64,
    /// `g_w / g_b` for the hidden unit: the input in closed form.
    pub closed_form: f64,
    pub result: AttackResult<f64>,
}

/// Draws a toy net whose hidden unit is active at a positive true input and
/// attacks the single-sample gradient with `restarts` starts of `iters`
/// steps each.
pub fn toy_attack(seed: u64, restarts: usize, iters: usize) -> ToyAttack {
    let mut r = rng(seed);
    let truth = r.random_range(0.2..2.0);
    let w1 = r.random_range(0.5..1.5);
    let b1 = r.random_range(0.1..0.5);
    let hidden = Dense::new(
        Tensor::matrix(1, 1, vec![w1]).unwrap(),
        Tensor::vector(vec![b1]),
    )
    .unwrap();
    let head = Dense::new(
        Tensor::matrix(2, 1, vec![r.random_range(0.5..1.5), r.random_range(-1.5..-0.5)]).unwrap(),
        Tensor::vector(vec![0.0, 0.0]),
    )
    .unwrap();
    let params = ModelParams::new(vec![hidden], head).unwrap();
    let x = Tensor::matrix(1, 1, vec![truth]).unwrap();
    let label = 1;
    let (_, observed) = fedprok::nn::loss_and_grads(&params, &x, &[label], true, true).unwrap();
    let g = &observed.extractor[0];
    let closed_form = g.weight.data()[0] / g.bias.data()[0];
    let cfg = AttackConfig {
        iters,
        lr: 0.1,
        seed: seed ^ 0xA77AC,
        restarts,
    };
    let result = gradient_inversion_attack(&params, &observed, label, &x, &cfg, (0, 1)).unwrap();
    ToyAttack {
        truth,
        closed_form,
        result,
    }
}

// ---------------------------------------------------------------------------
// Experiment configurations.

use fedprok::data::PartitionMode;
use fedprok::experiment::{
    AttackSection, DatasetConfig, ExperimentConfig, ExtractorSchedule, PartitionSection, Seeds,
    Variant,
};

/// Benchmark: 8 classes in 16 dimensions, 3 clients, 4 tasks over 20 rounds,
/// Dirichlet α = `alpha`.
pub fn benchmark(variant: Variant, alpha: f64, seed: u64) -> ExperimentConfig {
    ExperimentConfig {
        variant,
        dataset: DatasetConfig {
            num_classes: 8,
            input_dim: 16,
            train_per_class: 60,
            test_per_class: 50,
            class_center_scale: 1.0,
            within_class_stddev: 0.5,
        },
        partition: PartitionSection {
            mode: PartitionMode::Synchronous,
            alpha: Some(alpha),
            gamma: None,
            num_clients: 3,
            num_tasks: 4,
        },
        hidden: vec![32, 16],
        rounds: 20,
        local_epochs: 5,
        lr: 0.1,
        batch_size: 8,
        pseudo_per_class: None,
        beta: 0.5,
        lambda: 0.5,
        extractor_schedule: ExtractorSchedule::FirstTask,
        base_class_rule: BaseClassRule::ArgmaxSimilarity,
        weighted_fedavg: false,
        bandwidth: 12.5e6,
        attack: AttackSection::default(),
        seeds: Seeds {
            master: seed,
            ..Seeds::default()
        },
    }
}

/// Asynchronous benchmark: 9 classes, 3 clients, one task over 10 rounds at
/// consensus rate `gamma`.
pub fn async_benchmark(variant: Variant, gamma: f64, seed: u64) -> ExperimentConfig {
    let mut cfg = benchmark(variant, 1.0, seed);
    cfg.dataset.num_classes = 9;
    cfg.partition = PartitionSection {
        mode: PartitionMode::Asynchronous,
        alpha: None,
        gamma: Some(gamma),
        num_clients: 3,
        num_tasks: 1,
    };
    cfg.rounds = 10;
    cfg
}

/// Small and fast: 4 classes in 4 dimensions, 2 tasks over 4 rounds.
pub fn tiny(variant: Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = benchmark(variant, 1.0, seed);
    cfg.dataset = DatasetConfig {
        num_classes: 4,
        input_dim: 4,
        train_per_class: 12,
        test_per_class: 10,
        class_center_scale: 1.0,
        within_class_stddev: 0.3,
    };
    cfg.partition.num_tasks = 2;
    cfg.hidden = vec![8];
    cfg.rounds = 4;
    cfg.local_epochs = 2;
    cfg.attack = AttackSection {
        iters: 30,
        lr: 0.1,
        samples: 2,
        restarts: 2,
    };
    cfg
}
