use std::collections::BTreeSet;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, ResolvedSeeds};
use crate::client::{compute_prototypes, local_train_round, ClientState, ClientUpdate, LocalHyper};
use crate::data::{
    build_task_stream, consensus_split, generate_dataset, partition, realized_consensus, Dataset,
    PartitionMode, TaskStream,
};
use crate::error::{Error, Result};
use crate::metrics::{
    efficiency_score, evaluate, gradient_inversion_attack, privacy_score,
    prototype_inversion_attack, utility_over_tasks, AccuracySnapshot, AttackConfig, AttackResult,
    EfficiencyLedger, RoundCost, TrustReport,
};
use crate::nn::{grow_classifier, loss_and_grads, ModelParams};
use crate::seed::{derive_seed, rng_for};
use crate::server::{distribute, fedavg, fuse_prototypes, GlobalState, KnowledgeBase};

const GROW: u64 = 30;
const LOCAL: u64 = 31;
const PROBE: u64 = 32;

/// Everything a finished run reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    /// Per-client consensus rate actually realised (asynchronous mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub realized_consensus: Option<f64>,
    pub snapshots: Vec<AccuracySnapshot>,
    pub ledger: EfficiencyLedger,
    pub final_acc_all: f64,
    pub trust: TrustReport,
    pub probes: Vec<PrivacyProbe>,
    pub version: String,
    pub wall_clock_seconds: f64,
}

impl RunRecord {
    /// Copy with every wall-clock dependent field zeroed, for determinism
    /// comparisons.
    pub fn without_timing(&self) -> RunRecord {
        let mut r = self.clone();
        r.wall_clock_seconds = 0.0;
        for c in &mut r.ledger.rounds {
            c.compute_seconds = 0.0;
        }
        r.trust.efficiency = 0.0;
        r
    }
}

/// One reconstruction attempt against one client sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivacyProbe {
    pub client: usize,
    pub round: usize,
    pub label: usize,
    pub gradient: AttackResult<f64>,
    pub gradient_privacy: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype: Option<AttackResult<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prototype_privacy: Option<f64>,
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    let mode = match cfg.partition.mode {
        PartitionMode::Synchronous => "sync",
        PartitionMode::Asynchronous => "async",
    };
    format!(
        "{}-{mode}-{}-s{}",
        cfg.variant.name(),
        heterogeneity(cfg),
        cfg.seeds.master
    )
}

pub(crate) fn heterogeneity(cfg: &ExperimentConfig) -> f64 {
    match cfg.partition.mode {
        PartitionMode::Synchronous => cfg.partition.alpha.unwrap_or(f64::NAN),
        PartitionMode::Asynchronous => cfg.partition.gamma.unwrap_or(f64::NAN),
    }
}

/// Round-by-round federated simulation.
pub struct Simulation {
    cfg: ExperimentConfig,
    seeds: ResolvedSeeds,
    dataset: Dataset<f64>,
    streams: Vec<TaskStream<f64>>,
    clients: Vec<ClientState<f64>>,
    global: GlobalState<f64>,
    task: usize,
    snapshots: Vec<AccuracySnapshot>,
    ledger: EfficiencyLedger,
    realized_consensus: Option<f64>,
}

impl Simulation {
    /// Validates the configuration, generates data, partitions it and builds
    /// every client's task stream.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seeds = cfg.seeds.resolve();
        let dataset = generate_dataset::<f64>(&cfg.dataset_spec())?;
        let part = cfg.partition_config();
        let shards = partition(&dataset.train, &part)?;
        let streams = shards
            .iter()
            .map(|s| build_task_stream(s, cfg.dataset.num_classes, &part, cfg.rounds_per_task()))
            .collect::<Result<Vec<_>>>()?;
        let realized_consensus = match part.mode {
            PartitionMode::Asynchronous => {
                let (c, u) = consensus_split(
                    cfg.dataset.num_classes,
                    cfg.partition.num_clients,
                    part.gamma.expect("validated"),
                )?;
                Some(realized_consensus(c, u))
            }
            PartitionMode::Synchronous => None,
        };
        let params = ModelParams::init(cfg.dataset.input_dim, &cfg.hidden, 0, seeds.init);
        let clients = (0..streams.len())
            .map(|k| ClientState::new(k, params.clone()))
            .collect();
        Ok(Self {
            ledger: EfficiencyLedger::new(cfg.bandwidth),
            seeds,
            dataset,
            streams,
            clients,
            global: GlobalState {
                params,
                kb: KnowledgeBase::new(),
                round: 0,
            },
            task: 0,
            snapshots: Vec::new(),
            realized_consensus,
            cfg,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    /// Rounds completed so far.
    pub fn round(&self) -> usize {
        self.global.round
    }

    pub fn global_params(&self) -> &ModelParams<f64> {
        &self.global.params
    }

    pub fn knowledge_base(&self) -> &KnowledgeBase<f64> {
        &self.global.kb
    }

    pub fn streams(&self) -> &[TaskStream<f64>] {
        &self.streams
    }

    pub fn snapshots(&self) -> &[AccuracySnapshot] {
        &self.snapshots
    }

    /// Switches task when round `r` starts a new one: clients file the
    /// finished classes as previous, and the global head grows to cover the
    /// new classes.
    fn enter_round(&mut self, r: usize) -> Result<usize> {
        let t = crate::data::round_to_task(r, self.cfg.rounds, self.cfg.partition.num_tasks)?;
        if t == self.task {
            return Ok(t);
        }
        for (client, stream) in self.clients.iter_mut().zip(&self.streams) {
            let finished = if self.task > 0 {
                stream.task(self.task).classes.clone()
            } else {
                Vec::new()
            };
            client.begin_task(t, finished);
        }
        let needed = self
            .streams
            .iter()
            .flat_map(|s| s.task(t).classes.iter().map(|c| c + 1))
            .max()
            .unwrap_or(0);
        if needed > self.global.params.num_classes() {
            let scale = 1.0 / (self.global.params.feature_dim() as f64).sqrt();
            let seed = derive_seed(self.seeds.init, &[GROW, t as u64]);
            self.global.params = grow_classifier(&self.global.params, needed, scale, seed)?;
        }
        self.task = t;
        Ok(t)
    }

    /// Runs rounds until `round` rounds are complete.
    pub fn run_until(&mut self, round: usize) -> Result<()> {
        while self.round() < round {
            self.step()?;
        }
        Ok(())
    }

    /// Plays one full round: broadcast, local training, aggregation and
    /// evaluation of the new global model.
    pub fn step(&mut self) -> Result<AccuracySnapshot> {
        let r = self.round() + 1;
        if r > self.cfg.rounds {
            return Err(Error::Argument(format!(
                "all {} rounds already played",
                self.cfg.rounds
            )));
        }
        let t = self.enter_round(r)?;
        let variant = self.cfg.variant;
        let hyper = LocalHyper {
            epochs: self.cfg.local_epochs,
            lr: self.cfg.lr,
            batch_size: self.cfg.batch_size,
            pseudo_per_class: self.cfg.pseudo_per_class,
            train_extractor: self.cfg.extractor_schedule.trains_in(t),
            translate: variant.translates(),
            base_rule: self.cfg.base_class_rule,
            upload_prototypes: variant.fuses(),
        };

        let dist = distribute(&self.global);
        let global_protos = variant.fuses().then_some(&dist.prototypes);
        let training_seed = self.seeds.training;
        let results: Vec<Result<(ClientState<f64>, ClientUpdate<f64>, f64)>> = self
            .clients
            .par_iter()
            .zip(self.streams.par_iter())
            .map(|(client, stream)| {
                let started = Instant::now();
                let k = client.client_id;
                let mut state = client.clone();
                state.params = dist.params.clone();
                let seed = derive_seed(training_seed, &[LOCAL, r as u64, k as u64]);
                let (state, update) =
                    local_train_round(state, stream.task(t), global_protos, &hyper, seed).map_err(
                        |e| Error::Client {
                            round: r,
                            client: k,
                            source: Box::new(e),
                        },
                    )?;
                Ok((state, update, started.elapsed().as_secs_f64()))
            })
            .collect();

        let mut updates = Vec::with_capacity(results.len());
        let mut states = Vec::with_capacity(results.len());
        let mut compute = 0.0;
        for res in results {
            let (state, update, secs) = res?;
            compute += secs;
            states.push(state);
            updates.push(update);
        }

        let started = Instant::now();
        let wrap = |e: Error| Error::Round {
            round: r,
            source: Box::new(e),
        };
        let params = fedavg(&updates, self.cfg.weighted_fedavg).map_err(wrap)?;
        if !params.is_finite() {
            return Err(wrap(Error::Numeric("aggregated model is not finite".into())));
        }
        if variant.fuses() {
            self.global.kb =
                fuse_prototypes(&self.global.kb, &updates, t, self.cfg.beta).map_err(wrap)?;
        }
        compute += started.elapsed().as_secs_f64();

        self.global.params = params;
        self.global.round = r;
        self.clients = states;
        self.ledger.push(RoundCost {
            bytes_up: updates.iter().map(|u| u.bytes_uploaded as u64).sum(),
            bytes_down: (dist.bytes_downloaded * self.clients.len()) as u64,
            compute_seconds: compute,
        });

        let snapshot = self.evaluate(r, t).map_err(wrap)?;
        self.snapshots.push(snapshot.clone());
        Ok(snapshot)
    }

    fn evaluate(&self, round: usize, t: usize) -> Result<AccuracySnapshot> {
        let current: BTreeSet<usize> = self
            .streams
            .iter()
            .flat_map(|s| s.task(t).classes.iter().copied())
            .collect();
        let previous: BTreeSet<usize> = self
            .streams
            .iter()
            .flat_map(|s| s.classes_before(t))
            .filter(|c| !current.contains(c))
            .collect();
        let all: BTreeSet<usize> = current.union(&previous).copied().collect();
        let p = &self.global.params;
        let test = &self.dataset.test;
        Ok(AccuracySnapshot {
            round,
            task: t,
            acc_previous: if previous.is_empty() {
                None
            } else {
                Some(evaluate(p, test, &previous)?)
            },
            acc_current: evaluate(p, test, &current)?,
            acc_all: evaluate(p, test, &all)?,
        })
    }

    /// Prepares round `round` without playing it: rounds before it are run
    /// and the model is in the state broadcast at its start.
    pub fn advance_to(&mut self, round: usize) -> Result<()> {
        if round == 0 || round > self.cfg.rounds {
            return Err(Error::Argument(format!(
                "round {round} outside 1..={}",
                self.cfg.rounds
            )));
        }
        if self.round() >= round {
            return Err(Error::Argument(format!(
                "round {round} already played"
            )));
        }
        self.run_until(round - 1)?;
        self.enter_round(round)?;
        Ok(())
    }

    /// Attacks one sample of `client`'s active task under the current global
    /// model: gradient inversion on its single-sample gradient and, when the
    /// variant shares prototypes, inversion of its class prototype.
    pub fn probe(&self, client: usize, attempt: usize, round: usize) -> Result<PrivacyProbe> {
        if client >= self.streams.len() {
            return Err(Error::Argument(format!(
                "client {client} outside 0..{}",
                self.streams.len()
            )));
        }
        if self.task == 0 {
            return Err(Error::Argument("no task active yet".into()));
        }
        let task = self.streams[client].task(self.task);
        let mut rng = rng_for(self.seeds.attack, &[PROBE, client as u64, attempt as u64]);
        let sample = &task.samples[rng.random_range(0..task.samples.len())];
        let params = &self.global.params;
        let x = crate::nn::Tensor::matrix(1, sample.features.len(), sample.features.data().to_vec())?;
        let cfg = AttackConfig {
            iters: self.cfg.attack.iters,
            lr: self.cfg.attack.lr,
            seed: derive_seed(self.seeds.attack, &[client as u64, attempt as u64]),
            restarts: self.cfg.attack.restarts,
        };
        let (_, observed) = loss_and_grads(params, &x, &[sample.label], true, false)?;
        let gradient =
            gradient_inversion_attack(params, &observed, sample.label, &x, &cfg, (client, round))?;
        let gradient_privacy = privacy_score(gradient.mse)?;
        let (prototype, prototype_privacy) = if self.cfg.variant.fuses() {
            let same: Vec<_> = task
                .samples
                .iter()
                .filter(|s| s.label == sample.label)
                .cloned()
                .collect();
            let protos = compute_prototypes(params, &same, self.task)?;
            let mu = &protos.get(sample.label).expect("label present").prototype;
            let res = prototype_inversion_attack(params, mu, &x, &cfg, (client, round))?;
            let score = privacy_score(res.mse)?;
            (Some(res), Some(score))
        } else {
            (None, None)
        };
        Ok(PrivacyProbe {
            client,
            round,
            label: sample.label,
            gradient,
            gradient_privacy,
            prototype,
            prototype_privacy,
        })
    }

    /// Runs the end-of-run privacy probes and assembles the record.
    pub fn finish(self, started: Instant) -> Result<RunRecord> {
        let rounds = self.cfg.rounds;
        if self.round() != rounds {
            return Err(Error::Argument(format!(
                "run stopped after {} of {rounds} rounds",
                self.round()
            )));
        }
        let k = self.streams.len();
        let probes = (0..self.cfg.attack.samples)
            .into_par_iter()
            .map(|i| self.probe(i % k, i / k, rounds))
            .collect::<Result<Vec<_>>>()?;
        let n = probes.len() as f64;
        let privacy = probes.iter().map(|p| p.gradient_privacy).sum::<f64>() / n;
        let privacy_prototype = if self.cfg.variant.fuses() {
            Some(probes.iter().filter_map(|p| p.prototype_privacy).sum::<f64>() / n)
        } else {
            None
        };
        let trust = TrustReport {
            utility: utility_over_tasks(&self.snapshots, self.cfg.lambda)?,
            privacy,
            privacy_prototype,
            efficiency: efficiency_score(&self.ledger, rounds)?,
            lambda: self.cfg.lambda,
        };
        let final_acc_all = self.snapshots.last().map(|s| s.acc_all).unwrap_or(0.0);
        Ok(RunRecord {
            run_id: run_id(&self.cfg),
            seed: self.cfg.seeds.master,
            realized_consensus: self.realized_consensus,
            snapshots: self.snapshots,
            ledger: self.ledger,
            final_acc_all,
            trust,
            probes,
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            config: self.cfg,
        })
    }
}

/// Plays every round of `cfg` and scores the run.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunRecord> {
    let started = Instant::now();
    let mut sim = Simulation::new(cfg.clone())?;
    sim.run_until(cfg.rounds)?;
    sim.finish(started)
}

/// Replays `cfg` up to the start of `round` and attacks `client` there.
pub fn attack_at(cfg: &ExperimentConfig, round: usize, client: usize) -> Result<PrivacyProbe> {
    let mut sim = Simulation::new(cfg.clone())?;
    sim.advance_to(round)?;
    sim.probe(client, 0, round)
}
