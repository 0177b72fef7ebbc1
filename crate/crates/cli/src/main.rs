//! `fedprok` command line: run experiments, seed suites, validate configs and
//! replay attacks against recorded runs.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand};
use fedprok::experiment::{
    attack_at, output, run_suite, ExperimentConfig, RunRecord, SuiteOutcome, DEFAULT_SEEDS,
};
use fedprok::nn::wire::encode_tensor;

#[derive(Parser)]
#[command(name = "fedprok", version, about = "Federated class-incremental learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its CSV and JSON summary.
    Run {
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run every config under every seed.
    Suite {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_SEEDS)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check configs without running them.
    Validate {
        #[arg(required = true)]
        configs: Vec<PathBuf>,
    },
    /// Replay a recorded run and attack one client's update at one round.
    Attack {
        /// Summary JSON written by `run` or `suite`, or a single run record.
        run_record: PathBuf,
        #[arg(long)]
        round: usize,
        #[arg(long)]
        client: usize,
        /// Which run of a multi-run summary (default: the first).
        #[arg(long)]
        run_id: Option<String>,
        /// Write reconstruction and ground truth as binary tensors.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

/// An error paired with the exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

fn invalid(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        err: err.into(),
    }
}

fn runtime(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        err: err.into(),
    }
}

fn classify(err: fedprok::Error) -> Failure {
    if err.is_config() {
        invalid(err)
    } else {
        runtime(err)
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    let cfg = ExperimentConfig::from_json(&text)
        .with_context(|| format!("parsing {}", path.display()))
        .map_err(invalid)?;
    cfg.validate()
        .with_context(|| format!("validating {}", path.display()))
        .map_err(invalid)?;
    Ok(cfg)
}

fn write_outputs(outcome: &SuiteOutcome, out: &Path, stem: &str) -> Result<(), Failure> {
    fs::create_dir_all(out)
        .with_context(|| format!("creating {}", out.display()))
        .map_err(runtime)?;
    let csv = out.join(format!("{stem}.csv"));
    let json = out.join(format!("{stem}.json"));
    output::write_csv(&outcome.records, &csv).map_err(runtime)?;
    output::write_summary(outcome, &json).map_err(runtime)?;
    println!("wrote {} and {}", csv.display(), json.display());
    Ok(())
}

fn report(rec: &RunRecord) {
    println!(
        "{}: acc_all={:.4} U={:.4} P={:.4}{} E={:.6}s/round",
        rec.run_id,
        rec.final_acc_all,
        rec.trust.utility,
        rec.trust.privacy,
        rec.trust
            .privacy_prototype
            .map(|p| format!(" P_proto={p:.4}"))
            .unwrap_or_default(),
        rec.trust.efficiency,
    );
}

fn load_records(path: &Path) -> Result<Vec<RunRecord>, Failure> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading {}", path.display()))
        .map_err(invalid)?;
    if let Ok(outcome) = serde_json::from_str::<SuiteOutcome>(&text) {
        return Ok(outcome.records);
    }
    serde_json::from_str::<RunRecord>(&text)
        .map(|r| vec![r])
        .with_context(|| format!("{} is neither a run summary nor a run record", path.display()))
        .map_err(invalid)
}

/// Prints `text` to stdout; a closed pipe (e.g. `| head`) is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|()| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(runtime(e)),
        _ => Ok(()),
    }
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { config, seed, out } => {
            let cfg = load_config(&config)?;
            let seed = seed.unwrap_or(cfg.seeds.master);
            let outcome = run_suite(std::slice::from_ref(&cfg), &[seed]).map_err(classify)?;
            if let Some(f) = outcome.failures.first() {
                return Err(runtime(anyhow!("run failed: {}", f.error)));
            }
            let rec = &outcome.records[0];
            report(rec);
            write_outputs(&outcome, &out, &rec.run_id)
        }
        Command::Suite {
            configs,
            seeds,
            out,
        } => {
            let cfgs = configs
                .iter()
                .map(|p| load_config(p))
                .collect::<Result<Vec<_>, _>>()?;
            let outcome = run_suite(&cfgs, &seeds).map_err(classify)?;
            for rec in &outcome.records {
                report(rec);
            }
            for a in &outcome.aggregates {
                println!(
                    "config {} ({} @ {}): acc_all {:.4} ± {:.4} over {} seeds",
                    a.config_index,
                    a.variant,
                    a.heterogeneity,
                    a.mean_final_acc_all,
                    a.std_final_acc_all,
                    a.seeds.len()
                );
            }
            write_outputs(&outcome, &out, "suite")?;
            if !outcome.failures.is_empty() {
                for f in &outcome.failures {
                    eprintln!("config {} seed {} failed: {}", f.config_index, f.seed, f.error);
                }
                return Err(runtime(anyhow!("{} run(s) failed", outcome.failures.len())));
            }
            Ok(())
        }
        Command::Validate { configs } => {
            let mut bad = 0;
            for path in &configs {
                match load_config(path) {
                    Ok(_) => println!("{}: ok", path.display()),
                    Err(f) => {
                        println!("{}: invalid: {:#}", path.display(), f.err);
                        bad += 1;
                    }
                }
            }
            if bad > 0 {
                return Err(invalid(anyhow!("{bad} invalid config(s)")));
            }
            Ok(())
        }
        Command::Attack {
            run_record,
            round,
            client,
            run_id,
            dump,
        } => {
            let records = load_records(&run_record)?;
            let rec = match &run_id {
                Some(id) => records.iter().find(|r| &r.run_id == id),
                None => records.first(),
            }
            .ok_or_else(|| invalid(anyhow!("no matching run in {}", run_record.display())))?;
            let cfg = &rec.config;
            if round == 0 || round > cfg.rounds {
                return Err(invalid(anyhow!("--round must lie in 1..={}", cfg.rounds)));
            }
            if client >= cfg.partition.num_clients {
                return Err(invalid(anyhow!(
                    "--client must lie in 0..{}",
                    cfg.partition.num_clients
                )));
            }
            let probe = attack_at(cfg, round, client).map_err(classify)?;
            if let Some(path) = dump {
                let mut bytes = Vec::new();
                encode_tensor(&probe.gradient.reconstructed_input, &mut bytes);
                encode_tensor(&probe.gradient.ground_truth, &mut bytes);
                fs::write(&path, bytes)
                    .with_context(|| format!("writing {}", path.display()))
                    .map_err(runtime)?;
            }
            emit(&serde_json::to_string_pretty(&probe).map_err(runtime)?)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.err);
            ExitCode::from(f.code)
        }
    }
}
