use std::fmt::Write as _;
use std::path::Path;

use super::run::{heterogeneity, RunRecord};
use super::suite::SuiteOutcome;
use crate::data::PartitionMode;
use crate::error::Result;

pub const CSV_HEADER: &str = "run_id,variant,mode,alpha_or_gamma,seed,round,task,acc_prev,acc_cur,acc_all,bytes_up,bytes_down,compute_s";

/// 17 significant digits: enough to round-trip any f64.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One row per round per run.
pub fn to_csv(records: &[RunRecord]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for rec in records {
        let mode = match rec.config.partition.mode {
            PartitionMode::Synchronous => "synchronous",
            PartitionMode::Asynchronous => "asynchronous",
        };
        let het = fmt_f64(heterogeneity(&rec.config));
        for (snap, cost) in rec.snapshots.iter().zip(&rec.ledger.rounds) {
            writeln!(
                out,
                "{},{},{mode},{het},{},{},{},{},{},{},{},{},{}",
                rec.run_id,
                rec.config.variant.name(),
                rec.seed,
                snap.round,
                snap.task,
                snap.acc_previous.map(fmt_f64).unwrap_or_default(),
                fmt_f64(snap.acc_current),
                fmt_f64(snap.acc_all),
                cost.bytes_up,
                cost.bytes_down,
                fmt_f64(cost.compute_seconds),
            )
            .expect("write to string");
        }
    }
    out
}

/// Drops the trailing `compute_s` column, the only wall-clock dependent one.
pub fn strip_timing(csv: &str) -> String {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head))
        .fold(String::new(), |mut acc, l| {
            acc.push_str(l);
            acc.push('\n');
            acc
        })
}

pub fn write_csv(records: &[RunRecord], path: &Path) -> Result<()> {
    std::fs::write(path, to_csv(records))?;
    Ok(())
}

pub fn write_summary(outcome: &SuiteOutcome, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(outcome)?)?;
    Ok(())
}

pub fn read_summary(path: &Path) -> Result<SuiteOutcome> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
