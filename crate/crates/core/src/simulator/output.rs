//! Writes a run's CSV, JSON and JSON Lines artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use super::metrics::{CacheRow, ReputationRow};
use super::RunOutput;

pub const REPUTATION_CSV: &str = "reputation_timeseries.csv";
pub const CACHE_CSV: &str = "cache_metrics.csv";
pub const REWARDS_CSV: &str = "rewards.csv";
pub const LEDGER_STATS_CSV: &str = "ledger_stats.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const SESSIONS_JSONL: &str = "sessions.jsonl";
pub const LEDGER_JSON: &str = "ledger.json";

#[derive(Debug, Error)]
pub enum OutputError {
    #[error("{0} already exists (pass --force to overwrite)")]
    Exists(PathBuf),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct WriteOptions {
    pub force: bool,
    pub dump_ledger: bool,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> OutputError + '_ {
    move |source| OutputError::Io {
        path: path.to_owned(),
        source,
    }
}

fn write_csv<T: serde::Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), OutputError> {
    let csv_err = |source| OutputError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for row in rows {
        w.serialize(row).map_err(csv_err)?;
    }
    w.flush().map_err(io_err(path))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<(), OutputError> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value).map_err(|source| OutputError::Json {
        path: path.to_owned(),
        source,
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// File names a run writes with these options.
pub fn artifact_names(opts: WriteOptions) -> Vec<&'static str> {
    let mut v = vec![
        REPUTATION_CSV,
        CACHE_CSV,
        REWARDS_CSV,
        LEDGER_STATS_CSV,
        SUMMARY_JSON,
        SESSIONS_JSONL,
    ];
    if opts.dump_ledger {
        v.push(LEDGER_JSON);
    }
    v
}

/// Fails without touching anything if an artifact already exists and `force` is off.
pub fn check_clobber(dir: &Path, opts: WriteOptions) -> Result<(), OutputError> {
    if opts.force {
        return Ok(());
    }
    for name in artifact_names(opts) {
        let p = dir.join(name);
        if p.exists() {
            return Err(OutputError::Exists(p));
        }
    }
    Ok(())
}

/// Writes every artifact of `out` into `dir`, creating it if needed.
pub fn write_run(out: &RunOutput, dir: &Path, opts: WriteOptions) -> Result<(), OutputError> {
    check_clobber(dir, opts)?;
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    write_csv(
        &dir.join(REPUTATION_CSV),
        out.frames.iter().flat_map(|f| {
            f.reputations.iter().map(move |r| ReputationRow {
                round: f.round,
                role: r.role,
                node_id: r.node_id.clone(),
                malicious: r.malicious,
                reputation: r.reputation,
            })
        }),
    )?;
    write_csv(
        &dir.join(CACHE_CSV),
        out.frames.iter().map(|f| CacheRow {
            round: f.round,
            policy: out.config.cache_policy,
            hit_rate_cumulative: f.hit_rate,
            mean_in_cache_reputation: f.mean_in_cache_reputation,
            resident_count: f.resident_count,
            evictions_cumulative: f.evictions,
            mean_service_delay: f.mean_service_delay,
        }),
    )?;
    write_csv(&dir.join(REWARDS_CSV), &out.rewards)?;
    write_csv(&dir.join(LEDGER_STATS_CSV), &out.ledger_stats)?;
    write_json(&dir.join(SUMMARY_JSON), &out.summary)?;

    let path = dir.join(SESSIONS_JSONL);
    let mut w = BufWriter::new(File::create(&path).map_err(io_err(&path))?);
    for line in &out.session_log {
        serde_json::to_writer(&mut w, line).map_err(|source| OutputError::Json {
            path: path.clone(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err(&path))?;
    }
    w.flush().map_err(io_err(&path))?;

    if opts.dump_ledger {
        write_json(&dir.join(LEDGER_JSON), &out.ledger)?;
    }
    Ok(())
}
