//! Command-line front end. The binary is a one-line call into [`main_with_args`].
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::simulator::output::{self, check_clobber, OutputError, WriteOptions};
use crate::simulator::{
    load_sweep_spec, preset, preset_text, run, sweep, ConfigError, RunOutput, ScenarioConfig, ScenarioFile, SimError,
    Summary, SweepEntry,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

/// Environment variable capping sweep parallelism.
pub const THREADS_ENV: &str = "BLOCKS_SIM_THREADS";

const SWEEP_SUMMARY: &str = "sweep_summary.json";
const PRESET_COPY: &str = "preset.toml";

#[derive(Debug, Parser)]
#[command(name = "blocks-sim", version, about = "Deterministic simulator for reputation-secured knowledge sharing")]
pub struct Cli {
    /// Suppress progress messages.
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one scenario.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Also write the final ledger as ledger.json.
        #[arg(long)]
        dump_ledger: bool,
    },
    /// Run a base scenario once per `[[sweep]]` entry of a spec file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dump_ledger: bool,
    },
    /// Run a built-in experiment: fig4, fig5, fig6 or fig7.
    Preset {
        name: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        #[arg(long)]
        dump_ledger: bool,
    },
    /// Check a scenario file without running it.
    Validate {
        #[arg(value_name = "FILE", required_unless_present = "config")]
        path: Option<PathBuf>,
        #[arg(long, conflicts_with = "path")]
        config: Option<PathBuf>,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Sim(SimError),
    #[error(transparent)]
    Output(#[from] OutputError),
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(c) => CliError::Config(c),
            other => CliError::Sim(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

fn threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|n| *n > 0)
        .unwrap_or(1)
}

struct Reporter {
    quiet: bool,
}

impl Reporter {
    fn say(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn summary(&self, label: &str, s: &Summary) {
        let fmt = |m: Option<f64>| m.map_or("-".to_owned(), |v| format!("{v:.3}"));
        let sup = &s.final_reputation.supplier;
        let val = &s.final_reputation.validator;
        self.say(format!(
            "{label}: {} questions, {} prompts stored, hit rate {:.3}, supplier honest/malicious {}/{}, validator honest/malicious {}/{}",
            s.questions_processed,
            s.ledger_prompts,
            s.hit_rate,
            fmt(sup.honest.map(|m| m.mean)),
            fmt(sup.malicious.map(|m| m.mean)),
            fmt(val.honest.map(|m| m.mean)),
            fmt(val.malicious.map(|m| m.mean)),
        ));
    }
}

fn check_labels(entries: &[SweepEntry]) -> Result<(), ConfigError> {
    for e in entries {
        let ok = !e.label.is_empty()
            && e.label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            && e.label != "."
            && e.label != "..";
        if !ok {
            return Err(ConfigError::Invalid(format!(
                "sweep label `{}` must be a plain directory name",
                e.label
            )));
        }
    }
    Ok(())
}

fn run_sweep(
    base: &ScenarioConfig,
    entries: &[SweepEntry],
    out: &Path,
    opts: WriteOptions,
    rep: &Reporter,
) -> Result<(), CliError> {
    check_labels(entries)?;
    if !opts.force {
        let p = out.join(SWEEP_SUMMARY);
        if p.exists() {
            return Err(OutputError::Exists(p).into());
        }
        for e in entries {
            check_clobber(&out.join(&e.label), opts)?;
        }
    }
    rep.say(format!("running {} scenarios on {} thread(s)", entries.len(), threads()));
    let results = sweep(base, entries, threads())?;
    let mut summaries = Vec::with_capacity(results.len());
    for (label, result) in &results {
        output::write_run(result, &out.join(label), opts)?;
        rep.summary(label, &result.summary);
        summaries.push(&result.summary);
    }
    fs::create_dir_all(out).map_err(|source| OutputError::Io {
        path: out.to_owned(),
        source,
    })?;
    let path = out.join(SWEEP_SUMMARY);
    let text = serde_json::to_string_pretty(&summaries).expect("summaries serialize");
    fs::write(&path, text + "\n").map_err(|source| OutputError::Io { path, source })?;
    Ok(())
}

fn write_single(result: &RunOutput, out: &Path, opts: WriteOptions, rep: &Reporter) -> Result<(), CliError> {
    output::write_run(result, out, opts)?;
    rep.summary(&result.config.name, &result.summary);
    Ok(())
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let rep = Reporter { quiet: cli.quiet };
    match cli.command {
        Command::Run {
            config,
            seed,
            out,
            force,
            dump_ledger,
        } => {
            let mut cfg = ScenarioConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let opts = WriteOptions { force, dump_ledger };
            check_clobber(&out, opts)?;
            let result = run(&cfg)?;
            write_single(&result, &out, opts, &rep)
        }
        Command::Sweep {
            config,
            spec,
            out,
            force,
            dump_ledger,
        } => {
            let base = ScenarioConfig::load(&config)?;
            let entries = load_sweep_spec(&spec)?;
            run_sweep(&base, &entries, &out, WriteOptions { force, dump_ledger }, &rep)
        }
        Command::Preset {
            name,
            out,
            force,
            dump_ledger,
        } => {
            let file = preset(&name)?;
            let opts = WriteOptions { force, dump_ledger };
            let copy = out.join(PRESET_COPY);
            if !force && copy.exists() {
                return Err(OutputError::Exists(copy).into());
            }
            if file.sweep.is_empty() {
                check_clobber(&out, opts)?;
                let result = run(&file.config)?;
                write_single(&result, &out, opts, &rep)?;
            } else {
                run_sweep(&file.config, &file.sweep, &out, opts, &rep)?;
            }
            fs::write(&copy, preset_text(&name)?).map_err(|source| OutputError::Io { path: copy, source })?;
            Ok(())
        }
        Command::Validate { path, config } => {
            let path = path.or(config).expect("clap requires one");
            let file = ScenarioFile::load(&path)?;
            for (i, e) in file.sweep.iter().enumerate() {
                crate::simulator::apply_overrides(&file.config, e, i)?;
            }
            check_labels(&file.sweep)?;
            rep.say(format!("{}: ok", path.display()));
            Ok(())
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_every_subcommand() {
        Cli::try_parse_from(["b", "run", "--config", "c.toml", "--seed", "42", "--out", "r", "--dump-ledger"]).unwrap();
        Cli::try_parse_from(["b", "sweep", "--config", "c.toml", "--spec", "s.toml", "--out", "r"]).unwrap();
        Cli::try_parse_from(["b", "--quiet", "preset", "fig7", "--out", "r", "--force"]).unwrap();
        Cli::try_parse_from(["b", "validate", "c.toml"]).unwrap();
        Cli::try_parse_from(["b", "validate", "--config", "c.toml"]).unwrap();
        assert!(Cli::try_parse_from(["b", "validate"]).is_err());
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["b", "frobnicate"]), EXIT_CONFIG);
        assert_eq!(main_with_args(["b", "--help"]), EXIT_OK);
    }

    #[test]
    fn labels_must_be_plain_names() {
        let e = |l: &str| SweepEntry {
            label: l.into(),
            overrides: toml::Table::new(),
        };
        assert!(check_labels(&[e("lfu"), e("self_promotion")]).is_ok());
        assert!(check_labels(&[e("../x")]).is_err());
        assert!(check_labels(&[e("")]).is_err());
    }
}
