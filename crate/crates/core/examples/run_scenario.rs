//! Runs a scenario file (or the defaults) and writes every artifact.
//!
//! cargo run --example run_scenario -- [config.toml] [out_dir]

use std::path::PathBuf;

use blocks_sim::agents::Role;
use blocks_sim::simulator::{run, write_run, ScenarioConfig, WriteOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let config = match args.next() {
        Some(path) => ScenarioConfig::load(path.as_ref())?,
        None => ScenarioConfig::default(),
    };
    let out_dir = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("blocks-sim-example"));

    let out = run(&config)?;
    write_run(
        &out,
        &out_dir,
        WriteOptions {
            force: true,
            dump_ledger: true,
        },
    )?;
    let s = &out.summary;
    println!(
        "{}: {} questions, {} prompts stored, hit rate {:.3}",
        s.name, s.questions_processed, s.ledger_prompts, s.hit_rate
    );
    let last = out.frames.last().unwrap();
    for role in [Role::Supplier, Role::Validator] {
        let r = last.role_summary(role);
        println!(
            "{role:?}: honest {:.3}, malicious {}",
            r.honest.as_ref().map_or(f64::NAN, |m| m.mean),
            r.malicious.as_ref().map_or("-".into(), |m| format!("{:.3}", m.mean))
        );
    }
    println!("artifacts in {}", out_dir.display());
    Ok(())
}
