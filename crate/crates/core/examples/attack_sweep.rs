//! Supplier reputation under each attack, using the built-in fig4 preset.

use blocks_sim::agents::Role;
use blocks_sim::simulator::{preset, sweep};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let file = preset("fig4")?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    for (label, out) in sweep(&file.config, &file.sweep, threads)? {
        println!("{label}");
        for frame in out.frames.iter().step_by(40).chain(out.frames.last()) {
            let r = frame.role_summary(Role::Supplier);
            println!(
                "  round {:>3}: honest {:.3} malicious {:.3}",
                frame.round,
                r.honest.as_ref().unwrap().mean,
                r.malicious.as_ref().unwrap().mean
            );
        }
    }
    Ok(())
}
