//! Many paraphrased questions, few stored prompts.

use blocks_sim::simulator::{dedup_experiment, preset};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut config = preset("fig7")?.config;
    let report = dedup_experiment(&config)?;
    println!(
        "{} questions over {} topics -> {} prompts ({:.1}% less storage)",
        report.questions_processed,
        config.topics,
        report.ledger_prompts,
        100.0 * report.reduction
    );

    config.variants_per_topic = 1;
    config.question_limit = None;
    let single = dedup_experiment(&config)?;
    println!(
        "one phrasing per topic: {} questions -> {} prompts",
        single.questions_processed, single.ledger_prompts
    );
    Ok(())
}
