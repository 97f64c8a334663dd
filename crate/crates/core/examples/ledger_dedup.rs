//! Content-addressed prompt storage: identical answers share one entry.

use blocks_sim::ledger::{Ledger, Prefix};
use blocks_sim::types::NodeId;

fn main() {
    let mut ledger = Ledger::new();
    let answers = [
        ("s01", "Paris is the capital of France."),
        ("s02", "Paris is the capital of France."),
        ("s03", "Lyon is the capital of France."),
        ("s01", "Paris is the capital of France."),
    ];
    for (supplier, text) in answers {
        let key = ledger.put_prompt(text, &NodeId::from(supplier)).expect("stored");
        println!("{supplier} -> {} {}", key.hash_hex(), text);
    }
    let stats = ledger.stats();
    println!(
        "{} answers, {} stored prompts",
        answers.len(),
        stats.count(Prefix::DataTable)
    );
    let key = ledger.find_prompt("Paris is the capital of France.").unwrap();
    let entry = ledger.data_table(&key).unwrap();
    println!("first supplier credited: {}", entry.supplier_id);
}
