//! Consistency, confidence and the reputation updates on a tiny example.

use blocks_sim::reputation::{
    confidence, consistency, update_prompt_reputation, update_supplier_reputation, update_validator_reputation,
    FeedbackRecord, ReputationParams, ValidationRecord,
};
use blocks_sim::types::NodeId;

fn main() {
    let params = ReputationParams::default();
    let records = vec![
        ValidationRecord::new("v01", 0.82, 0.9),
        ValidationRecord::new("v02", 0.86, 0.8),
        ValidationRecord::new("v03", 0.80, 0.7),
        ValidationRecord::new("m00", 1.00, 0.3),
    ];

    for (i, rec) in records.iter().enumerate() {
        let others: Vec<_> = records
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, r)| r.clone())
            .collect();
        let cs = consistency(rec.score, &others, 1.0).unwrap();
        let next = update_validator_reputation(rec.validator_reputation, &[cs], &params);
        println!(
            "{}: score {:.2} cs {:.3} reputation {:.3} -> {:.3}",
            rec.validator_id, rec.score, cs, rec.validator_reputation, next
        );
    }

    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    println!("confidence (score std) {:.4}", confidence(&scores).unwrap());

    let feedback = [FeedbackRecord {
        llm_id: NodeId::from("u00"),
        accuracy: 0.9,
        llm_reputation: 0.6,
    }];
    let supplier = 0.5;
    let prompt = update_prompt_reputation(supplier, &records, &feedback);
    println!("prompt reputation {prompt:.4}");
    println!(
        "supplier reputation {supplier:.3} -> {:.4}",
        update_supplier_reputation(supplier, &[prompt], &params)
    );
}
