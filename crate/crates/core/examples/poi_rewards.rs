//! Proof-of-impact rewards, proposer selection and resale splits.

use std::collections::BTreeMap;

use blocks_sim::poi::{distribute_resale, impact_reward, select_proposer, settle_round, ImpactRecord, RewardParams, WealthLedger};
use blocks_sim::types::NodeId;

fn main() {
    let params = RewardParams {
        beta: 0.5,
        proposer_bonus: 1.0,
    };
    let records = vec![
        ImpactRecord {
            node_id: "s01".into(),
            prompt_accesses: 12,
            validation_accesses: 0,
            reputation: 0.8,
        },
        ImpactRecord {
            node_id: "v01".into(),
            prompt_accesses: 0,
            validation_accesses: 20,
            reputation: 0.9,
        },
        ImpactRecord {
            node_id: "m00".into(),
            prompt_accesses: 30,
            validation_accesses: 30,
            reputation: 0.05,
        },
    ];
    for r in &records {
        println!("{} impact {:.2}", r.node_id, impact_reward(r, &params));
    }
    println!("proposer {}", select_proposer(&records, &params).unwrap());

    let mut wealth = WealthLedger::new();
    for r in &records {
        wealth.open(&r.node_id, 0.0);
    }
    let settlement = settle_round(&mut wealth, &records, &BTreeMap::new(), &params).unwrap();
    println!("minted {:.2}, total {:.2}", settlement.minted, wealth.total());

    let providers: BTreeMap<NodeId, f64> = [("s01".into(), 0.8), ("s02".into(), 0.4)].into();
    for (id, share) in distribute_resale(0.3, &providers).unwrap() {
        println!("resale {id}: {share:.3}");
    }
}
