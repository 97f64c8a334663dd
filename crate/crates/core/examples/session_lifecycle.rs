//! One query session driven by hand: escrow, knowledge, validation, finalize.

use blocks_sim::procache::{CacheConfig, ProCache};
use blocks_sim::reputation::ReputationParams;
use blocks_sim::session::{Assessment, CacheResult, Chain, EscrowConfig, QuerySession, QuorumConfig};
use blocks_sim::types::{Embedding, NodeId};

fn main() {
    let mut chain = Chain::new(
        ReputationParams::default(),
        EscrowConfig::default(),
        QuorumConfig {
            min_suppliers: 2,
            min_validators: 3,
            validator_sample_size: 3,
            official_required: true,
        },
        0.5,
    );
    let user = NodeId::from("u00");
    chain.register_user(&user, 10.0);
    for s in ["s01", "s02"] {
        chain.register_supplier(&s.into()).unwrap();
    }
    for v in ["v01", "v02", "v03"] {
        chain.register_validator(&v.into()).unwrap();
    }

    let topic = Embedding::normalized(vec![1.0, 0.0, 0.0]).unwrap();
    let query = blocks_sim::session::Query {
        text: "What is the capital of France?".into(),
        topic_id: 0,
        variant_id: 0,
        embedding: topic.clone(),
    };
    let mut cache = ProCache::new(CacheConfig::default());

    let (mut session, ev) = QuerySession::create(0, &user, query, 3.0, &mut chain).unwrap();
    println!("{:?}: escrow {}, rationale {:?}", ev.kind, session.escrow, session.rationale);
    println!("{:?}", session.post_cache(CacheResult::Miss).unwrap().kind);

    let off_topic = Embedding::normalized(vec![0.0, 1.0, 0.0]).unwrap();
    session
        .update_knowledge(&"s01".into(), "Paris is the capital of France.", topic.clone(), 0.9)
        .unwrap();
    session
        .update_knowledge(&"s02".into(), "Buy cheap watches here.", off_topic, 0.1)
        .unwrap();

    for v in ["v01", "v02", "v03"] {
        session
            .update_validation(&v.into(), Assessment::Regular { scores: vec![0.9, 0.2] })
            .unwrap();
    }
    session
        .update_validation(
            &"official".into(),
            Assessment::Official {
                scores: vec![0.9, 0.1],
                similarities: vec![1.0, 0.0],
            },
        )
        .unwrap();

    let (ev, report) = session.finalize(&mut chain, &mut cache, 0, &mut |_| 0.9).unwrap();
    println!("{:?}: {:?}", ev.kind, ev.outcome);
    println!("rejected by official check: {:?}", report.rejected_suppliers);
    for p in &report.payouts {
        println!("  {:?} {} {:.2}", p.kind, p.node_id, p.amount);
    }
    for t in &session.transitions {
        println!("  {} -> {} ({:?})", t.from, t.to, t.event);
    }
    for id in ["s01", "s02"] {
        println!("{id} reputation {:.3}", chain.supplier_reputation(&id.into()));
    }
}
