use std::collections::{BTreeMap, BTreeSet};

use proptest::prelude::*;

use blocks_sim::ledger::{sha256, Ledger, Prefix};
use blocks_sim::poi::{distribute_resale, impact_reward, settle_round, ImpactRecord, RewardParams, WealthLedger};
use blocks_sim::procache::{
    build_cache, priority_of, AccessOutcome, CacheConfig, CacheMetadata, CacheNode, CacheNodeId, PolicyKind,
};
use blocks_sim::reputation::{
    consistency, update_llm_reputation, update_prompt_reputation, update_supplier_reputation,
    update_validator_reputation, FeedbackRecord, ReputationParams, ValidationRecord,
};
use blocks_sim::types::{Digest, Embedding, NodeId};

fn unit() -> impl Strategy<Value = f64> {
    0.0..=1.0f64
}

fn records(pairs: &[(f64, f64)]) -> Vec<ValidationRecord> {
    pairs
        .iter()
        .enumerate()
        .map(|(i, (s, r))| ValidationRecord::new(format!("v{i}"), *s, *r))
        .collect()
}

fn params(alpha: f64) -> ReputationParams {
    ReputationParams {
        alpha,
        ..Default::default()
    }
}

proptest! {
    #[test]
    fn reputations_stay_in_unit_range(
        prev in unit(),
        alpha in 0.001..=1.0f64,
        cs in prop::collection::vec(unit(), 0..8),
        vals in prop::collection::vec((unit(), unit()), 0..12),
        fbs in prop::collection::vec((unit(), unit()), 0..4),
        reps in prop::collection::vec(unit(), 0..6),
    ) {
        let p = params(alpha);
        let feedback: Vec<FeedbackRecord> = fbs
            .iter()
            .map(|(a, r)| FeedbackRecord { llm_id: "u".into(), accuracy: *a, llm_reputation: *r })
            .collect();
        for r in [
            update_llm_reputation(prev, &cs, &p),
            update_validator_reputation(prev, &cs, &p),
            update_supplier_reputation(prev, &reps, &p),
            update_prompt_reputation(prev, &records(&vals), &feedback),
        ] {
            prop_assert!((0.0..=1.0).contains(&r));
        }
        if let Some((own, rest)) = vals.split_first() {
            let cs = consistency(own.0, &records(rest), 1.0).unwrap();
            prop_assert!((0.0..=1.0).contains(&cs));
        }
    }

    #[test]
    fn ema_strictly_decreases_in_mean_consistency(
        prev in unit(), alpha in 0.01..=1.0f64, c in 0.0..0.99f64, step in 1e-6..0.01f64,
    ) {
        let p = params(alpha);
        prop_assert!(update_validator_reputation(prev, &[c], &p) > update_validator_reputation(prev, &[c + step], &p));
        prop_assert!(update_llm_reputation(prev, &[c], &p) > update_llm_reputation(prev, &[c + step], &p));
    }

    #[test]
    fn consistency_ignores_order_of_others(
        own in unit(),
        others in prop::collection::vec((unit(), unit()), 1..10),
        seed in any::<u64>(),
    ) {
        let mut shuffled = others.clone();
        let k = (seed as usize) % shuffled.len();
        shuffled.rotate_left(k);
        shuffled.reverse();
        let a = consistency(own, &records(&others), 1.0).unwrap();
        let b = consistency(own, &records(&shuffled), 1.0).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn single_validation_prompt_reputation_is_monotone(
        r_k in unit(), v in 0.0..0.9f64, bump in 0.0..0.1f64, rep in unit(),
    ) {
        let lo = update_prompt_reputation(r_k, &records(&[(v, rep)]), &[]);
        let hi = update_prompt_reputation(r_k, &records(&[(v + bump, rep)]), &[]);
        prop_assert!(hi >= lo);
    }

    #[test]
    fn resale_split_is_proportional_and_complete(
        pool in 0.0..1000.0f64,
        reps in prop::collection::btree_map("[a-z]{1,4}", 0.0..=1.0f64, 1..8),
    ) {
        prop_assume!(reps.values().any(|r| *r > 0.0));
        let reps: BTreeMap<NodeId, f64> = reps.into_iter().map(|(k, v)| (NodeId::from(k), v)).collect();
        let split = distribute_resale(pool, &reps).unwrap();
        let total: f64 = split.values().sum();
        prop_assert!((total - pool).abs() <= 1e-9 * pool.max(1.0));
        let rep_total: f64 = reps.values().sum();
        for (id, r) in &reps {
            prop_assert!((split[id] - pool * r / rep_total).abs() <= 1e-9 * pool.max(1.0));
        }
    }

    #[test]
    fn settlement_mints_exactly_the_rewards(
        recs in prop::collection::vec((0u64..50, 0u64..50, unit()), 1..10),
        bonus in 0.0..5.0f64,
        payout in 0.0..10.0f64,
    ) {
        let records: Vec<ImpactRecord> = recs
            .iter()
            .enumerate()
            .map(|(i, (ap, av, r))| ImpactRecord {
                node_id: NodeId::from(format!("n{i}")),
                prompt_accesses: *ap,
                validation_accesses: *av,
                reputation: *r,
            })
            .collect();
        let params = RewardParams { beta: 0.5, proposer_bonus: bonus };
        let payouts = BTreeMap::from([(NodeId::from("n0"), payout)]);
        let mut wealth = WealthLedger::new();
        let s = settle_round(&mut wealth, &records, &payouts, &params).unwrap();
        let expected: f64 = records.iter().map(|r| impact_reward(r, &params)).sum::<f64>() + payout + bonus;
        prop_assert!((s.minted - expected).abs() < 1e-9);
        prop_assert!((wealth.total() - expected).abs() < 1e-9);
        prop_assert!(records.iter().all(|r| impact_reward(r, &params) >= 0.0));
    }

    #[test]
    fn poisoned_prompt_never_outranks_an_honest_one(
        freq in 1u64..10_000,
        cost in 0.01..100.0f64,
        size in 0.01..100.0f64,
        r_b in 0.1..0.9f64,
        delta in 0.01..0.1f64,
        bad_rep_frac in unit(),
        good_rep_frac in unit(),
        eps in 0.01..10.0f64,
    ) {
        let bad_rep = (r_b - delta) * bad_rep_frac;
        let good_rep = r_b + delta + (1.0 - r_b - delta).max(0.0) * good_rep_frac;
        prop_assume!(good_rep <= 1.0);
        let bad = priority_of(freq, cost, size, bad_rep, r_b).unwrap();
        // honest prompt with raw base 1 + eps
        let good = priority_of(1, 1.0 + eps, 1.0, good_rep, r_b).unwrap();
        prop_assert!(bad <= 1.0);
        prop_assert!(good > 1.0);
    }

    #[test]
    fn ledger_stores_each_distinct_prompt_once(
        puts in prop::collection::vec((0usize..12, 0usize..4), 1..60),
    ) {
        for colliding in [false, true] {
            let mut ledger = if colliding { Ledger::with_hasher(|_| [7u8; 32]) } else { Ledger::new() };
            let mut first: BTreeMap<usize, NodeId> = BTreeMap::new();
            let mut keys = BTreeMap::new();
            for (c, s) in &puts {
                let content = format!("prompt {c}");
                let supplier = NodeId::from(format!("s{s}"));
                let key = ledger.put_prompt(&content, &supplier).unwrap();
                let owner = first.entry(*c).or_insert_with(|| supplier.clone());
                prop_assert_eq!(&ledger.data_table(&key).unwrap().supplier_id, &*owner);
                prop_assert_eq!(keys.entry(*c).or_insert_with(|| key.clone()), &key);
                prop_assert_eq!(ledger.find_prompt(&content), Some(key));
            }
            let stats = ledger.stats();
            prop_assert_eq!(stats.count(Prefix::DataTable), first.len());
            prop_assert_eq!(stats.count(Prefix::ReputationPrompt), first.len());
            let distinct: BTreeSet<_> = keys.values().cloned().collect();
            prop_assert_eq!(distinct.len(), first.len());
        }
    }
}

fn digest(i: u8) -> Digest {
    sha256(&[i])
}

fn node(hash: Digest, frequency: u64, cost: f64, size: f64, reputation: f64) -> CacheNode {
    CacheNode::new(
        CacheNodeId::new(hash, 0),
        "content",
        CacheMetadata {
            embedding: Embedding::normalized(vec![1.0, 0.0]).unwrap(),
            cost,
            size,
            reputation,
        },
        frequency,
    )
}

#[derive(Clone, Debug)]
enum Op {
    Access { key: u8, cost: f64, size: f64, rep: f64 },
    Rescore { key: u8, rep: f64 },
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        4 => (0u8..24, 0.5..4.0f64, 0.2..3.0f64, unit()).prop_map(|(key, cost, size, rep)| Op::Access { key, cost, size, rep }),
        1 => (0u8..24, unit()).prop_map(|(key, rep)| Op::Rescore { key, rep }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Residency bound, heap coherence against a full sort, and k-admission.
    #[test]
    fn procache_matches_a_brute_force_model(
        ops in prop::collection::vec(op(), 1..200),
        capacity in 1usize..8,
        k in 1u64..4,
        r_b in 0.0..1.0f64,
    ) {
        let cfg = CacheConfig { capacity, k, r_b, ..Default::default() };
        let mut cache = build_cache(PolicyKind::Procache, cfg);
        let mut lifetime: BTreeMap<Digest, u64> = BTreeMap::new();
        for (now, op) in ops.into_iter().enumerate() {
            let now = now as u64;
            match op {
                Op::Access { key, cost, size, rep } => {
                    let h = digest(key);
                    *lifetime.entry(h).or_default() += 1;
                    if let AccessOutcome::Miss { promoted: true } = cache.access(&h, now) {
                        // the newcomer competes for its own slot
                        let fresh = node(h, k, cost, size, rep);
                        let fresh_priority = priority_of(k, cost, size, rep, r_b).unwrap();
                        let expected = if cache.len() >= capacity {
                            cache
                                .residents()
                                .values()
                                .map(|n| (n.priority, n.last_access, n.id))
                                .chain([(fresh_priority, now, fresh.id)])
                                .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)))
                                .map(|t| t.2)
                        } else {
                            None
                        };
                        let evicted = cache.insert(fresh, now).unwrap();
                        prop_assert_eq!(evicted.first().copied(), expected);
                    }
                }
                Op::Rescore { key, rep } => {
                    let id = CacheNodeId::new(digest(key), 0);
                    if cache.get(&id).is_some() {
                        cache.update_reputation(&id, rep).unwrap();
                    }
                }
            }
            prop_assert!(cache.len() <= capacity);
            for n in cache.residents().values() {
                let p = priority_of(n.frequency, n.metadata.cost, n.metadata.size, n.metadata.reputation, r_b).unwrap();
                prop_assert_eq!(n.priority, p);
                prop_assert!(lifetime[&n.id.hash] >= k);
            }
        }
    }

    #[test]
    fn lfu_evicts_a_least_frequent_node(
        keys in prop::collection::vec(0u8..16, 1..150),
        capacity in 1usize..6,
    ) {
        let cfg = CacheConfig { capacity, ..Default::default() };
        let mut cache = build_cache(PolicyKind::Lfu, cfg);
        for (now, key) in keys.into_iter().enumerate() {
            let h = digest(key);
            if let AccessOutcome::Miss { promoted } = cache.access(&h, now as u64) {
                prop_assert!(promoted);
                let before: BTreeMap<CacheNodeId, u64> =
                    cache.residents().values().map(|n| (n.id, n.frequency)).collect();
                let full = cache.len() >= capacity;
                let evicted = cache.insert(node(h, 1, 1.0, 1.0, 0.5), now as u64).unwrap();
                if full {
                    prop_assert_eq!(evicted.len(), 1);
                    let min = before.values().min().copied();
                    prop_assert_eq!(before.get(&evicted[0]).copied(), min);
                } else {
                    prop_assert!(evicted.is_empty());
                }
            }
            prop_assert!(cache.len() <= capacity);
        }
    }
}

#[test]
fn recomputed_spread_can_outweigh_a_higher_score() {
    // Raising a low-reputation validator's score widens the spread by more
    // than it adds to the weighted mean.
    let before = update_prompt_reputation(0.5, &records(&[(0.5, 0.1), (0.5, 1.0)]), &[]);
    let after = update_prompt_reputation(0.5, &records(&[(0.9, 0.1), (0.5, 1.0)]), &[]);
    assert!(after < before, "{after} vs {before}");
}
