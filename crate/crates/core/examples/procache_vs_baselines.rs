//! Replays one access trace through PROCache, LFU and LRU-k. Half the prompts
//! are popular but low reputation; PROCache keeps them out.

use blocks_sim::ledger::sha256;
use blocks_sim::procache::{build_cache, AccessOutcome, CacheConfig, CacheMetadata, CacheNode, CacheNodeId, PolicyKind};
use blocks_sim::types::Embedding;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const PROMPTS: usize = 40;

fn node(i: usize, frequency: u64) -> CacheNode {
    let content = format!("prompt {i}");
    let mut v = vec![0.0; PROMPTS];
    v[i] = 1.0;
    let reputation = if i.is_multiple_of(2) { 0.9 } else { 0.1 };
    CacheNode::new(
        CacheNodeId::new(sha256(content.as_bytes()), 0),
        content,
        CacheMetadata {
            embedding: Embedding::normalized(v).unwrap(),
            cost: 1.0,
            size: 1.0,
            reputation,
        },
        frequency,
    )
}

fn main() {
    for kind in [PolicyKind::Procache, PolicyKind::Lfu, PolicyKind::Lruk] {
        let mut cache = build_cache(
            kind,
            CacheConfig {
                capacity: 10,
                ..Default::default()
            },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut hits = 0;
        let accesses = 2000;
        for now in 0..accesses {
            // low-reputation prompts are drawn twice as often
            let i = if rng.random_bool(2.0 / 3.0) {
                2 * rng.random_range(0..PROMPTS / 2) + 1
            } else {
                2 * rng.random_range(0..PROMPTS / 2)
            };
            let hash = node(i, 1).id.hash;
            match cache.access(&hash, now) {
                AccessOutcome::Hit { .. } => hits += 1,
                AccessOutcome::Miss { promoted: true } => {
                    // a promoted prompt enters with the accesses that earned admission
                    let f = if kind == PolicyKind::Procache { cache.config().k } else { 1 };
                    cache.insert(node(i, f), now).unwrap();
                }
                AccessOutcome::Miss { promoted: false } => {}
            }
        }
        println!(
            "{kind}: hit rate {:.3}, mean in-cache reputation {:.3}, evictions {}",
            hits as f64 / accesses as f64,
            cache.mean_reputation().unwrap_or(0.0),
            cache.evictions()
        );
    }
}
