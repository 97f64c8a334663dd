//! Reputation-blind baselines. Both admit on first access.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use super::{
    check_reputation, priority_of, resident_for_hash, AccessOutcome, CacheConfig, CacheError, CacheNode,
    CacheNodeId, CachePolicy, PolicyKind,
};
use crate::types::{Digest, NodeId};

fn admit(node: &mut CacheNode, config: &CacheConfig, now: u64) -> Result<(), CacheError> {
    check_reputation(node.metadata.reputation)?;
    node.frequency = node.frequency.max(1);
    let m = &node.metadata;
    // kept for reporting only; baselines never read it
    node.priority = priority_of(node.frequency, m.cost, m.size, m.reputation, config.r_b)?;
    node.last_access = now;
    Ok(())
}

/// Least-frequently-used; ties evict the older last access.
#[derive(Clone, Debug)]
pub struct Lfu {
    config: CacheConfig,
    store: BTreeMap<CacheNodeId, CacheNode>,
    queue: BTreeSet<(u64, u64, CacheNodeId)>,
    evictions: u64,
}

impl Lfu {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            store: BTreeMap::new(),
            queue: BTreeSet::new(),
            evictions: 0,
        }
    }

    fn key(n: &CacheNode) -> (u64, u64, CacheNodeId) {
        (n.frequency, n.last_access, n.id)
    }
}

impl CachePolicy for Lfu {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lfu
    }

    fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn access(&mut self, hash: &Digest, now: u64) -> AccessOutcome {
        let Some(id) = resident_for_hash(&self.store, hash) else {
            return AccessOutcome::Miss { promoted: true };
        };
        let node = self.store.get_mut(&id).expect("resident");
        self.queue.remove(&Self::key(node));
        node.frequency += 1;
        node.last_access = now;
        self.queue.insert(Self::key(node));
        AccessOutcome::Hit {
            node_id: id,
            frequency: node.frequency,
        }
    }

    fn insert(&mut self, mut node: CacheNode, now: u64) -> Result<Vec<CacheNodeId>, CacheError> {
        if self.store.contains_key(&node.id) {
            return Err(CacheError::DuplicateNodeId(node.id));
        }
        admit(&mut node, &self.config, now)?;
        let mut evicted = Vec::new();
        // make room first so the newcomer is never its own victim
        while self.store.len() >= self.config.capacity {
            let Some((_, _, victim)) = self.queue.pop_first() else { break };
            self.store.remove(&victim);
            self.evictions += 1;
            evicted.push(victim);
        }
        self.queue.insert(Self::key(&node));
        self.store.insert(node.id, node);
        Ok(evicted)
    }

    fn update_reputation(&mut self, id: &CacheNodeId, reputation: f64) -> Result<(), CacheError> {
        check_reputation(reputation)?;
        let r_b = self.config.r_b;
        let node = self.store.get_mut(id).ok_or(CacheError::MissingNode(*id))?;
        node.metadata.reputation = reputation;
        let m = &node.metadata;
        node.priority = priority_of(node.frequency, m.cost, m.size, reputation, r_b)?;
        Ok(())
    }

    fn get(&self, id: &CacheNodeId) -> Option<&CacheNode> {
        self.store.get(id)
    }

    fn residents(&self) -> &BTreeMap<CacheNodeId, CacheNode> {
        &self.store
    }

    fn evictions(&self) -> u64 {
        self.evictions
    }

    fn add_provider(&mut self, id: &CacheNodeId, provider: &NodeId) -> Result<(), CacheError> {
        let node = self.store.get_mut(id).ok_or(CacheError::MissingNode(*id))?;
        if !node.providers.contains(provider) {
            node.providers.push(provider.clone());
        }
        Ok(())
    }
}

/// LRU-k: evicts the resident whose k-th most recent access is oldest.
/// Residents with fewer than k accesses count as infinitely old and go first,
/// ordered by their last access.
#[derive(Clone, Debug)]
pub struct LruK {
    config: CacheConfig,
    store: BTreeMap<CacheNodeId, CacheNode>,
    times: HashMap<CacheNodeId, VecDeque<u64>>,
    evictions: u64,
}

impl LruK {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            store: BTreeMap::new(),
            times: HashMap::new(),
            evictions: 0,
        }
    }

    /// `(has k accesses, k-th most recent or last access, id)`; the minimum is the victim.
    fn rank(&self, id: &CacheNodeId) -> (bool, u64, CacheNodeId) {
        let t = &self.times[id];
        let full = t.len() >= self.config.lru_k;
        let stamp = if full { t[0] } else { *t.back().expect("non-empty") };
        (full, stamp, *id)
    }

    pub fn peek_victim(&self) -> Option<CacheNodeId> {
        self.store.keys().map(|id| self.rank(id)).min().map(|r| r.2)
    }

    fn touch(&mut self, id: CacheNodeId, now: u64) {
        let k = self.config.lru_k;
        let t = self.times.entry(id).or_default();
        t.push_back(now);
        while t.len() > k {
            t.pop_front();
        }
    }
}

impl CachePolicy for LruK {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Lruk
    }

    fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn access(&mut self, hash: &Digest, now: u64) -> AccessOutcome {
        let Some(id) = resident_for_hash(&self.store, hash) else {
            return AccessOutcome::Miss { promoted: true };
        };
        self.touch(id, now);
        let node = self.store.get_mut(&id).expect("resident");
        node.frequency += 1;
        node.last_access = now;
        AccessOutcome::Hit {
            node_id: id,
            frequency: node.frequency,
        }
    }

    fn insert(&mut self, mut node: CacheNode, now: u64) -> Result<Vec<CacheNodeId>, CacheError> {
        if self.store.contains_key(&node.id) {
            return Err(CacheError::DuplicateNodeId(node.id));
        }
        admit(&mut node, &self.config, now)?;
        let mut evicted = Vec::new();
        while self.store.len() >= self.config.capacity {
            let Some(victim) = self.peek_victim() else { break };
            self.store.remove(&victim);
            self.times.remove(&victim);
            self.evictions += 1;
            evicted.push(victim);
        }
        let id = node.id;
        self.store.insert(id, node);
        self.touch(id, now);
        Ok(evicted)
    }

    fn update_reputation(&mut self, id: &CacheNodeId, reputation: f64) -> Result<(), CacheError> {
        check_reputation(reputation)?;
        let r_b = self.config.r_b;
        let node = self.store.get_mut(id).ok_or(CacheError::MissingNode(*id))?;
        node.metadata.reputation = reputation;
        let m = &node.metadata;
        node.priority = priority_of(node.frequency, m.cost, m.size, reputation, r_b)?;
        Ok(())
    }

    fn get(&self, id: &CacheNodeId) -> Option<&CacheNode> {
        self.store.get(id)
    }

    fn residents(&self) -> &BTreeMap<CacheNodeId, CacheNode> {
        &self.store
    }

    fn evictions(&self) -> u64 {
        self.evictions
    }

    fn add_provider(&mut self, id: &CacheNodeId, provider: &NodeId) -> Result<(), CacheError> {
        let node = self.store.get_mut(id).ok_or(CacheError::MissingNode(*id))?;
        if !node.providers.contains(provider) {
            node.providers.push(provider.clone());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::procache::CacheMetadata;
    use crate::types::Embedding;

    fn node(b: u8, rep: f64) -> CacheNode {
        CacheNode::new(
            CacheNodeId::new([b; 32], 0),
            "x",
            CacheMetadata {
                embedding: Embedding::normalized(vec![1.0, b as f64]).unwrap(),
                cost: 1.0,
                size: 1.0,
                reputation: rep,
            },
            0,
        )
    }

    fn cfg(capacity: usize) -> CacheConfig {
        CacheConfig {
            capacity,
            ..Default::default()
        }
    }

    #[test]
    fn lfu_admits_on_first_miss_and_evicts_least_frequent() {
        let mut c = Lfu::new(cfg(2));
        assert_eq!(c.access(&[1; 32], 0), AccessOutcome::Miss { promoted: true });
        c.insert(node(1, 0.0), 0).unwrap();
        c.insert(node(2, 1.0), 1).unwrap();
        c.access(&[1; 32], 2);
        let ev = c.insert(node(3, 1.0), 3).unwrap();
        assert_eq!(ev, vec![CacheNodeId::new([2; 32], 0)]);
        assert!(c.contains_hash(&[1; 32]));
    }

    #[test]
    fn lfu_ignores_reputation() {
        let mut c = Lfu::new(cfg(1));
        c.insert(node(1, 0.0), 0).unwrap();
        c.access(&[1; 32], 1);
        c.update_reputation(&CacheNodeId::new([1; 32], 0), 0.0).unwrap();
        c.insert(node(2, 1.0), 2).unwrap();
        assert_eq!(c.len(), 1);
        assert!(c.contains_hash(&[2; 32]));
    }

    #[test]
    fn lruk_prefers_evicting_nodes_without_k_history() {
        let mut c = LruK::new(cfg(2));
        c.insert(node(1, 0.5), 0).unwrap();
        c.access(&[1; 32], 1);
        c.insert(node(2, 0.5), 5).unwrap();
        // node 1 has two accesses (0, 1); node 2 only one
        assert_eq!(c.peek_victim(), Some(CacheNodeId::new([2; 32], 0)));
        c.access(&[2; 32], 6);
        // both full: k-th most recent is 0 vs 5
        assert_eq!(c.peek_victim(), Some(CacheNodeId::new([1; 32], 0)));
        let ev = c.insert(node(3, 0.5), 7).unwrap();
        assert_eq!(ev, vec![CacheNodeId::new([1; 32], 0)]);
        assert_eq!(c.evictions(), 1);
    }
}
