//! Reputation-aware prompt cache.
//!
//! A miss only records the prompt hash in a bounded history queue. After `k`
//! accesses the prompt is promoted and the caller inserts a full
//! [`CacheNode`]. Residents are ordered by
//!
//! ```text
//! priority = max(frequency * cost / size, 1) ^ (reputation - r_b)
//! ```
//!
//! so any prompt whose reputation is below `r_b` sits at or below 1 and is
//! evicted before reputable prompts, however often it is accessed.
//!
//! [`Lfu`] and [`LruK`] implement the same [`CachePolicy`] trait and admit on
//! first access.

mod baseline;

pub use baseline::{Lfu, LruK};

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{in_unit_range, Digest, Embedding, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum CacheError {
    #[error("cost, size and frequency must be positive (cost {cost}, size {size}, frequency {frequency})")]
    NonPositiveInput { frequency: u64, cost: f64, size: f64 },
    #[error("node {0} is already resident")]
    DuplicateNodeId(CacheNodeId),
    #[error("node {0} is not resident")]
    MissingNode(CacheNodeId),
    #[error("node {id} has {frequency} accesses, admission needs {k}")]
    NotAdmitted { id: CacheNodeId, frequency: u64, k: u64 },
    #[error("query embedding is not a unit vector")]
    BadEmbedding,
    #[error("reputation {0} is outside [0, 1]")]
    OutOfRange(f64),
}

/// Resident key: the prompt digest plus its ledger collision count.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CacheNodeId {
    pub hash: Digest,
    pub count: u32,
}

impl CacheNodeId {
    pub fn new(hash: Digest, count: u32) -> Self {
        Self { hash, count }
    }
}

impl fmt::Display for CacheNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}#{}", hex::encode(&self.hash[..6]), self.count)
    }
}

impl fmt::Debug for CacheNodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheMetadata {
    pub embedding: Embedding,
    /// Tokens the original requester paid for the prompt.
    pub cost: f64,
    pub size: f64,
    pub reputation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheNode {
    pub id: CacheNodeId,
    pub content: String,
    pub metadata: CacheMetadata,
    pub frequency: u64,
    pub priority: f64,
    pub last_access: u64,
    /// Suppliers credited when the node is resold.
    pub providers: Vec<NodeId>,
}

impl CacheNode {
    pub fn new(id: CacheNodeId, content: impl Into<String>, metadata: CacheMetadata, frequency: u64) -> Self {
        Self {
            id,
            content: content.into(),
            metadata,
            frequency,
            priority: 0.0,
            last_access: 0,
            providers: Vec::new(),
        }
    }

    pub fn with_providers(mut self, providers: Vec<NodeId>) -> Self {
        self.providers = providers;
        self
    }
}

/// Lightweight record of a prompt that has missed but not yet been admitted.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub hash: Digest,
    pub access_count: u64,
    pub last_access_round: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    #[serde(alias = "PROCache", alias = "pro_cache")]
    Procache,
    #[serde(alias = "LFU")]
    Lfu,
    #[serde(alias = "LRUk", alias = "lru_k")]
    Lruk,
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Procache => "procache",
            PolicyKind::Lfu => "lfu",
            PolicyKind::Lruk => "lruk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CacheConfig {
    /// Maximum resident nodes.
    pub capacity: usize,
    /// Accesses in the history queue before admission.
    pub k: u64,
    /// Reputation threshold separating promoted from demoted prompts.
    pub r_b: f64,
    pub history_capacity: usize,
    /// Minimum cosine similarity for a retrieve hit.
    pub similarity_threshold: f64,
    /// History depth of the LRU-k baseline.
    pub lru_k: usize,
    /// Bytes per unit of `size` in the priority formula.
    pub size_unit_bytes: f64,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self {
            capacity: 64,
            k: 2,
            r_b: 0.4,
            history_capacity: 256,
            similarity_threshold: 0.8,
            lru_k: 2,
            size_unit_bytes: 100.0,
        }
    }
}

impl CacheConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.capacity == 0 {
            return Err("cache.capacity must be at least 1".into());
        }
        if self.k == 0 {
            return Err("cache.k must be at least 1".into());
        }
        if self.history_capacity == 0 {
            return Err("cache.history_capacity must be at least 1".into());
        }
        if self.lru_k == 0 {
            return Err("cache.lru_k must be at least 1".into());
        }
        if !in_unit_range(self.r_b) {
            return Err(format!("cache.r_b must be in [0, 1], got {}", self.r_b));
        }
        if !(-1.0..=1.0).contains(&self.similarity_threshold) {
            return Err(format!(
                "cache.similarity_threshold must be in [-1, 1], got {}",
                self.similarity_threshold
            ));
        }
        if !(self.size_unit_bytes > 0.0) {
            return Err("cache.size_unit_bytes must be positive".into());
        }
        Ok(())
    }
}

/// `max(frequency * cost / size, 1) ^ (reputation - r_b)`.
pub fn priority_of(frequency: u64, cost: f64, size: f64, reputation: f64, r_b: f64) -> Result<f64, CacheError> {
    if frequency == 0 || !(cost > 0.0) || !(size > 0.0) {
        return Err(CacheError::NonPositiveInput { frequency, cost, size });
    }
    let base = (frequency as f64 * cost / size).max(1.0);
    Ok(base.powf(reputation - r_b))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum AccessOutcome {
    Hit { node_id: CacheNodeId, frequency: u64 },
    /// `promoted` asks the caller to insert the full node now.
    Miss { promoted: bool },
}

impl AccessOutcome {
    pub fn is_hit(&self) -> bool {
        matches!(self, AccessOutcome::Hit { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RetrieveHit {
    pub node_id: CacheNodeId,
    pub similarity: f64,
}

/// Operations shared by PROCache and the baselines.
pub trait CachePolicy: Send {
    fn kind(&self) -> PolicyKind;
    fn config(&self) -> &CacheConfig;
    /// Records an access to the prompt with digest `hash` at logical time `now`.
    fn access(&mut self, hash: &Digest, now: u64) -> AccessOutcome;
    /// Makes `node` resident and returns the ids evicted to respect capacity.
    fn insert(&mut self, node: CacheNode, now: u64) -> Result<Vec<CacheNodeId>, CacheError>;
    fn update_reputation(&mut self, id: &CacheNodeId, reputation: f64) -> Result<(), CacheError>;
    fn get(&self, id: &CacheNodeId) -> Option<&CacheNode>;
    fn residents(&self) -> &BTreeMap<CacheNodeId, CacheNode>;
    fn evictions(&self) -> u64;
    /// Credits another supplier for a resident node.
    fn add_provider(&mut self, id: &CacheNodeId, provider: &NodeId) -> Result<(), CacheError>;

    fn len(&self) -> usize {
        self.residents().len()
    }

    fn is_empty(&self) -> bool {
        self.residents().is_empty()
    }

    fn contains_hash(&self, hash: &Digest) -> bool {
        resident_for_hash(self.residents(), hash).is_some()
    }

    /// Most similar resident at or above `threshold`; ties go to the smallest id.
    fn retrieve(&self, query: &Embedding, threshold: f64) -> Result<Option<RetrieveHit>, CacheError> {
        retrieve_from(self.residents(), query, threshold)
    }

    fn mean_reputation(&self) -> Option<f64> {
        let r = self.residents();
        if r.is_empty() {
            return None;
        }
        Some(r.values().map(|n| n.metadata.reputation).sum::<f64>() / r.len() as f64)
    }
}

pub fn build_cache(kind: PolicyKind, config: CacheConfig) -> Box<dyn CachePolicy> {
    match kind {
        PolicyKind::Procache => Box::new(ProCache::new(config)),
        PolicyKind::Lfu => Box::new(Lfu::new(config)),
        PolicyKind::Lruk => Box::new(LruK::new(config)),
    }
}

pub(crate) fn resident_for_hash(store: &BTreeMap<CacheNodeId, CacheNode>, hash: &Digest) -> Option<CacheNodeId> {
    store
        .range(CacheNodeId::new(*hash, 0)..=CacheNodeId::new(*hash, u32::MAX))
        .next()
        .map(|(id, _)| *id)
}

pub(crate) fn retrieve_from(
    store: &BTreeMap<CacheNodeId, CacheNode>,
    query: &Embedding,
    threshold: f64,
) -> Result<Option<RetrieveHit>, CacheError> {
    if !query.is_unit() {
        return Err(CacheError::BadEmbedding);
    }
    let mut best: Option<RetrieveHit> = None;
    // ascending id order, so strict > keeps the smallest id on ties
    for (id, node) in store {
        let sim = query.dot(&node.metadata.embedding).map_err(|_| CacheError::BadEmbedding)?;
        if sim >= threshold && best.is_none_or(|b| sim > b.similarity) {
            best = Some(RetrieveHit { node_id: *id, similarity: sim });
        }
    }
    Ok(best)
}

pub(crate) fn check_reputation(reputation: f64) -> Result<(), CacheError> {
    if in_unit_range(reputation) {
        Ok(())
    } else {
        Err(CacheError::OutOfRange(reputation))
    }
}

/// Total-order wrapper for eviction keys.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Score(pub f64);

impl Eq for Score {}

impl PartialOrd for Score {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Score {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

type EvictKey = (Score, u64, CacheNodeId);

#[derive(Clone, Debug)]
pub struct ProCache {
    config: CacheConfig,
    store: BTreeMap<CacheNodeId, CacheNode>,
    queue: BTreeSet<EvictKey>,
    history: HashMap<Digest, HistoryEntry>,
    history_order: VecDeque<Digest>,
    evictions: u64,
}

impl ProCache {
    pub fn new(config: CacheConfig) -> Self {
        Self {
            config,
            store: BTreeMap::new(),
            queue: BTreeSet::new(),
            history: HashMap::new(),
            history_order: VecDeque::new(),
            evictions: 0,
        }
    }

    pub fn history_entry(&self, hash: &Digest) -> Option<&HistoryEntry> {
        self.history.get(hash)
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    /// Resident with the lowest priority, older access first on ties.
    pub fn peek_victim(&self) -> Option<CacheNodeId> {
        self.queue.first().map(|(_, _, id)| *id)
    }

    fn key_of(node: &CacheNode) -> EvictKey {
        (Score(node.priority), node.last_access, node.id)
    }

    fn refresh(&mut self, id: &CacheNodeId, update: impl FnOnce(&mut CacheNode)) -> Result<(), CacheError> {
        let r_b = self.config.r_b;
        let node = self.store.get_mut(id).ok_or(CacheError::MissingNode(*id))?;
        self.queue.remove(&Self::key_of(node));
        update(node);
        let m = &node.metadata;
        node.priority = priority_of(node.frequency, m.cost, m.size, m.reputation, r_b)?;
        self.queue.insert(Self::key_of(node));
        Ok(())
    }

    fn record_history(&mut self, hash: &Digest, now: u64) -> bool {
        let k = self.config.k;
        let entry = self.history.entry(*hash).or_insert_with(|| HistoryEntry {
            hash: *hash,
            access_count: 0,
            last_access_round: now,
        });
        let fresh = entry.access_count == 0;
        entry.access_count += 1;
        entry.last_access_round = now;
        if entry.access_count >= k {
            self.history.remove(hash);
            return true;
        }
        if fresh {
            self.history_order.push_back(*hash);
        }
        while self.history.len() > self.config.history_capacity {
            match self.history_order.pop_front() {
                Some(old) => {
                    self.history.remove(&old);
                }
                None => break,
            }
        }
        // drop order slots whose entries were promoted
        while let Some(front) = self.history_order.front() {
            if self.history.contains_key(front) {
                break;
            }
            self.history_order.pop_front();
        }
        false
    }
}

impl CachePolicy for ProCache {
    fn kind(&self) -> PolicyKind {
        PolicyKind::Procache
    }

    fn config(&self) -> &CacheConfig {
        &self.config
    }

    fn access(&mut self, hash: &Digest, now: u64) -> AccessOutcome {
        if let Some(id) = resident_for_hash(&self.store, hash) {
            self.refresh(&id, |n| {
                n.frequency += 1;
                n.last_access = now;
            })
            .expect("resident node has valid metadata");
            let frequency = self.store[&id].frequency;
            return AccessOutcome::Hit { node_id: id, frequency };
        }
        AccessOutcome::Miss {
            promoted: self.record_history(hash, now),
        }
    }

    fn insert(&mut self, mut node: CacheNode, now: u64) -> Result<Vec<CacheNodeId>, CacheError> {
        if self.store.contains_key(&node.id) {
            return Err(CacheError::DuplicateNodeId(node.id));
        }
        if node.frequency < self.config.k {
            return Err(CacheError::NotAdmitted {
                id: node.id,
                frequency: node.frequency,
                k: self.config.k,
            });
        }
        check_reputation(node.metadata.reputation)?;
        let m = &node.metadata;
        node.priority = priority_of(node.frequency, m.cost, m.size, m.reputation, self.config.r_b)?;
        node.last_access = now;
        self.history.remove(&node.id.hash);
        self.queue.insert(Self::key_of(&node));
        self.store.insert(node.id, node);
        let mut evicted = Vec::new();
        while self.store.len() > self.config.capacity {
            let Some(key) = self.queue.pop_first() else { break };
            self.store.remove(&key.2);
            self.evictions += 1;
            evicted.push(key.2);
        }
        Ok(evicted)
    }

    fn update_reputation(&mut self, id: &CacheNodeId, reputation: f64) -> Result<(), CacheError> {
        check_reputation(reputation)?;
        self.refresh(id, |n| n.metadata.reputation = reputation)
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
