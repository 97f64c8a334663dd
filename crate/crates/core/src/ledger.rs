//! Persistent chain state as an ordered key-value store.
//!
//! Keys are `prefix ‖ hash ‖ count`. Prompt records are addressed by the
//! SHA-256 of their content plus a collision counter; supplier and validator
//! reputations are addressed by node id. Iteration order follows the encoded
//! key bytes, so everything under one prefix is contiguous.

use std::collections::BTreeMap;
use std::fmt;
use std::ops::Bound;

use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::reputation::ValidationRecord;
use crate::types::{in_unit_range, Digest, NodeId};

/// Default reputation of a freshly stored prompt.
pub const DEFAULT_INITIAL_PROMPT_REPUTATION: f64 = 0.5;

pub type HashFn = fn(&[u8]) -> Digest;

pub fn sha256(bytes: &[u8]) -> Digest {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Prefix {
    DataTable,
    ReputationPrompt,
    ReputationSupplier,
    ReputationValidator,
}

impl Prefix {
    pub const ALL: [Prefix; 4] = [
        Prefix::DataTable,
        Prefix::ReputationPrompt,
        Prefix::ReputationSupplier,
        Prefix::ReputationValidator,
    ];

    fn tag(self) -> u8 {
        match self {
            Prefix::DataTable => 0x01,
            Prefix::ReputationPrompt => 0x02,
            Prefix::ReputationSupplier => 0x03,
            Prefix::ReputationValidator => 0x04,
        }
    }

    fn node_indexed(self) -> bool {
        matches!(self, Prefix::ReputationSupplier | Prefix::ReputationValidator)
    }
}

impl fmt::Display for Prefix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Prefix::DataTable => "DataTable",
            Prefix::ReputationPrompt => "ReputationPrompt",
            Prefix::ReputationSupplier => "ReputationSupplier",
            Prefix::ReputationValidator => "ReputationValidator",
        };
        f.write_str(name)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum KeyHash {
    Digest(Digest),
    Node(NodeId),
}

/// Digests serialize as hex, node ids as themselves.
impl Serialize for KeyHash {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            KeyHash::Digest(d) => serializer.serialize_str(&hex::encode(d)),
            KeyHash::Node(id) => serializer.serialize_str(id.as_str()),
        }
    }
}

impl KeyHash {
    fn bytes(&self) -> &[u8] {
        match self {
            KeyHash::Digest(d) => d,
            KeyHash::Node(id) => id.as_str().as_bytes(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
pub struct LedgerKey {
    pub prefix: Prefix,
    pub hash: KeyHash,
    pub count: u32,
}

impl LedgerKey {
    pub fn supplier(id: &NodeId) -> Self {
        Self {
            prefix: Prefix::ReputationSupplier,
            hash: KeyHash::Node(id.clone()),
            count: 0,
        }
    }

    pub fn validator(id: &NodeId) -> Self {
        Self {
            prefix: Prefix::ReputationValidator,
            hash: KeyHash::Node(id.clone()),
            count: 0,
        }
    }

    /// The `ReputationPrompt` key paired with a `DataTable` key.
    pub fn paired_reputation(&self) -> Self {
        Self {
            prefix: Prefix::ReputationPrompt,
            hash: self.hash.clone(),
            count: self.count,
        }
    }

    pub fn digest(&self) -> Option<&Digest> {
        match &self.hash {
            KeyHash::Digest(d) => Some(d),
            KeyHash::Node(_) => None,
        }
    }

    pub fn hash_hex(&self) -> String {
        hex::encode(self.hash.bytes())
    }

    /// `tag ‖ hash ‖ count (big endian)`. Node-indexed keys carry a length
    /// byte before the id so that one id is never a prefix of another's range.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = vec![self.prefix.tag()];
        if self.prefix.node_indexed() {
            let b = self.hash.bytes();
            out.push(b.len().min(u8::MAX as usize) as u8);
            out.extend_from_slice(b);
        } else {
            out.extend_from_slice(self.hash.bytes());
        }
        out.extend_from_slice(&self.count.to_be_bytes());
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataTableEntry {
    pub prompt_content: String,
    pub supplier_id: NodeId,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptReputationEntry {
    pub reputation: f64,
    pub validations: Vec<ValidationRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupplierReputationEntry {
    pub reputation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidatorReputationEntry {
    pub reputation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LedgerEntry {
    DataTable(DataTableEntry),
    ReputationPrompt(PromptReputationEntry),
    ReputationSupplier(SupplierReputationEntry),
    ReputationValidator(ValidatorReputationEntry),
}

impl LedgerEntry {
    fn reputation_mut(&mut self) -> Option<&mut f64> {
        match self {
            LedgerEntry::DataTable(_) => None,
            LedgerEntry::ReputationPrompt(e) => Some(&mut e.reputation),
            LedgerEntry::ReputationSupplier(e) => Some(&mut e.reputation),
            LedgerEntry::ReputationValidator(e) => Some(&mut e.reputation),
        }
    }

    pub fn reputation(&self) -> Option<f64> {
        match self {
            LedgerEntry::DataTable(_) => None,
            LedgerEntry::ReputationPrompt(e) => Some(e.reputation),
            LedgerEntry::ReputationSupplier(e) => Some(e.reputation),
            LedgerEntry::ReputationValidator(e) => Some(e.reputation),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum LedgerError {
    #[error("prompt content is empty")]
    EmptyPrompt,
    #[error("no entry under {0}")]
    MissingEntry(String),
    #[error("value {0} is outside [0, 1]")]
    OutOfRange(f64),
    #[error("{0} entries do not carry that field")]
    WrongPrefix(Prefix),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LedgerStats {
    pub entries_per_prefix: BTreeMap<Prefix, usize>,
    pub total_prompt_bytes: usize,
}

impl LedgerStats {
    pub fn count(&self, prefix: Prefix) -> usize {
        self.entries_per_prefix.get(&prefix).copied().unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotRow {
    pub key_hex: String,
    pub count: u32,
    pub entry: LedgerEntry,
}

/// JSON-ready dump: prefix name to rows in key order.
pub type LedgerSnapshot = BTreeMap<String, Vec<SnapshotRow>>;

#[derive(Clone)]
pub struct Ledger {
    entries: BTreeMap<Vec<u8>, (LedgerKey, LedgerEntry)>,
    hasher: HashFn,
    initial_prompt_reputation: f64,
}

impl fmt::Debug for Ledger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Ledger")
            .field("entries", &self.entries.len())
            .field("initial_prompt_reputation", &self.initial_prompt_reputation)
            .finish()
    }
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self::with_hasher(sha256)
    }

    /// A ledger using `hasher` for prompt digests. Tests use truncated hashes to force collisions.
    pub fn with_hasher(hasher: HashFn) -> Self {
        Self {
            entries: BTreeMap::new(),
            hasher,
            initial_prompt_reputation: DEFAULT_INITIAL_PROMPT_REPUTATION,
        }
    }

    pub fn with_initial_prompt_reputation(mut self, value: f64) -> Self {
        self.initial_prompt_reputation = value.clamp(0.0, 1.0);
        self
    }

    pub fn hash(&self, content: &str) -> Digest {
        (self.hasher)(content.as_bytes())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Stores a prompt and its paired reputation record. Identical content
    /// returns the existing key and keeps the first supplier.
    pub fn put_prompt(&mut self, prompt_content: &str, supplier_id: &NodeId) -> Result<LedgerKey, LedgerError> {
        if prompt_content.is_empty() {
            return Err(LedgerError::EmptyPrompt);
        }
        let digest = self.hash(prompt_content);
        let mut next_count = 0u32;
        for (key, entry) in self.range_for(Prefix::DataTable, &digest) {
            if let LedgerEntry::DataTable(e) = entry {
                if e.prompt_content == prompt_content {
                    return Ok(key.clone());
                }
            }
            next_count = key.count + 1;
        }
        let key = LedgerKey {
            prefix: Prefix::DataTable,
            hash: KeyHash::Digest(digest),
            count: next_count,
        };
        let rep_key = key.paired_reputation();
        self.insert(
            key.clone(),
            LedgerEntry::DataTable(DataTableEntry {
                prompt_content: prompt_content.to_owned(),
                supplier_id: supplier_id.clone(),
            }),
        );
        self.insert(
            rep_key,
            LedgerEntry::ReputationPrompt(PromptReputationEntry {
                reputation: self.initial_prompt_reputation,
                validations: Vec::new(),
            }),
        );
        Ok(key)
    }

    /// Key of a stored prompt with exactly this content, if any.
    pub fn find_prompt(&self, prompt_content: &str) -> Option<LedgerKey> {
        let digest = self.hash(prompt_content);
        self.range_for(Prefix::DataTable, &digest)
            .find(|(_, e)| matches!(e, LedgerEntry::DataTable(d) if d.prompt_content == prompt_content))
            .map(|(k, _)| k.clone())
    }

    fn range_for<'a>(
        &'a self,
        prefix: Prefix,
        digest: &Digest,
    ) -> impl Iterator<Item = (&'a LedgerKey, &'a LedgerEntry)> + 'a {
        let mut lo = vec![prefix.tag()];
        lo.extend_from_slice(digest);
        let mut hi = lo.clone();
        lo.extend_from_slice(&0u32.to_be_bytes());
        hi.extend_from_slice(&u32::MAX.to_be_bytes());
        self.entries
            .range::<Vec<u8>, _>((Bound::Included(lo), Bound::Included(hi)))
            .map(|(_, (k, e))| (k, e))
    }

    fn insert(&mut self, key: LedgerKey, entry: LedgerEntry) {
        self.entries.insert(key.encode(), (key, entry));
    }

    pub fn get(&self, key: &LedgerKey) -> Option<&LedgerEntry> {
        self.entries.get(&key.encode()).map(|(_, e)| e)
    }

    pub fn prompt_reputation(&self, key: &LedgerKey) -> Option<&PromptReputationEntry> {
        match self.get(&key.paired_reputation()) {
            Some(LedgerEntry::ReputationPrompt(e)) => Some(e),
            _ => None,
        }
    }

    pub fn data_table(&self, key: &LedgerKey) -> Option<&DataTableEntry> {
        match self.get(key) {
            Some(LedgerEntry::DataTable(e)) => Some(e),
            _ => None,
        }
    }

    pub fn append_validation(&mut self, key: &LedgerKey, record: ValidationRecord) -> Result<(), LedgerError> {
        if !in_unit_range(record.score) {
            return Err(LedgerError::OutOfRange(record.score));
        }
        if !in_unit_range(record.validator_reputation) {
            return Err(LedgerError::OutOfRange(record.validator_reputation));
        }
        match self.entries.get_mut(&key.encode()) {
            Some((_, LedgerEntry::ReputationPrompt(e))) => {
                e.validations.push(record);
                Ok(())
            }
            Some(_) => Err(LedgerError::WrongPrefix(key.prefix)),
            None => Err(LedgerError::MissingEntry(key.hash_hex())),
        }
    }

    pub fn set_reputation(&mut self, key: &LedgerKey, value: f64) -> Result<(), LedgerError> {
        if !in_unit_range(value) {
            return Err(LedgerError::OutOfRange(value));
        }
        let (_, entry) = self
            .entries
            .get_mut(&key.encode())
            .ok_or_else(|| LedgerError::MissingEntry(key.hash_hex()))?;
        let slot = entry
            .reputation_mut()
            .ok_or(LedgerError::WrongPrefix(key.prefix))?;
        *slot = value;
        Ok(())
    }

    pub fn reputation(&self, key: &LedgerKey) -> Option<f64> {
        self.get(key).and_then(LedgerEntry::reputation)
    }

    /// Creates a supplier or validator reputation record if absent.
    pub fn register_node(&mut self, key: LedgerKey, initial: f64) -> Result<(), LedgerError> {
        if !in_unit_range(initial) {
            return Err(LedgerError::OutOfRange(initial));
        }
        let entry = match key.prefix {
            Prefix::ReputationSupplier => {
                LedgerEntry::ReputationSupplier(SupplierReputationEntry { reputation: initial })
            }
            Prefix::ReputationValidator => {
                LedgerEntry::ReputationValidator(ValidatorReputationEntry { reputation: initial })
            }
            other => return Err(LedgerError::WrongPrefix(other)),
        };
        self.entries.entry(key.encode()).or_insert((key, entry));
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&LedgerKey, &LedgerEntry)> {
        self.entries.values().map(|(k, e)| (k, e))
    }

    pub fn iter_prefix(&self, prefix: Prefix) -> impl Iterator<Item = (&LedgerKey, &LedgerEntry)> {
        let lo = vec![prefix.tag()];
        let hi = vec![prefix.tag() + 1];
        self.entries
            .range::<Vec<u8>, _>((Bound::Included(lo), Bound::Excluded(hi)))
            .map(|(_, (k, e))| (k, e))
    }

    pub fn stats(&self) -> LedgerStats {
        let mut stats = LedgerStats::default();
        for prefix in Prefix::ALL {
            stats
                .entries_per_prefix
                .insert(prefix, self.iter_prefix(prefix).count());
        }
        stats.total_prompt_bytes = self
            .iter_prefix(Prefix::DataTable)
            .filter_map(|(_, e)| match e {
                LedgerEntry::DataTable(d) => Some(d.prompt_content.len()),
                _ => None,
            })
            .sum();
        stats
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        let mut out = LedgerSnapshot::new();
        for prefix in Prefix::ALL {
            let rows = self
                .iter_prefix(prefix)
                .map(|(k, e)| SnapshotRow {
                    key_hex: k.hash_hex(),
                    count: k.count,
                    entry: e.clone(),
                })
                .collect();
            out.insert(prefix.to_string(), rows);
        }
        out
    }
}
