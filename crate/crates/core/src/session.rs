//! Query sessions: the four-stage transaction lifecycle, its events, and
//! escrow accounting.
//!
//! ```text
//! Created -> CacheQueried -> Validating ---------------> Finalized
//!                         \-> CollectingKnowledge -/
//! ```
//!
//! Stage ops only move state and record submissions or validations.
//! [`QuerySession::finalize`] applies every reputation update, writes the
//! ledger, settles escrow and offers the winner to the cache.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ledger::{Ledger, LedgerError, LedgerKey};
use crate::poi::{distribute_resale, PoiError, WealthLedger};
use crate::procache::{AccessOutcome, CacheError, CacheMetadata, CacheNode, CacheNodeId, CachePolicy, PolicyKind};
use crate::reputation::{
    consistency, official_check, score_agreement, update_llm_reputation, update_prompt_reputation,
    update_supplier_reputation, update_validator_reputation, FeedbackRecord, ReputationParams, ValidationRecord,
};
use crate::types::{in_unit_range, Embedding, NodeId, Tokens};

/// Absolute slack on per-session escrow conservation. Shares are real-valued.
pub const ESCROW_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum SessionError {
    #[error("payment must be positive, got {0}")]
    ZeroPayment(Tokens),
    #[error("{user} holds {balance} but the query costs {payment}")]
    InsufficientFunds { user: NodeId, balance: Tokens, payment: Tokens },
    #[error("{0} is not a registered user")]
    UnknownUser(NodeId),
    #[error("session {index}: operation needs {expected}, session is {actual}")]
    WrongState { index: u64, expected: SessionState, actual: SessionState },
    #[error("supplier {0} already submitted")]
    DuplicateSubmission(NodeId),
    #[error("validator {0} already validated")]
    DuplicateValidation(NodeId),
    #[error("session {0} is not finalizable")]
    NotFinalizable(u64),
    #[error("expected {expected} scores, got {got}")]
    ScoreCountMismatch { expected: usize, got: usize },
    #[error("score {0} is outside [0, 1]")]
    ScoreOutOfRange(f64),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error(transparent)]
    Poi(#[from] PoiError),
    #[error(transparent)]
    Cache(#[from] CacheError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SessionState {
    Created,
    CacheQueried,
    CollectingKnowledge,
    Validating,
    Finalized,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

impl SessionState {
    /// The edges a session may take.
    pub fn can_transition(self, to: SessionState) -> bool {
        use SessionState::*;
        matches!(
            (self, to),
            (Created, CacheQueried)
                | (CacheQueried, Validating)
                | (CacheQueried, CollectingKnowledge)
                | (CollectingKnowledge, Validating)
                | (Validating, Finalized)
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventKind {
    NewQuery,
    KnowledgeUpdate,
    ValidateUpdate,
    SessionFinalized,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Event {
    pub session_index: u64,
    pub kind: EventKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub outcome: Option<SessionOutcome>,
}

/// One state change, as written to the session log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Transition {
    pub session_index: u64,
    pub from: SessionState,
    pub to: SessionState,
    pub event: EventKind,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuorumConfig {
    /// Submissions that trigger validation on a cache miss.
    pub min_suppliers: usize,
    pub min_validators: usize,
    /// Regular validators drawn for each session.
    pub validator_sample_size: usize,
    pub official_required: bool,
}

impl Default for QuorumConfig {
    fn default() -> Self {
        Self {
            min_suppliers: 3,
            min_validators: 3,
            validator_sample_size: 5,
            official_required: true,
        }
    }
}

impl QuorumConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.min_suppliers == 0 {
            return Err("quorum.min_suppliers must be at least 1".into());
        }
        if self.min_validators == 0 {
            return Err("quorum.min_validators must be at least 1".into());
        }
        if self.validator_sample_size < self.min_validators {
            return Err(format!(
                "quorum.validator_sample_size ({}) is below quorum.min_validators ({})",
                self.validator_sample_size, self.min_validators
            ));
        }
        Ok(())
    }
}

/// Shares of a paid session. On a miss the three shares go to the winning
/// supplier, the regular validators and the cache account. On a hit the
/// cache account keeps `cache_service_fee` and the rest is resold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EscrowConfig {
    pub supplier_share: f64,
    pub validator_share: f64,
    pub cache_share: f64,
    pub cache_service_fee: f64,
}

impl Default for EscrowConfig {
    fn default() -> Self {
        Self {
            supplier_share: 0.6,
            validator_share: 0.3,
            cache_share: 0.1,
            cache_service_fee: 0.1,
        }
    }
}

impl EscrowConfig {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("escrow.supplier_share", self.supplier_share),
            ("escrow.validator_share", self.validator_share),
            ("escrow.cache_share", self.cache_share),
            ("escrow.cache_service_fee", self.cache_service_fee),
        ] {
            if !in_unit_range(v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        let total = self.supplier_share + self.validator_share + self.cache_share;
        if (total - 1.0).abs() > 1e-9 {
            return Err(format!("escrow shares must sum to 1, got {total}"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub text: String,
    pub topic_id: u32,
    pub variant_id: u32,
    pub embedding: Embedding,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Submission {
    pub supplier_id: NodeId,
    pub content: String,
    pub embedding: Embedding,
    /// Simulation ground truth. Never shown to validators.
    #[serde(skip)]
    pub true_quality: f64,
    /// Suppliers credited on resale. Only set for cached content.
    pub providers: Vec<NodeId>,
}

/// What the cache returned in stage 2.
#[derive(Clone, Debug, PartialEq)]
pub enum CacheResult {
    Miss,
    Hit {
        node_id: CacheNodeId,
        content: String,
        embedding: Embedding,
        providers: Vec<NodeId>,
        true_quality: f64,
    },
}

/// A validator's judgement of every submission in the session, in submission order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub enum Assessment {
    Regular { scores: Vec<f64> },
    /// The official validator also reports each submission's similarity to the query topic.
    Official { scores: Vec<f64>, similarities: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionValidation {
    pub validator_id: NodeId,
    pub is_official: bool,
    pub scores: Vec<f64>,
    pub similarities: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SessionOutcome {
    Served {
        winner: NodeId,
        prompt_hash: String,
        prompt_count: u32,
        prompt_reputation: f64,
        cache_hit: bool,
    },
    /// Every submission failed the official check; the user was refunded.
    Rejected,
}

impl SessionOutcome {
    pub fn is_served(&self) -> bool {
        matches!(self, SessionOutcome::Served { .. })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoutKind {
    Supplier,
    Validator,
    Cache,
    Resale,
    Refund,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Payout {
    pub node_id: NodeId,
    pub amount: Tokens,
    pub kind: PayoutKind,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SessionResult {
    pub content: String,
    pub winner: NodeId,
    pub prompt_key: LedgerKey,
    pub prompt_reputation: f64,
}

/// Side effects of one finalize, used for reward accounting and metrics.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct FinalizeReport {
    pub payouts: Vec<Payout>,
    /// Prompt reputation computed for each submission, in submission order.
    pub prompt_reputations: Vec<f64>,
    /// `(supplier, prompt reputation)` for each served prompt access.
    pub prompt_accesses: Vec<(NodeId, f64)>,
    /// Regular validators with at least one record that passed the threshold check.
    pub validation_accesses: Vec<NodeId>,
    /// Regular validation records that failed the threshold check, per validator.
    pub flagged: BTreeMap<NodeId, usize>,
    /// Submissions that failed the official similarity check.
    pub rejected_suppliers: Vec<NodeId>,
    /// Set when the winner was newly stored in the ledger.
    pub new_prompt: bool,
    pub cache_insert: Option<CacheNodeId>,
    pub cache_evicted: Vec<CacheNodeId>,
}

impl FinalizeReport {
    pub fn paid_out(&self) -> Tokens {
        self.payouts.iter().map(|p| p.amount).sum()
    }
}

/// Persistent protocol state a session finalizes against.
#[derive(Clone, Debug)]
pub struct Chain {
    pub ledger: Ledger,
    pub wealth: WealthLedger,
    /// Reputation of LLM-service users that return feedback.
    pub llm_reputation: BTreeMap<NodeId, f64>,
    pub cache_account: NodeId,
    pub reputation: ReputationParams,
    pub escrow: EscrowConfig,
    pub quorum: QuorumConfig,
    pub initial_reputation: f64,
}

impl Chain {
    pub fn new(
        reputation: ReputationParams,
        escrow: EscrowConfig,
        quorum: QuorumConfig,
        initial_reputation: f64,
    ) -> Self {
        let cache_account = NodeId::from("cache");
        let mut wealth = WealthLedger::new();
        wealth.open(&cache_account, 0.0);
        Self {
            ledger: Ledger::new().with_initial_prompt_reputation(initial_reputation),
            wealth,
            llm_reputation: BTreeMap::new(),
            cache_account,
            reputation,
            escrow,
            quorum,
            initial_reputation,
        }
    }

    pub fn register_supplier(&mut self, id: &NodeId) -> Result<(), LedgerError> {
        self.ledger.register_node(LedgerKey::supplier(id), self.initial_reputation)?;
        self.wealth.open(id, 0.0);
        Ok(())
    }

    pub fn register_validator(&mut self, id: &NodeId) -> Result<(), LedgerError> {
        self.ledger.register_node(LedgerKey::validator(id), self.initial_reputation)?;
        self.wealth.open(id, 0.0);
        Ok(())
    }

    pub fn register_user(&mut self, id: &NodeId, balance: Tokens) {
        self.llm_reputation.entry(id.clone()).or_insert(self.initial_reputation);
        self.wealth.open(id, balance);
    }

    pub fn supplier_reputation(&self, id: &NodeId) -> f64 {
        self.ledger
            .reputation(&LedgerKey::supplier(id))
            .unwrap_or(self.initial_reputation)
    }

    pub fn validator_reputation(&self, id: &NodeId) -> f64 {
        self.ledger
            .reputation(&LedgerKey::validator(id))
            .unwrap_or(self.initial_reputation)
    }

    pub fn llm_reputation(&self, id: &NodeId) -> f64 {
        self.llm_reputation.get(id).copied().unwrap_or(self.initial_reputation)
    }

    fn set_supplier_reputation(&mut self, id: &NodeId, value: f64) -> Result<(), LedgerError> {
        let key = LedgerKey::supplier(id);
        self.ledger.register_node(key.clone(), self.initial_reputation)?;
        self.ledger.set_reputation(&key, value)
    }

    fn set_validator_reputation(&mut self, id: &NodeId, value: f64) -> Result<(), LedgerError> {
        let key = LedgerKey::validator(id);
        self.ledger.register_node(key.clone(), self.initial_reputation)?;
        self.ledger.set_reputation(&key, value)
    }
}

/// Deterministic stand-in for the query generation module.
pub fn rationale_for(query: &Query) -> String {
    format!(
        "Retrieve knowledge on topic {} that answers: {}",
        query.topic_id,
        query.text.trim()
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct QuerySession {
    pub session_index: u64,
    pub user_id: NodeId,
    pub query: Query,
    pub rationale: String,
    pub payment: Tokens,
    pub escrow: Tokens,
    pub state: SessionState,
    pub cache_hit: Option<bool>,
    pub submissions: Vec<Submission>,
    pub validations: Vec<SessionValidation>,
    pub result: Option<SessionResult>,
    pub outcome: Option<SessionOutcome>,
    pub transitions: Vec<Transition>,
    min_suppliers: usize,
    min_validators: usize,
    official_required: bool,
}

impl QuerySession {
    /// Stage 1. Moves `payment` from the user into escrow and emits `NewQuery`.
    pub fn create(
        session_index: u64,
        user_id: &NodeId,
        query: Query,
        payment: Tokens,
        chain: &mut Chain,
    ) -> Result<(Self, Event), SessionError> {
        if !(payment > 0.0) {
            return Err(SessionError::ZeroPayment(payment));
        }
        if !chain.wealth.balances().contains_key(user_id) {
            return Err(SessionError::UnknownUser(user_id.clone()));
        }
        let balance = chain.wealth.balance(user_id);
        if balance < payment {
            return Err(SessionError::InsufficientFunds {
                user: user_id.clone(),
                balance,
                payment,
            });
        }
        chain.wealth.debit(user_id, payment)?;
        let mut s = Self {
            session_index,
            user_id: user_id.clone(),
            rationale: rationale_for(&query),
            query,
            payment,
            escrow: payment,
            state: SessionState::Created,
            cache_hit: None,
            submissions: Vec::new(),
            validations: Vec::new(),
            result: None,
            outcome: None,
            transitions: Vec::new(),
            min_suppliers: chain.quorum.min_suppliers,
            min_validators: chain.quorum.min_validators,
            official_required: chain.quorum.official_required,
        };
        let ev = s.transition(SessionState::CacheQueried, EventKind::NewQuery, None);
        Ok((s, ev))
    }

    fn expect(&self, expected: SessionState) -> Result<(), SessionError> {
        if self.state == expected {
            Ok(())
        } else {
            Err(SessionError::WrongState {
                index: self.session_index,
                expected,
                actual: self.state,
            })
        }
    }

    fn transition(&mut self, to: SessionState, event: EventKind, outcome: Option<SessionOutcome>) -> Event {
        debug_assert!(self.state.can_transition(to), "{} -> {}", self.state, to);
        self.transitions.push(Transition {
            session_index: self.session_index,
            from: self.state,
            to,
            event,
        });
        self.state = to;
        Event {
            session_index: self.session_index,
            kind: event,
            outcome,
        }
    }

    /// Stage 2. A hit becomes the sole submission and goes straight to validation.
    pub fn post_cache(&mut self, result: CacheResult) -> Result<Event, SessionError> {
        self.expect(SessionState::CacheQueried)?;
        match result {
            CacheResult::Miss => {
                self.cache_hit = Some(false);
                Ok(self.transition(SessionState::CollectingKnowledge, EventKind::KnowledgeUpdate, None))
            }
            CacheResult::Hit {
                content,
                embedding,
                providers,
                true_quality,
                ..
            } => {
                self.cache_hit = Some(true);
                let supplier_id = providers.first().cloned().unwrap_or_else(|| NodeId::from("cache"));
                self.submissions.push(Submission {
                    supplier_id,
                    content,
                    embedding,
                    true_quality,
                    providers,
                });
                Ok(self.transition(SessionState::Validating, EventKind::ValidateUpdate, None))
            }
        }
    }

    /// Stage 3. Emits `ValidateUpdate` once `min_suppliers` submissions are in.
    pub fn update_knowledge(
        &mut self,
        supplier_id: &NodeId,
        content: impl Into<String>,
        embedding: Embedding,
        true_quality: f64,
    ) -> Result<Option<Event>, SessionError> {
        self.expect(SessionState::CollectingKnowledge)?;
        if self.submissions.iter().any(|s| &s.supplier_id == supplier_id) {
            return Err(SessionError::DuplicateSubmission(supplier_id.clone()));
        }
        self.submissions.push(Submission {
            supplier_id: supplier_id.clone(),
            content: content.into(),
            embedding,
            true_quality,
            providers: vec![supplier_id.clone()],
        });
        if self.submissions.len() >= self.min_suppliers {
            return Ok(Some(self.transition(
                SessionState::Validating,
                EventKind::ValidateUpdate,
                None,
            )));
        }
        Ok(None)
    }

    /// Stage 4 input. Returns whether the session is now finalizable.
    pub fn update_validation(&mut self, validator_id: &NodeId, assessment: Assessment) -> Result<bool, SessionError> {
        self.expect(SessionState::Validating)?;
        if self.validations.iter().any(|v| &v.validator_id == validator_id) {
            return Err(SessionError::DuplicateValidation(validator_id.clone()));
        }
        let n = self.submissions.len();
        let (is_official, scores, similarities) = match assessment {
            Assessment::Regular { scores } => (false, scores, None),
            Assessment::Official { scores, similarities } => {
                if similarities.len() != n {
                    return Err(SessionError::ScoreCountMismatch {
                        expected: n,
                        got: similarities.len(),
                    });
                }
                (true, scores, Some(similarities))
            }
        };
        if scores.len() != n {
            return Err(SessionError::ScoreCountMismatch {
                expected: n,
                got: scores.len(),
            });
        }
        if let Some(bad) = scores.iter().find(|s| !in_unit_range(**s)) {
            return Err(SessionError::ScoreOutOfRange(*bad));
        }
        if is_official && self.official().is_some() {
            return Err(SessionError::DuplicateValidation(validator_id.clone()));
        }
        self.validations.push(SessionValidation {
            validator_id: validator_id.clone(),
            is_official,
            scores,
            similarities,
        });
        Ok(self.is_finalizable())
    }

    pub fn official(&self) -> Option<&SessionValidation> {
        self.validations.iter().find(|v| v.is_official)
    }

    pub fn regular_count(&self) -> usize {
        self.validations.iter().filter(|v| !v.is_official).count()
    }

    pub fn is_finalizable(&self) -> bool {
        self.state == SessionState::Validating
            && self.regular_count() >= self.min_validators
            && (!self.official_required || self.official().is_some())
    }

    /// Stage 4. `feedback` is asked for the user's accuracy rating of the
    /// winning submission.
    pub fn finalize(
        &mut self,
        chain: &mut Chain,
        cache: &mut dyn CachePolicy,
        now: u64,
        feedback: &mut dyn FnMut(&Submission) -> f64,
    ) -> Result<(Event, FinalizeReport), SessionError> {
        self.expect(SessionState::Validating)?;
        if !self.is_finalizable() {
            return Err(SessionError::NotFinalizable(self.session_index));
        }
        let params = chain.reputation.clone();
        let n_subs = self.submissions.len();
        let official = self.official().cloned();
        let cache_hit = self.cache_hit == Some(true);
        let mut report = FinalizeReport::default();

        // official similarity check on every submission
        let passed: Vec<bool> = (0..n_subs)
            .map(|i| {
                official
                    .as_ref()
                    .and_then(|o| o.similarities.as_ref())
                    .is_none_or(|sims| official_check(sims[i], &params).passed())
            })
            .collect();

        // all records per submission, with the threshold verdict for regular validators
        struct Rec {
            record: ValidationRecord,
            is_official: bool,
            accepted: bool,
        }
        let per_sub: Vec<Vec<Rec>> = (0..n_subs)
            .map(|i| {
                self.validations
                    .iter()
                    .map(|v| {
                        let rep = if v.is_official {
                            1.0
                        } else {
                            chain.validator_reputation(&v.validator_id)
                        };
                        let accepted = v.is_official
                            || official
                                .as_ref()
                                .is_none_or(|o| official_check(score_agreement(v.scores[i], o.scores[i]), &params).passed());
                        Rec {
                            record: ValidationRecord::new(v.validator_id.clone(), v.scores[i], rep),
                            is_official: v.is_official,
                            accepted,
                        }
                    })
                    .collect()
            })
            .collect();

        // consistency of each regular validator across submissions
        let mut cs_lists: BTreeMap<NodeId, Vec<f64>> = BTreeMap::new();
        for recs in &per_sub {
            let rmax = recs.iter().map(|r| r.record.validator_reputation).fold(0.0, f64::max);
            for (j, r) in recs.iter().enumerate() {
                if r.is_official {
                    continue;
                }
                if !r.accepted {
                    *report.flagged.entry(r.record.validator_id.clone()).or_insert(0) += 1;
                }
                let others: Vec<ValidationRecord> = recs
                    .iter()
                    .enumerate()
                    .filter(|(k, _)| *k != j)
                    .map(|(_, o)| o.record.clone())
                    .collect();
                let cs = if rmax > 0.0 {
                    consistency(r.record.score, &others, rmax).expect("positive max reputation")
                } else {
                    0.0
                };
                cs_lists.entry(r.record.validator_id.clone()).or_default().push(cs);
            }
        }
        let accepted_of = |i: usize| -> Vec<ValidationRecord> {
            per_sub[i]
                .iter()
                .filter(|r| r.accepted)
                .map(|r| r.record.clone())
                .collect()
        };

        // winner: highest mean accepted score among passing submissions
        let mut winner: Option<(usize, f64)> = None;
        for i in (0..n_subs).filter(|i| passed[*i]) {
            let acc = accepted_of(i);
            let m = if acc.is_empty() {
                0.0
            } else {
                acc.iter().map(|r| r.score).sum::<f64>() / acc.len() as f64
            };
            let better = match winner {
                None => true,
                Some((w, wm)) => {
                    m > wm || (m == wm && self.submissions[i].supplier_id < self.submissions[w].supplier_id)
                }
            };
            if better {
                winner = Some((i, m));
            }
        }

        // prompt reputations
        let mut prompt_reps = vec![0.0; n_subs];
        let mut served: Option<(LedgerKey, f64)> = None;
        for i in 0..n_subs {
            let sub = &self.submissions[i];
            let supplier_rep = chain.supplier_reputation(&sub.supplier_id);
            if winner.map(|w| w.0) == Some(i) {
                let key = if cache_hit {
                    chain
                        .ledger
                        .find_prompt(&sub.content)
                        .ok_or_else(|| LedgerError::MissingEntry(hex::encode(chain.ledger.hash(&sub.content))))?
                } else {
                    report.new_prompt = chain.ledger.find_prompt(&sub.content).is_none();
                    chain.ledger.put_prompt(&sub.content, &sub.supplier_id)?
                };
                let rep_key = key.paired_reputation();
                for r in accepted_of(i) {
                    chain.ledger.append_validation(&rep_key, r)?;
                }
                let history = chain
                    .ledger
                    .prompt_reputation(&rep_key)
                    .map(|e| e.validations.clone())
                    .unwrap_or_default();
                let accuracy = feedback(sub);
                let fb = FeedbackRecord {
                    llm_id: self.user_id.clone(),
                    accuracy,
                    llm_reputation: chain.llm_reputation(&self.user_id),
                };
                let rp = update_prompt_reputation(supplier_rep, &history, std::slice::from_ref(&fb));
                chain.ledger.set_reputation(&rep_key, rp)?;
                prompt_reps[i] = rp;

                // LLM feedback consistency against this session's accepted validations
                let session_recs = accepted_of(i);
                let rmax = session_recs
                    .iter()
                    .map(|r| r.validator_reputation)
                    .fold(fb.llm_reputation, f64::max);
                let cs = if rmax > 0.0 {
                    consistency(accuracy, &session_recs, rmax).expect("positive max reputation")
                } else {
                    0.0
                };
                let r_l = update_llm_reputation(fb.llm_reputation, &[cs], &params);
                chain.llm_reputation.insert(self.user_id.clone(), r_l);
                served = Some((key, rp));
            } else {
                prompt_reps[i] = update_prompt_reputation(supplier_rep, &accepted_of(i), &[]);
            }
        }
        report.prompt_reputations = prompt_reps.clone();

        // supplier reputations, then the official penalty
        for (i, sub) in self.submissions.iter().enumerate() {
            let targets: Vec<NodeId> = if cache_hit {
                sub.providers.clone()
            } else {
                vec![sub.supplier_id.clone()]
            };
            for id in targets {
                let prev = chain.supplier_reputation(&id);
                let mut next = update_supplier_reputation(prev, &[prompt_reps[i]], &params);
                if !passed[i] {
                    next = official_check(-1.0, &params).penalized_reputation(next);
                    report.rejected_suppliers.push(id.clone());
                }
                chain.set_supplier_reputation(&id, next)?;
            }
        }

        // validator reputations, then one penalty per flagged record
        let retain = 1.0 - params.threshold_penalty;
        for (id, cs) in &cs_lists {
            let prev = chain.validator_reputation(id);
            let mut next = update_validator_reputation(prev, cs, &params);
            let flagged = report.flagged.get(id).copied().unwrap_or(0);
            next *= retain.powi(flagged as i32);
            chain.set_validator_reputation(id, next.clamp(0.0, 1.0))?;
        }
        report.validation_accesses = cs_lists
            .keys()
            .filter(|id| report.flagged.get(*id).copied().unwrap_or(0) < n_subs)
            .cloned()
            .collect();

        // escrow
        let payment = self.escrow;
        let outcome = match (&served, winner) {
            (Some((key, rp)), Some((w, _))) => {
                let sub = self.submissions[w].clone();
                if cache_hit {
                    let fee = payment * chain.escrow.cache_service_fee;
                    let pool = payment - fee;
                    report.payouts.push(Payout {
                        node_id: chain.cache_account.clone(),
                        amount: fee,
                        kind: PayoutKind::Cache,
                    });
                    let reps: BTreeMap<NodeId, f64> = sub
                        .providers
                        .iter()
                        .map(|p| (p.clone(), chain.supplier_reputation(p)))
                        .collect();
                    match distribute_resale(pool, &reps) {
                        Ok(split) => {
                            for (node_id, amount) in split {
                                report.payouts.push(Payout {
                                    node_id,
                                    amount,
                                    kind: PayoutKind::Resale,
                                });
                            }
                        }
                        Err(PoiError::AllZeroReputation) => report.payouts.push(Payout {
                            node_id: chain.cache_account.clone(),
                            amount: pool,
                            kind: PayoutKind::Cache,
                        }),
                        Err(e) => return Err(e.into()),
                    }
                    for p in &sub.providers {
                        report.prompt_accesses.push((p.clone(), *rp));
                    }
                } else {
                    let to_supplier = payment * chain.escrow.supplier_share;
                    let to_validators = payment * chain.escrow.validator_share;
                    report.payouts.push(Payout {
                        node_id: sub.supplier_id.clone(),
                        amount: to_supplier,
                        kind: PayoutKind::Supplier,
                    });
                    let paid = &report.validation_accesses;
                    if paid.is_empty() {
                        report.payouts.push(Payout {
                            node_id: chain.cache_account.clone(),
                            amount: to_validators,
                            kind: PayoutKind::Cache,
                        });
                    } else {
                        let each = to_validators / paid.len() as f64;
                        let shares: Vec<Payout> = paid
                            .iter()
                            .map(|v| Payout {
                                node_id: v.clone(),
                                amount: each,
                                kind: PayoutKind::Validator,
                            })
                            .collect();
                        report.payouts.extend(shares);
                    }
                    report.payouts.push(Payout {
                        node_id: chain.cache_account.clone(),
                        amount: payment - to_supplier - to_validators,
                        kind: PayoutKind::Cache,
                    });
                    report.prompt_accesses.push((sub.supplier_id.clone(), *rp));
                }
                self.result = Some(SessionResult {
                    content: sub.content.clone(),
                    winner: sub.supplier_id.clone(),
                    prompt_key: key.clone(),
                    prompt_reputation: *rp,
                });
                SessionOutcome::Served {
                    winner: sub.supplier_id.clone(),
                    prompt_hash: key.hash_hex(),
                    prompt_count: key.count,
                    prompt_reputation: *rp,
                    cache_hit,
                }
            }
            _ => {
                report.payouts.push(Payout {
                    node_id: self.user_id.clone(),
                    amount: payment,
                    kind: PayoutKind::Refund,
                });
                SessionOutcome::Rejected
            }
        };
        for p in &report.payouts {
            chain.wealth.credit(&p.node_id, p.amount)?;
        }
        self.escrow = 0.0;

        // offer a freshly validated winner to the cache
        if let (false, Some((key, rp)), Some(result)) = (cache_hit, &served, &self.result) {
            let digest = *key.digest().expect("data table keys carry a digest");
            let id = CacheNodeId::new(digest, key.count);
            match cache.access(&digest, now) {
                AccessOutcome::Hit { node_id, .. } => cache.add_provider(&node_id, &result.winner)?,
                AccessOutcome::Miss { promoted: true } => {
                    let sub = &self.submissions[winner.expect("served").0];
                    let cfg = cache.config();
                    let frequency = match cache.kind() {
                        PolicyKind::Procache => cfg.k,
                        _ => 1,
                    };
                    let size = (sub.content.len() as f64 / cfg.size_unit_bytes).max(f64::MIN_POSITIVE);
                    let node = CacheNode::new(
                        id,
                        sub.content.clone(),
                        CacheMetadata {
                            embedding: sub.embedding.clone(),
                            cost: payment,
                            size,
                            reputation: *rp,
                        },
                        frequency,
                    )
                    .with_providers(vec![result.winner.clone()]);
                    report.cache_evicted = cache.insert(node, now)?;
                    report.cache_insert = Some(id);
                }
                AccessOutcome::Miss { promoted: false } => {}
            }
        }

        self.outcome = Some(outcome.clone());
        let ev = self.transition(SessionState::Finalized, EventKind::SessionFinalized, Some(outcome));
        Ok((ev, report))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::Prefix;
    use crate::procache::{CacheConfig, ProCache};

    fn emb(v: &[f64]) -> Embedding {
        Embedding::normalized(v.to_vec()).unwrap()
    }

    fn query() -> Query {
        Query {
            text: "What is the capital of France?".into(),
            topic_id: 0,
            variant_id: 0,
            embedding: emb(&[1.0, 0.0]),
        }
    }

    fn chain(min_suppliers: usize, min_validators: usize, official: bool) -> Chain {
        let mut c = Chain::new(
            ReputationParams::default(),
            EscrowConfig::default(),
            QuorumConfig {
                min_suppliers,
                min_validators,
                validator_sample_size: min_validators.max(1),
                official_required: official,
            },
            0.5,
        );
        c.register_user(&"u".into(), 10.0);
        for s in ["s1", "s2", "s3"] {
            c.register_supplier(&s.into()).unwrap();
        }
        for v in ["v1", "v2", "v3"] {
            c.register_validator(&v.into()).unwrap();
        }
        c
    }

    fn cache() -> ProCache {
        ProCache::new(CacheConfig::default())
    }

    fn states(s: &QuerySession) -> Vec<(SessionState, SessionState)> {
        s.transitions.iter().map(|t| (t.from, t.to)).collect()
    }

    #[test]
    fn create_moves_payment_into_escrow() {
        let mut c = chain(1, 1, false);
        let (s, ev) = QuerySession::create(0, &"u".into(), query(), 3.0, &mut c).unwrap();
        assert_eq!(ev.kind, EventKind::NewQuery);
        assert_eq!(s.state, SessionState::CacheQueried);
        assert_eq!(s.escrow, 3.0);
        assert_eq!(c.wealth.balance(&"u".into()), 7.0);
        assert!(s.rationale.contains("capital of France"));
    }

    #[test]
    fn create_rejects_bad_payment() {
        let mut c = chain(1, 1, false);
        assert_eq!(
            QuerySession::create(0, &"u".into(), query(), 0.0, &mut c).unwrap_err(),
            SessionError::ZeroPayment(0.0)
        );
        c.register_user(&"poor".into(), 2.0);
        assert!(matches!(
            QuerySession::create(0, &"poor".into(), query(), 3.0, &mut c),
            Err(SessionError::InsufficientFunds { .. })
        ));
        assert_eq!(c.wealth.balance(&"poor".into()), 2.0);
        assert!(matches!(
            QuerySession::create(0, &"nobody".into(), query(), 1.0, &mut c),
            Err(SessionError::UnknownUser(_))
        ));
    }

    #[test]
    fn post_cache_paths() {
        let mut c = chain(1, 1, false);
        let (mut s, _) = QuerySession::create(0, &"u".into(), query(), 1.0, &mut c).unwrap();
        assert_eq!(s.post_cache(CacheResult::Miss).unwrap().kind, EventKind::KnowledgeUpdate);
        assert_eq!(s.state, SessionState::CollectingKnowledge);
        assert!(matches!(s.post_cache(CacheResult::Miss), Err(SessionError::WrongState { .. })));

        let (mut h, _) = QuerySession::create(1, &"u".into(), query(), 1.0, &mut c).unwrap();
        let ev = h
            .post_cache(CacheResult::Hit {
                node_id: CacheNodeId::new([0; 32], 0),
                content: "Paris".into(),
                embedding: emb(&[1.0, 0.0]),
                providers: vec!["s1".into()],
                true_quality: 0.9,
            })
            .unwrap();
        assert_eq!(ev.kind, EventKind::ValidateUpdate);
        assert_eq!(h.state, SessionState::Validating);
        assert_eq!(h.submissions.len(), 1);
    }

    #[test]
    fn knowledge_quorum() {
        let mut c = chain(3, 1, false);
        let (mut s, _) = QuerySession::create(0, &"u".into(), query(), 1.0, &mut c).unwrap();
        s.post_cache(CacheResult::Miss).unwrap();
        let e = emb(&[1.0, 0.0]);
        assert_eq!(s.update_knowledge(&"s1".into(), "a", e.clone(), 0.9).unwrap(), None);
        assert_eq!(
            s.update_knowledge(&"s1".into(), "b", e.clone(), 0.9),
            Err(SessionError::DuplicateSubmission("s1".into()))
        );
        assert_eq!(s.update_knowledge(&"s2".into(), "b", e.clone(), 0.9).unwrap(), None);
        let ev = s.update_knowledge(&"s3".into(), "c", e.clone(), 0.9).unwrap().unwrap();
        assert_eq!(ev.kind, EventKind::ValidateUpdate);
        assert!(matches!(
            s.update_knowledge(&"s4".into(), "d", e, 0.9),
            Err(SessionError::WrongState { .. })
        ));
    }

    fn validating(c: &mut Chain, contents: &[(&str, &str)]) -> QuerySession {
        let (mut s, _) = QuerySession::create(0, &"u".into(), query(), 3.0, c).unwrap();
        s.post_cache(CacheResult::Miss).unwrap();
        for (sup, text) in contents {
            s.update_knowledge(&(*sup).into(), *text, emb(&[1.0, 0.0]), 0.9).unwrap();
        }
        assert_eq!(s.state, SessionState::Validating);
        s
    }

    #[test]
    fn validation_quorum_and_official() {
        let mut c = chain(1, 3, true);
        let mut s = validating(&mut c, &[("s1", "Paris")]);
        let reg = |x: f64| Assessment::Regular { scores: vec![x] };
        assert!(!s.update_validation(&"v1".into(), reg(0.9)).unwrap());
        assert!(!s.update_validation(&"v2".into(), reg(0.9)).unwrap());
        assert!(!s.update_validation(&"v3".into(), reg(0.9)).unwrap(), "official still missing");
        assert_eq!(
            s.update_validation(&"v3".into(), reg(0.9)),
            Err(SessionError::DuplicateValidation("v3".into()))
        );
        assert!(s
            .update_validation(
                &"official".into(),
                Assessment::Official {
                    scores: vec![0.9],
                    similarities: vec![1.0]
                }
            )
            .unwrap());
        assert!(matches!(
            s.update_validation(&"v4".into(), Assessment::Regular { scores: vec![0.9, 0.1] }),
            Err(SessionError::ScoreCountMismatch { .. })
        ));
    }

    #[test]
    fn finalize_picks_highest_mean_and_splits_escrow() {
        let mut c = chain(2, 3, false);
        let mut cache = cache();
        let mut s = validating(&mut c, &[("s1", "Paris"), ("s2", "Lyon")]);
        for v in ["v1", "v2", "v3"] {
            s.update_validation(&v.into(), Assessment::Regular { scores: vec![0.9, 0.4] })
                .unwrap();
        }
        let (ev, report) = s.finalize(&mut c, &mut cache, 1, &mut |_| 0.9).unwrap();
        assert_eq!(ev.kind, EventKind::SessionFinalized);
        assert!(matches!(ev.outcome, Some(SessionOutcome::Served { ref winner, .. }) if winner.as_str() == "s1"));
        let key = c.ledger.find_prompt("Paris").unwrap();
        assert_eq!(c.ledger.data_table(&key).unwrap().supplier_id, NodeId::from("s1"));
        assert!(c.ledger.find_prompt("Lyon").is_none());
        assert!(report.new_prompt);

        // 60/30/10 of 3 tokens
        assert!((c.wealth.balance(&"s1".into()) - 1.8).abs() < 1e-12);
        for v in ["v1", "v2", "v3"] {
            assert!((c.wealth.balance(&v.into()) - 0.3).abs() < 1e-12);
        }
        assert!((c.wealth.balance(&"cache".into()) - 0.3).abs() < 1e-12);
        assert!((report.paid_out() - 3.0).abs() <= ESCROW_TOLERANCE);
        assert_eq!(s.escrow, 0.0);
        assert_eq!(
            states(&s),
            vec![
                (SessionState::Created, SessionState::CacheQueried),
                (SessionState::CacheQueried, SessionState::CollectingKnowledge),
                (SessionState::CollectingKnowledge, SessionState::Validating),
                (SessionState::Validating, SessionState::Finalized),
            ]
        );
    }

    #[test]
    fn share_arithmetic_two_thirds() {
        let mut c = chain(1, 3, false);
        c.escrow = EscrowConfig {
            supplier_share: 2.0 / 3.0,
            validator_share: 1.0 / 3.0,
            cache_share: 0.0,
            cache_service_fee: 0.1,
        };
        let mut cache = cache();
        let mut s = validating(&mut c, &[("s1", "Paris")]);
        for v in ["v1", "v2", "v3"] {
            s.update_validation(&v.into(), Assessment::Regular { scores: vec![0.9] }).unwrap();
        }
        s.finalize(&mut c, &mut cache, 1, &mut |_| 0.9).unwrap();
        assert!((c.wealth.balance(&"s1".into()) - 2.0).abs() < 1e-12);
        for v in ["v1", "v2", "v3"] {
            assert!((c.wealth.balance(&v.into()) - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn official_failure_refunds_and_halves_supplier() {
        let mut c = chain(1, 1, true);
        let mut cache = cache();
        let mut s = validating(&mut c, &[("s1", "Buy cheap tokens now")]);
        s.update_validation(&"v1".into(), Assessment::Regular { scores: vec![0.9] })
            .unwrap();
        s.update_validation(
            &"official".into(),
            Assessment::Official {
                scores: vec![0.9],
                similarities: vec![0.0],
            },
        )
        .unwrap();
        let before = c.ledger.stats();
        let (ev, report) = s.finalize(&mut c, &mut cache, 1, &mut |_| 0.5).unwrap();
        assert_eq!(ev.outcome, Some(SessionOutcome::Rejected));
        assert_eq!(c.ledger.stats().count(Prefix::DataTable), before.count(Prefix::DataTable));
        assert_eq!(c.wealth.balance(&"u".into()), 10.0);
        assert_eq!(report.rejected_suppliers, vec![NodeId::from("s1")]);
        // EMA toward the session-only prompt reputation, then halved
        let rp = report.prompt_reputations[0];
        let expected = (0.2 * rp + 0.8 * 0.5) * 0.5;
        assert!((c.supplier_reputation(&"s1".into()) - expected).abs() < 1e-12);
    }

    #[test]
    fn finalized_session_is_immutable() {
        let mut c = chain(1, 1, false);
        let mut cache = cache();
        let mut s = validating(&mut c, &[("s1", "Paris")]);
        s.update_validation(&"v1".into(), Assessment::Regular { scores: vec![0.9] })
            .unwrap();
        s.finalize(&mut c, &mut cache, 1, &mut |_| 0.9).unwrap();
        assert!(matches!(
            s.update_validation(&"v2".into(), Assessment::Regular { scores: vec![0.9] }),
            Err(SessionError::WrongState { .. })
        ));
        assert!(matches!(
            s.finalize(&mut c, &mut cache, 2, &mut |_| 0.9),
            Err(SessionError::WrongState { .. })
        ));
        assert!(matches!(s.post_cache(CacheResult::Miss), Err(SessionError::WrongState { .. })));
    }

    #[test]
    fn not_finalizable_before_quorum() {
        let mut c = chain(1, 2, false);
        let mut cache = cache();
        let mut s = validating(&mut c, &[("s1", "Paris")]);
        s.update_validation(&"v1".into(), Assessment::Regular { scores: vec![0.9] })
            .unwrap();
        assert_eq!(
            s.finalize(&mut c, &mut cache, 1, &mut |_| 0.9).unwrap_err(),
            SessionError::NotFinalizable(0)
        );
    }

    #[test]
    fn deviating_validator_is_flagged_and_penalized() {
        let mut c = chain(1, 2, true);
        let mut cache = cache();
        let mut s = validating(&mut c, &[("s1", "Paris")]);
        s.update_validation(&"v1".into(), Assessment::Regular { scores: vec![0.9] })
            .unwrap();
        s.update_validation(&"v2".into(), Assessment::Regular { scores: vec![0.0] })
            .unwrap();
        s.update_validation(
            &"official".into(),
            Assessment::Official {
                scores: vec![0.9],
                similarities: vec![1.0],
            },
        )
        .unwrap();
        let (_, report) = s.finalize(&mut c, &mut cache, 1, &mut |_| 0.9).unwrap();
        assert_eq!(report.flagged.get(&NodeId::from("v2")), Some(&1));
        assert_eq!(report.validation_accesses, vec![NodeId::from("v1")]);
        assert!(c.validator_reputation(&"v2".into()) < 0.25);
        assert!(c.validator_reputation(&"v1".into()) > 0.5);
        // the flagged score is not stored with the prompt
        let key = c.ledger.find_prompt("Paris").unwrap().paired_reputation();
        let stored = &c.ledger.prompt_reputation(&key).unwrap().validations;
        assert_eq!(stored.len(), 2);
        assert!(stored.iter().all(|r| r.validator_id.as_str() != "v2"));
    }

    #[test]
    fn cache_hit_resale_splits_by_supplier_reputation() {
        let mut c = chain(1, 1, false);
        let mut cache = cache();
        c.ledger.put_prompt("Paris", &"s1".into()).unwrap();
        c.set_supplier_reputation(&"s1".into(), 0.6).unwrap();
        c.set_supplier_reputation(&"s2".into(), 0.2).unwrap();
        let (mut s, _) = QuerySession::create(0, &"u".into(), query(), 2.0, &mut c).unwrap();
        s.post_cache(CacheResult::Hit {
            node_id: CacheNodeId::new([0; 32], 0),
            content: "Paris".into(),
            embedding: emb(&[1.0, 0.0]),
            providers: vec!["s1".into(), "s2".into()],
            true_quality: 0.9,
        })
        .unwrap();
        s.update_validation(&"v1".into(), Assessment::Regular { scores: vec![0.9] })
            .unwrap();
        let before = c.ledger.stats().count(Prefix::DataTable);
        let (_, report) = s.finalize(&mut c, &mut cache, 1, &mut |_| 0.9).unwrap();
        assert_eq!(c.ledger.stats().count(Prefix::DataTable), before);
        assert!(!report.new_prompt);
        assert!((c.wealth.balance(&"cache".into()) - 0.2).abs() < 1e-12);
        let total: f64 = ["s1", "s2"].iter().map(|s| c.wealth.balance(&(*s).into())).sum();
        assert!((total - 1.8).abs() < 1e-12);
        // resale uses the updated reputations, still weighted toward s1
        assert!(c.wealth.balance(&"s1".into()) > c.wealth.balance(&"s2".into()));
        assert_eq!(report.prompt_accesses.len(), 2);
    }

    #[test]
    fn procache_admits_winner_on_second_session() {
        let mut c = chain(1, 1, false);
        let mut cache = cache();
        for round in 0..2 {
            let mut s = validating(&mut c, &[("s1", "Paris")]);
            s.session_index = round;
            s.update_validation(&"v1".into(), Assessment::Regular { scores: vec![0.9] })
                .unwrap();
            let (_, report) = s.finalize(&mut c, &mut cache, round, &mut |_| 0.9).unwrap();
            assert_eq!(report.cache_insert.is_some(), round == 1);
        }
        assert_eq!(cache.len(), 1);
        assert_eq!(c.ledger.stats().count(Prefix::DataTable), 1);
    }
}
