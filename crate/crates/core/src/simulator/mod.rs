//! Round-based engine driving sessions across agents.
//!
//! Each round issues `queries_per_round` queries. Every session runs all four
//! stages and finalizes inside the round. The round then settles impact
//! rewards, refreshes cached prompt reputations from the ledger and records
//! a [`MetricsFrame`].

pub mod config;
pub mod metrics;
pub mod output;
pub mod workload;

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agents::{official_similarity, Agent, AgentSpec, AttackKind, Role, Strategy};
use crate::ledger::{KeyHash, LedgerKey, LedgerSnapshot, Prefix};
use crate::poi::{settle_round, ImpactRecord, PoiError};
use crate::procache::{build_cache, CacheError, CacheNodeId, CachePolicy};
use crate::session::{Assessment, CacheResult, Chain, Query, QuerySession, SessionError, SessionOutcome};
use crate::types::{Digest, EmbeddingError, NodeId, Tokens};

pub use config::{
    apply_overrides, load_sweep_spec, preset, preset_text, ConfigError, ScenarioConfig, ScenarioFile, SweepEntry,
    WorkloadKind, PRESETS,
};
pub use metrics::{
    CacheRow, FinalReputations, LedgerStatsRow, MeanCi, MetricsFrame, NodeReputation, ReputationRow, RewardRow,
    RoleSummary, SessionLogLine, SessionRecord, Summary, TokenSummary,
};
pub use output::{write_run, OutputError, WriteOptions};
pub use workload::{question_text, Ask, TopicSpace, Workload};

const WORKLOAD_STREAM: u64 = 1;
const SAMPLER_STREAM: u64 = 2;
const TOPIC_STREAM: u64 = 3;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("session failed: {0}")]
    Session(#[from] SessionError),
    #[error("cache failed: {0}")]
    Cache(#[from] CacheError),
    #[error("reward settlement failed: {0}")]
    Poi(#[from] PoiError),
    #[error("embedding error: {0}")]
    Embedding(#[from] EmbeddingError),
}

/// Everything a run produces.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub config: ScenarioConfig,
    pub frames: Vec<MetricsFrame>,
    pub rewards: Vec<RewardRow>,
    pub ledger_stats: Vec<LedgerStatsRow>,
    pub session_log: Vec<SessionLogLine>,
    pub sessions: Vec<SessionRecord>,
    pub summary: Summary,
    pub ledger: LedgerSnapshot,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub questions_processed: u64,
    pub ledger_prompts: usize,
    pub reduction: f64,
}

pub fn node_name(prefix: &str, i: usize) -> NodeId {
    NodeId::from(format!("{prefix}{i:02}"))
}

/// A scenario in progress.
pub struct Simulation {
    config: ScenarioConfig,
    chain: Chain,
    cache: Box<dyn CachePolicy>,
    space: TopicSpace,
    workload: Workload,
    sampler: ChaCha8Rng,
    suppliers: Vec<Agent>,
    validators: Vec<Agent>,
    official: Option<Agent>,
    users: Vec<Agent>,
    malicious: BTreeSet<NodeId>,
    quality_by_hash: HashMap<Digest, f64>,
    poisoned: BTreeSet<u32>,
    round: u64,
    next_session: u64,
    queries: u64,
    hits: u64,
    delay_total: f64,
    served: u64,
    rejected: u64,
    initial_total: Tokens,
    rewards: Vec<RewardRow>,
    ledger_stats: Vec<LedgerStatsRow>,
    session_log: Vec<SessionLogLine>,
    sessions: Vec<SessionRecord>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

impl Simulation {
    pub fn new(config: ScenarioConfig) -> Result<Self, SimError> {
        config.validate()?;
        let seed = config.seed;

        let honest_suppliers: Vec<NodeId> = (0..config.n_honest_suppliers).map(|i| node_name("s", i)).collect();
        let honest_validators: Vec<NodeId> = (0..config.n_honest_validators).map(|i| node_name("v", i)).collect();
        let (mal_suppliers, mal_validators): (Vec<NodeId>, Vec<NodeId>) = if config.malicious_dual_role {
            let m: Vec<NodeId> = (0..config.n_malicious_nodes()).map(|i| node_name("m", i)).collect();
            (m.clone(), m)
        } else {
            (
                (0..config.n_malicious_suppliers).map(|i| node_name("ms", i)).collect(),
                (0..config.n_malicious_validators).map(|i| node_name("mv", i)).collect(),
            )
        };
        let malicious: BTreeSet<NodeId> = mal_suppliers.iter().chain(&mal_validators).cloned().collect();
        let strategy = match config.attack {
            AttackKind::None => Strategy::Honest,
            AttackKind::SelfPromotion => Strategy::SelfPromotion,
            AttackKind::Collusion => Strategy::Collusion {
                group_id: 0,
                members: malicious.clone(),
            },
            AttackKind::Slandering => Strategy::Slandering {
                targets: honest_suppliers.iter().cloned().collect(),
            },
        };
        let make = |ids: Vec<NodeId>, role: Role| -> Vec<Agent> {
            ids.into_iter()
                .enumerate()
                .map(|(i, id)| {
                    let strategy = if malicious.contains(&id) {
                        strategy.clone()
                    } else {
                        Strategy::Honest
                    };
                    Agent::new(
                        AgentSpec {
                            node_id: id,
                            role,
                            strategy,
                            rng_stream: role.stream(i as u64),
                        },
                        config.quality.clone(),
                        seed,
                    )
                })
                .collect()
        };
        let suppliers = make(honest_suppliers.into_iter().chain(mal_suppliers).collect(), Role::Supplier);
        let validators = make(honest_validators.into_iter().chain(mal_validators).collect(), Role::Validator);
        let n_honest_users = config.n_users - config.n_malicious_users.min(config.n_users);
        let users: Vec<Agent> = make((0..config.n_users).map(|i| node_name("u", i)).collect(), Role::User)
            .into_iter()
            .enumerate()
            .map(|(i, a)| a.with_malicious_user(i >= n_honest_users))
            .collect();
        let official = config.quorum.official_required.then(|| {
            Agent::new(
                AgentSpec {
                    node_id: NodeId::from("official"),
                    role: Role::OfficialValidator,
                    strategy: Strategy::Honest,
                    rng_stream: Role::OfficialValidator.stream(0),
                },
                config.quality.clone(),
                seed,
            )
        });

        let mut chain = Chain::new(
            config.reputation.clone(),
            config.escrow.clone(),
            config.quorum.clone(),
            config.initial_reputation,
        );
        for a in &suppliers {
            chain.register_supplier(a.id()).map_err(SessionError::from)?;
        }
        for a in &validators {
            chain.register_validator(a.id()).map_err(SessionError::from)?;
        }
        for a in &users {
            chain.register_user(a.id(), config.initial_balance);
        }
        let initial_total = chain.wealth.total();

        let space = TopicSpace::generate(
            &mut stream_rng(seed, TOPIC_STREAM),
            config.topics,
            config.variants_per_topic,
            config.embedding_dim,
            config.variant_noise,
        );
        let workload = Workload::new(&config, stream_rng(seed, WORKLOAD_STREAM));
        let cache = build_cache(config.cache_policy, config.cache.clone());

        Ok(Self {
            sampler: stream_rng(seed, SAMPLER_STREAM),
            config,
            chain,
            cache,
            space,
            workload,
            suppliers,
            validators,
            official,
            users,
            malicious,
            quality_by_hash: HashMap::new(),
            poisoned: BTreeSet::new(),
            round: 0,
            next_session: 0,
            queries: 0,
            hits: 0,
            delay_total: 0.0,
            served: 0,
            rejected: 0,
            initial_total,
            rewards: Vec::new(),
            ledger_stats: Vec::new(),
            session_log: Vec::new(),
            sessions: Vec::new(),
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn chain(&self) -> &Chain {
        &self.chain
    }

    pub fn cache(&self) -> &dyn CachePolicy {
        self.cache.as_ref()
    }

    pub fn is_malicious(&self, id: &NodeId) -> bool {
        self.malicious.contains(id)
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    /// Runs one session end to end.
    fn run_session(
        &mut self,
        round: u64,
        ask: Ask,
        accesses: &mut BTreeMap<NodeId, (u64, u64)>,
        payouts: &mut BTreeMap<NodeId, Tokens>,
    ) -> Result<(), SimError> {
        let index = self.next_session;
        self.next_session += 1;
        let now = index;
        let topic_vec = self.space.topic(ask.topic).clone();
        let q_emb = self.space.variant(ask.topic, ask.variant).clone();
        let user_id = self.users[ask.user].id().clone();
        let query = Query {
            text: question_text(ask.topic, ask.variant),
            topic_id: ask.topic,
            variant_id: ask.variant,
            embedding: q_emb.clone(),
        };
        let payment = self.config.payment_per_query;
        let (mut session, _) = QuerySession::create(index, &user_id, query, payment, &mut self.chain)?;

        // stage 2: similarity lookup
        let threshold = self.cache.config().similarity_threshold;
        let result = match self.cache.retrieve(&q_emb, threshold)? {
            Some(hit) => {
                let node = self.cache.get(&hit.node_id).expect("retrieved node is resident").clone();
                self.cache.access(&node.id.hash, now);
                CacheResult::Hit {
                    node_id: node.id,
                    true_quality: self.quality_by_hash.get(&node.id.hash).copied().unwrap_or(0.0),
                    content: node.content,
                    embedding: node.metadata.embedding,
                    providers: node.providers,
                }
            }
            None => CacheResult::Miss,
        };
        let cache_hit = matches!(result, CacheResult::Hit { .. });
        session.post_cache(result)?;

        // stage 3: knowledge from a sample of suppliers
        if !cache_hit {
            let picks = rand::seq::index::sample(
                &mut self.sampler,
                self.suppliers.len(),
                self.config.quorum.min_suppliers,
            );
            for i in picks.iter() {
                let agent = &mut self.suppliers[i];
                let supplied = agent.supply(ask.topic, &topic_vec);
                session.update_knowledge(
                    &agent.id().clone(),
                    supplied.content,
                    supplied.embedding,
                    supplied.true_quality,
                )?;
            }
        }

        // stage 4: validation
        let picks = rand::seq::index::sample(
            &mut self.sampler,
            self.validators.len(),
            self.config.quorum.validator_sample_size,
        );
        let mut picked: Vec<usize> = picks.into_vec();
        picked.sort_unstable();
        for i in picked {
            let agent = &mut self.validators[i];
            let scores = session
                .submissions
                .iter()
                .map(|s| agent.validate(&s.supplier_id, s.true_quality))
                .collect();
            session.update_validation(&agent.id().clone(), Assessment::Regular { scores })?;
        }
        if let Some(official) = self.official.as_mut() {
            let mut scores = Vec::with_capacity(session.submissions.len());
            let mut similarities = Vec::with_capacity(session.submissions.len());
            for s in &session.submissions {
                scores.push(official.validate(&s.supplier_id, s.true_quality));
                similarities.push(official_similarity(&s.embedding, &topic_vec)?);
            }
            session.update_validation(&official.id().clone(), Assessment::Official { scores, similarities })?;
        }

        let user = &mut self.users[ask.user];
        let (_, report) = session.finalize(&mut self.chain, self.cache.as_mut(), now, &mut |s| {
            user.user_feedback(s.true_quality)
        })?;

        let outcome = session.outcome.clone().expect("finalized");
        let mut winner_malicious = false;
        if let (SessionOutcome::Served { winner, .. }, Some(result)) = (&outcome, &session.result) {
            self.served += 1;
            winner_malicious = self.malicious.contains(winner);
            if !cache_hit {
                let digest = self.chain.ledger.hash(&result.content);
                let q = session
                    .submissions
                    .iter()
                    .find(|s| s.content == result.content)
                    .map(|s| s.true_quality)
                    .unwrap_or(0.0);
                self.quality_by_hash.insert(digest, q);
            }
            if winner_malicious {
                self.poisoned.insert(ask.topic);
            } else {
                self.poisoned.remove(&ask.topic);
            }
        } else {
            self.rejected += 1;
        }

        self.queries += 1;
        if cache_hit {
            self.hits += 1;
            self.delay_total += self.config.delay_hit;
        } else {
            self.delay_total += self.config.delay_miss;
        }
        for (node, rp) in &report.prompt_accesses {
            accesses.entry(node.clone()).or_default().0 += 1;
            *payouts.entry(node.clone()).or_insert(0.0) += rp;
        }
        for node in &report.validation_accesses {
            accesses.entry(node.clone()).or_default().1 += 1;
        }
        for t in &session.transitions {
            self.session_log.push(SessionLogLine {
                round,
                session_index: t.session_index,
                from: t.from,
                to: t.to,
                event: t.event,
            });
        }
        self.sessions.push(SessionRecord {
            round,
            session_index: index,
            topic: ask.topic,
            payment,
            paid_out: report.paid_out(),
            served: outcome.is_served(),
            cache_hit,
            winner_malicious,
        });
        Ok(())
    }

    fn refresh_cache_reputations(&mut self) -> Result<(), SimError> {
        let ids: Vec<CacheNodeId> = self.cache.residents().keys().copied().collect();
        for id in ids {
            let key = LedgerKey {
                prefix: Prefix::ReputationPrompt,
                hash: KeyHash::Digest(id.hash),
                count: id.count,
            };
            if let Some(r) = self.chain.ledger.reputation(&key) {
                self.cache.update_reputation(&id, r)?;
            }
        }
        Ok(())
    }

    fn settle(
        &mut self,
        round: u64,
        accesses: &BTreeMap<NodeId, (u64, u64)>,
        payouts: &BTreeMap<NodeId, Tokens>,
    ) -> Result<(), SimError> {
        let supplier_ids: BTreeSet<&NodeId> = self.suppliers.iter().map(|a| a.id()).collect();
        let mut ids: BTreeSet<&NodeId> = supplier_ids.clone();
        ids.extend(self.validators.iter().map(|a| a.id()));
        let records: Vec<ImpactRecord> = ids
            .iter()
            .map(|id| {
                let (ap, av) = accesses.get(*id).copied().unwrap_or((0, 0));
                let reputation = if supplier_ids.contains(id) {
                    self.chain.supplier_reputation(id)
                } else {
                    self.chain.validator_reputation(id)
                };
                ImpactRecord {
                    node_id: (*id).clone(),
                    prompt_accesses: ap,
                    validation_accesses: av,
                    reputation,
                }
            })
            .collect();
        let settlement = settle_round(&mut self.chain.wealth, &records, payouts, &self.config.reward)?;
        for n in settlement.nodes {
            self.rewards.push(RewardRow {
                round,
                node_id: n.node_id,
                impact: n.impact,
                reward: n.reward + n.payout,
                balance: n.balance,
            });
        }
        Ok(())
    }

    fn frame(&self, round: u64, queries_this_round: u64) -> MetricsFrame {
        let mut reputations = Vec::new();
        let mut sup = (Vec::new(), Vec::new());
        let mut val = (Vec::new(), Vec::new());
        for a in &self.suppliers {
            let r = self.chain.supplier_reputation(a.id());
            let m = self.malicious.contains(a.id());
            if m { &mut sup.1 } else { &mut sup.0 }.push(r);
            reputations.push(NodeReputation {
                role: Role::Supplier,
                node_id: a.id().clone(),
                malicious: m,
                reputation: r,
            });
        }
        for a in &self.validators {
            let r = self.chain.validator_reputation(a.id());
            let m = self.malicious.contains(a.id());
            if m { &mut val.1 } else { &mut val.0 }.push(r);
            reputations.push(NodeReputation {
                role: Role::Validator,
                node_id: a.id().clone(),
                malicious: m,
                reputation: r,
            });
        }
        for a in &self.users {
            reputations.push(NodeReputation {
                role: Role::User,
                node_id: a.id().clone(),
                malicious: a.malicious_user,
                reputation: self.chain.llm_reputation(a.id()),
            });
        }
        let stats = self.chain.ledger.stats();
        MetricsFrame {
            round,
            reputations,
            supplier: RoleSummary {
                honest: MeanCi::of(&sup.0),
                malicious: MeanCi::of(&sup.1),
            },
            validator: RoleSummary {
                honest: MeanCi::of(&val.0),
                malicious: MeanCi::of(&val.1),
            },
            queries: queries_this_round,
            cache_hits: self.hits,
            hit_rate: self.hit_rate(),
            mean_in_cache_reputation: self.cache.mean_reputation(),
            resident_count: self.cache.len(),
            evictions: self.cache.evictions(),
            mean_service_delay: self.mean_delay(),
            data_table_count: stats.count(Prefix::DataTable),
            sessions_served: self.served,
            sessions_rejected: self.rejected,
            balances: self.chain.wealth.balances().clone(),
            total_balance: self.chain.wealth.total(),
            minted: self.chain.wealth.minted(),
        }
    }

    fn hit_rate(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.hits as f64 / self.queries as f64
        }
    }

    fn mean_delay(&self) -> f64 {
        if self.queries == 0 {
            0.0
        } else {
            self.delay_total / self.queries as f64
        }
    }

    /// Plays one round and returns its frame.
    pub fn step(&mut self) -> Result<MetricsFrame, SimError> {
        let round = self.round;
        self.round += 1;
        let mut accesses = BTreeMap::new();
        let mut payouts = BTreeMap::new();
        let mut issued = 0;
        for _ in 0..self.config.queries_per_round {
            let Some(ask) = self.workload.next(&self.poisoned) else { break };
            self.run_session(round, ask, &mut accesses, &mut payouts)?;
            issued += 1;
        }
        self.settle(round, &accesses, &payouts)?;
        self.refresh_cache_reputations()?;
        let stats = self.chain.ledger.stats();
        self.ledger_stats.push(LedgerStatsRow {
            round,
            data_table: stats.count(Prefix::DataTable),
            reputation_prompt: stats.count(Prefix::ReputationPrompt),
            reputation_supplier: stats.count(Prefix::ReputationSupplier),
            reputation_validator: stats.count(Prefix::ReputationValidator),
            total_prompt_bytes: stats.total_prompt_bytes,
        });
        Ok(self.frame(round, issued))
    }

    fn summary(&self, frames: &[MetricsFrame]) -> Summary {
        let ledger_prompts = self.chain.ledger.stats().count(Prefix::DataTable);
        let last = frames.last();
        Summary {
            name: self.config.name.clone(),
            seed: self.config.seed,
            rounds: self.config.rounds,
            policy: self.config.cache_policy,
            attack: self.config.attack,
            questions_processed: self.queries,
            sessions_served: self.served,
            sessions_rejected: self.rejected,
            ledger_prompts,
            reduction: if self.queries == 0 {
                0.0
            } else {
                1.0 - ledger_prompts as f64 / self.queries as f64
            },
            cache_hits: self.hits,
            hit_rate: self.hit_rate(),
            mean_in_cache_reputation: self.cache.mean_reputation(),
            mean_service_delay: self.mean_delay(),
            evictions: self.cache.evictions(),
            final_reputation: FinalReputations {
                supplier: last.map(|f| f.supplier.clone()).unwrap_or_default(),
                validator: last.map(|f| f.validator.clone()).unwrap_or_default(),
            },
            tokens: TokenSummary {
                initial_total: self.initial_total,
                final_total: self.chain.wealth.total(),
                minted: self.chain.wealth.minted(),
            },
        }
    }

    /// Plays every remaining round.
    pub fn finish(mut self) -> Result<RunOutput, SimError> {
        let mut frames = Vec::with_capacity(self.config.rounds as usize);
        while self.round < self.config.rounds {
            frames.push(self.step()?);
        }
        let summary = self.summary(&frames);
        Ok(RunOutput {
            summary,
            ledger: self.chain.ledger.snapshot(),
            config: self.config,
            frames,
            rewards: self.rewards,
            ledger_stats: self.ledger_stats,
            session_log: self.session_log,
            sessions: self.sessions,
        })
    }
}

/// Runs a scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<RunOutput, SimError> {
    Simulation::new(config.clone())?.finish()
}

/// Independent runs, one per entry, in entry order. Runs share nothing, so
/// up to `threads` of them execute at once.
pub fn sweep(base: &ScenarioConfig, entries: &[SweepEntry], threads: usize) -> Result<Vec<(String, RunOutput)>, SimError> {
    let configs: Vec<ScenarioConfig> = entries
        .iter()
        .enumerate()
        .map(|(i, e)| apply_overrides(base, e, i))
        .collect::<Result<_, _>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .expect("thread pool");
    let outputs: Vec<Result<RunOutput, SimError>> = pool.install(|| {
        use rayon::prelude::*;
        configs.par_iter().map(run).collect()
    });
    entries
        .iter()
        .zip(outputs)
        .map(|(e, r)| r.map(|o| (e.label.clone(), o)))
        .collect()
}

/// Counts distinct stored prompts after answering every configured question.
pub fn dedup_experiment(config: &ScenarioConfig) -> Result<DedupReport, SimError> {
    let out = run(config)?;
    Ok(DedupReport {
        questions_processed: out.summary.questions_processed,
        ledger_prompts: out.summary.ledger_prompts,
        reduction: out.summary.reduction,
    })
}
