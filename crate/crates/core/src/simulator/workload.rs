//! Synthetic topics, question variants and the query stream.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::config::{ScenarioConfig, WorkloadKind};
use crate::agents::{gaussian_unit, perturb};
use crate::types::Embedding;

/// Topic directions and a fixed embedding for every question variant.
#[derive(Clone, Debug)]
pub struct TopicSpace {
    topics: Vec<Embedding>,
    variants: Vec<Vec<Embedding>>,
}

impl TopicSpace {
    pub fn generate(rng: &mut ChaCha8Rng, topics: u32, variants_per_topic: u32, dim: usize, noise: f64) -> Self {
        let topic_vecs: Vec<Embedding> = (0..topics).map(|_| gaussian_unit(rng, dim)).collect();
        let variants = topic_vecs
            .iter()
            .map(|t| (0..variants_per_topic).map(|_| perturb(rng, t, noise)).collect())
            .collect();
        Self {
            topics: topic_vecs,
            variants,
        }
    }

    pub fn topic(&self, t: u32) -> &Embedding {
        &self.topics[t as usize]
    }

    pub fn variant(&self, t: u32, v: u32) -> &Embedding {
        &self.variants[t as usize][v as usize]
    }

    pub fn len(&self) -> usize {
        self.topics.len()
    }

    pub fn is_empty(&self) -> bool {
        self.topics.is_empty()
    }
}

pub fn question_text(topic: u32, variant: u32) -> String {
    format!("Question variant {variant} about topic {topic}?")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Ask {
    pub user: usize,
    pub topic: u32,
    pub variant: u32,
    /// Issued by a malicious user replaying a poisoned topic.
    pub attack: bool,
}

#[derive(Clone, Debug)]
pub struct Workload {
    kind: WorkloadKind,
    topics: u32,
    variants_per_topic: u32,
    n_honest_users: usize,
    n_malicious_users: usize,
    attack_rate: f64,
    limit: Option<u64>,
    issued: u64,
    next_variant: Vec<u32>,
    plan: Vec<(u32, u32)>,
    rng: ChaCha8Rng,
}

impl Workload {
    pub fn new(config: &ScenarioConfig, mut rng: ChaCha8Rng) -> Self {
        let mut plan = Vec::new();
        let mut limit = config.question_limit;
        if config.workload == WorkloadKind::Exhaustive {
            // variant-major so a limit trims the last variants of the last topics
            for v in 0..config.variants_per_topic {
                for t in 0..config.topics {
                    plan.push((t, v));
                }
            }
            let cap = limit.unwrap_or(plan.len() as u64).min(plan.len() as u64);
            plan.truncate(cap as usize);
            plan.shuffle(&mut rng);
            limit = Some(cap);
        }
        let n_malicious_users = config.n_malicious_users.min(config.n_users);
        Self {
            kind: config.workload,
            topics: config.topics,
            variants_per_topic: config.variants_per_topic,
            n_honest_users: config.n_users - n_malicious_users,
            n_malicious_users,
            attack_rate: config.cache_attack_rate,
            limit,
            issued: 0,
            next_variant: vec![0; config.topics as usize],
            plan,
            rng,
        }
    }

    pub fn issued(&self) -> u64 {
        self.issued
    }

    pub fn exhausted(&self) -> bool {
        self.limit.is_some_and(|l| self.issued >= l)
    }

    /// Next query. `poisoned` lists topics whose latest answer came from a
    /// malicious supplier. Users `0..n_honest` are honest, the rest malicious.
    pub fn next(&mut self, poisoned: &BTreeSet<u32>) -> Option<Ask> {
        if self.exhausted() {
            return None;
        }
        let ask = match self.kind {
            WorkloadKind::Exhaustive => {
                let (topic, variant) = self.plan[self.issued as usize];
                let user = self.rng.random_range(0..self.n_honest_users.max(1));
                Ask {
                    user,
                    topic,
                    variant,
                    attack: false,
                }
            }
            WorkloadKind::Uniform => {
                let attacking = self.n_malicious_users > 0 && self.rng.random::<f64>() < self.attack_rate;
                let poisoned: Vec<u32> = poisoned.iter().copied().collect();
                let (user, topic, attack) = if attacking {
                    let user = self.n_honest_users + self.rng.random_range(0..self.n_malicious_users);
                    match poisoned.choose(&mut self.rng) {
                        Some(t) => (user, *t, true),
                        None => (user, self.rng.random_range(0..self.topics), false),
                    }
                } else {
                    let n = if self.n_honest_users == 0 {
                        self.n_malicious_users
                    } else {
                        self.n_honest_users
                    };
                    (self.rng.random_range(0..n), self.rng.random_range(0..self.topics), false)
                };
                let slot = &mut self.next_variant[topic as usize];
                let variant = *slot;
                *slot = (*slot + 1) % self.variants_per_topic;
                Ask {
                    user,
                    topic,
                    variant,
                    attack,
                }
            }
        };
        self.issued += 1;
        Some(ask)
    }
}
