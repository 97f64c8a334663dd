//! Per-round metrics and the CSV row shapes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::agents::Role;
use crate::procache::PolicyKind;
use crate::types::{NodeId, Tokens};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeReputation {
    pub role: Role,
    pub node_id: NodeId,
    pub malicious: bool,
    pub reputation: f64,
}

/// Mean and 95% normal-approximation half-width.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanCi {
    pub mean: f64,
    pub ci95: f64,
    pub n: usize,
}

impl MeanCi {
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let ci95 = if n < 2 {
            0.0
        } else {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        };
        Some(Self { mean, ci95, n })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub honest: Option<MeanCi>,
    pub malicious: Option<MeanCi>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsFrame {
    pub round: u64,
    pub reputations: Vec<NodeReputation>,
    pub supplier: RoleSummary,
    pub validator: RoleSummary,
    pub queries: u64,
    pub cache_hits: u64,
    pub hit_rate: f64,
    pub mean_in_cache_reputation: Option<f64>,
    pub resident_count: usize,
    pub evictions: u64,
    pub mean_service_delay: f64,
    pub data_table_count: usize,
    pub sessions_served: u64,
    pub sessions_rejected: u64,
    pub balances: BTreeMap<NodeId, Tokens>,
    pub total_balance: Tokens,
    pub minted: Tokens,
}

impl MetricsFrame {
    pub fn role_summary(&self, role: Role) -> &RoleSummary {
        match role {
            Role::Validator => &self.validator,
            _ => &self.supplier,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReputationRow {
    pub round: u64,
    pub role: Role,
    pub node_id: NodeId,
    pub malicious: bool,
    pub reputation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheRow {
    pub round: u64,
    pub policy: PolicyKind,
    pub hit_rate_cumulative: f64,
    pub mean_in_cache_reputation: Option<f64>,
    pub resident_count: usize,
    pub evictions_cumulative: u64,
    pub mean_service_delay: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardRow {
    pub round: u64,
    pub node_id: NodeId,
    pub impact: f64,
    pub reward: Tokens,
    pub balance: Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerStatsRow {
    pub round: u64,
    pub data_table: usize,
    pub reputation_prompt: usize,
    pub reputation_supplier: usize,
    pub reputation_validator: usize,
    pub total_prompt_bytes: usize,
}

/// One line of the session log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLogLine {
    pub round: u64,
    pub session_index: u64,
    pub from: crate::session::SessionState,
    pub to: crate::session::SessionState,
    pub event: crate::session::EventKind,
}

/// Per-session accounting kept for invariant checks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub round: u64,
    pub session_index: u64,
    pub topic: u32,
    pub payment: Tokens,
    pub paid_out: Tokens,
    pub served: bool,
    pub cache_hit: bool,
    pub winner_malicious: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalReputations {
    pub supplier: RoleSummary,
    pub validator: RoleSummary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TokenSummary {
    pub initial_total: Tokens,
    pub final_total: Tokens,
    pub minted: Tokens,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub seed: u64,
    pub rounds: u64,
    pub policy: PolicyKind,
    pub attack: crate::agents::AttackKind,
    pub questions_processed: u64,
    pub sessions_served: u64,
    pub sessions_rejected: u64,
    pub ledger_prompts: usize,
    /// `1 - ledger_prompts / questions_processed`.
    pub reduction: f64,
    pub cache_hits: u64,
    pub hit_rate: f64,
    pub mean_in_cache_reputation: Option<f64>,
    pub mean_service_delay: f64,
    pub evictions: u64,
    pub final_reputation: FinalReputations,
    pub tokens: TokenSummary,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_ci_normal_approximation() {
        let m = MeanCi::of(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.mean, 2.5);
        // sample sd sqrt(5/3), n = 4
        assert!((m.ci95 - 1.96 * (5.0f64 / 3.0 / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(MeanCi::of(&[0.3]).unwrap().ci95, 0.0);
        assert!(MeanCi::of(&[]).is_none());
    }
}
