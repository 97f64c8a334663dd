//! Proof-of-Impact: impact-weighted rewards, proposer choice, resale splits
//! and the cumulative wealth book.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{in_unit_range, NodeId, Tokens};

#[derive(Debug, Error, PartialEq)]
pub enum PoiError {
    #[error("no impact records")]
    EmptyInput,
    #[error("every provider has zero reputation; the pool stays with external storage")]
    AllZeroReputation,
    #[error("negative amount {0}")]
    NegativeAmount(f64),
    #[error("{node} holds {balance} but {requested} was requested")]
    InsufficientFunds {
        node: NodeId,
        balance: Tokens,
        requested: Tokens,
    },
}

/// Access counts and reputation of one node for a reward period.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImpactRecord {
    pub node_id: NodeId,
    pub prompt_accesses: u64,
    pub validation_accesses: u64,
    pub reputation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardParams {
    /// Weight of prompt accesses against validation accesses.
    pub beta: f64,
    /// Extra tokens minted to the round's block proposer.
    pub proposer_bonus: Tokens,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            beta: 0.5,
            proposer_bonus: 0.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) -> Result<(), String> {
        if !in_unit_range(self.beta) {
            return Err(format!("reward.beta must be in [0, 1], got {}", self.beta));
        }
        if !(self.proposer_bonus >= 0.0) {
            return Err(format!(
                "reward.proposer_bonus must be non-negative, got {}",
                self.proposer_bonus
            ));
        }
        Ok(())
    }
}

/// `R * (beta * A_p + (1 - beta) * A_v)`.
pub fn impact_reward(rec: &ImpactRecord, params: &RewardParams) -> Tokens {
    rec.reputation
        * (params.beta * rec.prompt_accesses as f64
            + (1.0 - params.beta) * rec.validation_accesses as f64)
}

/// The node with the highest impact; ties go to the smallest node id.
pub fn select_proposer(records: &[ImpactRecord], params: &RewardParams) -> Result<NodeId, PoiError> {
    records
        .iter()
        .map(|r| (impact_reward(r, params), &r.node_id))
        .max_by(|(ia, na), (ib, nb)| ia.total_cmp(ib).then_with(|| nb.cmp(na)))
        .map(|(_, id)| id.clone())
        .ok_or(PoiError::EmptyInput)
}

/// Splits a resale fee pool among providers in proportion to reputation.
pub fn distribute_resale(
    fee_pool: Tokens,
    provider_reps: &BTreeMap<NodeId, f64>,
) -> Result<BTreeMap<NodeId, Tokens>, PoiError> {
    if !(fee_pool >= 0.0) {
        return Err(PoiError::NegativeAmount(fee_pool));
    }
    if fee_pool == 0.0 {
        return Ok(provider_reps.keys().map(|k| (k.clone(), 0.0)).collect());
    }
    let total: f64 = provider_reps.values().map(|r| r.max(0.0)).sum();
    if total <= 0.0 {
        return Err(PoiError::AllZeroReputation);
    }
    Ok(provider_reps
        .iter()
        .map(|(k, r)| (k.clone(), fee_pool * r.max(0.0) / total))
        .collect())
}

/// Token balances plus a running total of everything minted.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WealthLedger {
    balances: BTreeMap<NodeId, Tokens>,
    minted: Tokens,
}

impl WealthLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn open(&mut self, node: &NodeId, initial: Tokens) {
        self.balances.entry(node.clone()).or_insert(initial.max(0.0));
    }

    pub fn balance(&self, node: &NodeId) -> Tokens {
        self.balances.get(node).copied().unwrap_or(0.0)
    }

    pub fn balances(&self) -> &BTreeMap<NodeId, Tokens> {
        &self.balances
    }

    pub fn total(&self) -> Tokens {
        self.balances.values().sum()
    }

    pub fn minted(&self) -> Tokens {
        self.minted
    }

    pub fn mint(&mut self, node: &NodeId, amount: Tokens) -> Result<(), PoiError> {
        if !(amount >= 0.0) {
            return Err(PoiError::NegativeAmount(amount));
        }
        *self.balances.entry(node.clone()).or_insert(0.0) += amount;
        self.minted += amount;
        Ok(())
    }

    pub fn credit(&mut self, node: &NodeId, amount: Tokens) -> Result<(), PoiError> {
        if !(amount >= 0.0) {
            return Err(PoiError::NegativeAmount(amount));
        }
        *self.balances.entry(node.clone()).or_insert(0.0) += amount;
        Ok(())
    }

    pub fn debit(&mut self, node: &NodeId, amount: Tokens) -> Result<(), PoiError> {
        if !(amount >= 0.0) {
            return Err(PoiError::NegativeAmount(amount));
        }
        let balance = self.balance(node);
        if balance < amount {
            return Err(PoiError::InsufficientFunds {
                node: node.clone(),
                balance,
                requested: amount,
            });
        }
        self.balances.insert(node.clone(), balance - amount);
        Ok(())
    }
}

/// What one node received in a settlement.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NodeSettlement {
    pub node_id: NodeId,
    pub impact: f64,
    pub reward: Tokens,
    pub payout: Tokens,
    pub balance: Tokens,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoundSettlement {
    pub nodes: Vec<NodeSettlement>,
    pub proposer: Option<NodeId>,
    pub minted: Tokens,
}

/// Mints each node's impact reward plus its prompt-access payouts, and the
/// proposer bonus. Nodes are processed in id order.
pub fn settle_round(
    wealth: &mut WealthLedger,
    records: &[ImpactRecord],
    prompt_payouts: &BTreeMap<NodeId, Tokens>,
    params: &RewardParams,
) -> Result<RoundSettlement, PoiError> {
    if let Some((_, bad)) = prompt_payouts.iter().find(|(_, v)| !(**v >= 0.0)) {
        return Err(PoiError::NegativeAmount(*bad));
    }
    let mut ids: BTreeMap<&NodeId, Option<&ImpactRecord>> = BTreeMap::new();
    for r in records {
        ids.insert(&r.node_id, Some(r));
    }
    for id in prompt_payouts.keys() {
        ids.entry(id).or_insert(None);
    }
    let before = wealth.minted();
    let mut nodes = Vec::with_capacity(ids.len());
    for (id, rec) in ids {
        let impact = rec.map(|r| impact_reward(r, params)).unwrap_or(0.0);
        let payout = prompt_payouts.get(id).copied().unwrap_or(0.0);
        wealth.mint(id, impact + payout)?;
        nodes.push(NodeSettlement {
            node_id: id.clone(),
            impact,
            reward: impact,
            payout,
            balance: wealth.balance(id),
        });
    }
    let proposer = if records.is_empty() {
        None
    } else {
        let p = select_proposer(records, params)?;
        if params.proposer_bonus > 0.0 {
            wealth.mint(&p, params.proposer_bonus)?;
            if let Some(n) = nodes.iter_mut().find(|n| n.node_id == p) {
                n.reward += params.proposer_bonus;
                n.balance = wealth.balance(&p);
            }
        }
        Some(p)
    };
    Ok(RoundSettlement {
        nodes,
        proposer,
        minted: wealth.minted() - before,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, ap: u64, av: u64, r: f64) -> ImpactRecord {
        ImpactRecord {
            node_id: id.into(),
            prompt_accesses: ap,
            validation_accesses: av,
            reputation: r,
        }
    }

    fn beta(b: f64) -> RewardParams {
        RewardParams {
            beta: b,
            ..Default::default()
        }
    }

    #[test]
    fn impact_reward_examples() {
        assert!((impact_reward(&rec("a", 10, 5, 0.8), &beta(0.7)) - 6.8).abs() < 1e-12);
        assert_eq!(impact_reward(&rec("a", 100, 100, 0.0), &beta(0.7)), 0.0);
        let only_prompts = impact_reward(&rec("a", 4, 999, 0.5), &beta(1.0));
        assert_eq!(only_prompts, impact_reward(&rec("a", 4, 0, 0.5), &beta(1.0)));
    }

    #[test]
    fn proposer_selection() {
        let p = beta(0.7);
        assert_eq!(select_proposer(&[rec("x", 1, 0, 0.1)], &p).unwrap(), NodeId::from("x"));
        // 6.8 vs 2.0
        let recs = [rec("b", 10, 5, 0.8), rec("a", 2, 2, 1.0)];
        assert_eq!(select_proposer(&recs, &p).unwrap(), NodeId::from("b"));
        let tie = [rec("z", 1, 1, 0.5), rec("m", 1, 1, 0.5)];
        assert_eq!(select_proposer(&tie, &p).unwrap(), NodeId::from("m"));
        assert_eq!(select_proposer(&[], &p), Err(PoiError::EmptyInput));
    }

    #[test]
    fn resale_split() {
        let reps: BTreeMap<NodeId, f64> =
            [("a", 0.6), ("b", 0.4), ("c", 1.0)].into_iter().map(|(k, v)| (k.into(), v)).collect();
        let out = distribute_resale(10.0, &reps).unwrap();
        assert!((out[&NodeId::from("a")] - 3.0).abs() < 1e-12);
        assert!((out[&NodeId::from("b")] - 2.0).abs() < 1e-12);
        assert!((out[&NodeId::from("c")] - 5.0).abs() < 1e-12);

        let single: BTreeMap<NodeId, f64> = [(NodeId::from("a"), 0.3)].into();
        assert_eq!(distribute_resale(7.5, &single).unwrap()[&NodeId::from("a")], 7.5);
        assert!(distribute_resale(0.0, &reps).unwrap().values().all(|v| *v == 0.0));
        let zero: BTreeMap<NodeId, f64> = [(NodeId::from("a"), 0.0)].into();
        assert_eq!(distribute_resale(1.0, &zero), Err(PoiError::AllZeroReputation));
    }

    #[test]
    fn settle_round_examples() {
        let mut w = WealthLedger::new();
        w.open(&"a".into(), 1.0);
        let before = w.clone();
        settle_round(&mut w, &[], &BTreeMap::new(), &beta(0.7)).unwrap();
        assert_eq!(w, before);

        let payouts: BTreeMap<NodeId, Tokens> = [(NodeId::from("a"), 3.0)].into();
        let s = settle_round(&mut w, &[rec("a", 10, 5, 0.8)], &payouts, &beta(0.7)).unwrap();
        assert!((w.balance(&"a".into()) - 10.8).abs() < 1e-12);
        assert!((s.minted - 9.8).abs() < 1e-12);
        assert_eq!(s.proposer, Some(NodeId::from("a")));
    }

    #[test]
    fn proposer_bonus_is_minted() {
        let mut w = WealthLedger::new();
        let p = RewardParams {
            beta: 0.5,
            proposer_bonus: 2.0,
        };
        let s = settle_round(&mut w, &[rec("a", 2, 0, 1.0), rec("b", 0, 0, 1.0)], &BTreeMap::new(), &p)
            .unwrap();
        assert_eq!(w.balance(&"a".into()), 3.0);
        assert_eq!(s.minted, 3.0);
        assert_eq!(w.minted(), w.total());
    }

    #[test]
    fn debit_guards_balance() {
        let mut w = WealthLedger::new();
        w.open(&"u".into(), 2.0);
        assert!(matches!(w.debit(&"u".into(), 3.0), Err(PoiError::InsufficientFunds { .. })));
        w.debit(&"u".into(), 2.0).unwrap();
        assert_eq!(w.balance(&"u".into()), 0.0);
    }
}
