//! Reputation engine: consistency, confidence and the four role-specific
//! reputation updates, plus the official-validator threshold check.
//!
//! Every function here is pure. Results are clamped to `[0, 1]`; the
//! consistency ratio and the confidence-adjusted prompt score can otherwise
//! leave that range.
//!
//! | role          | update                                             |
//! |---------------|----------------------------------------------------|
//! | LLM service   | `a * (1 - mean(CS)) + (1 - a) * R_l`               |
//! | prompt        | `(R_k + n*mean(V*R_v) + m*mean(Acc*R_l)) / (n+m+1) - CF` |
//! | supplier      | `a * mean(R_p) + (1 - a) * R_k`                    |
//! | validator     | `a * (1 - mean(CS)) + (1 - a) * R_v`               |

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::types::{in_unit_range, unit_clamp, NodeId};

#[derive(Debug, Error, PartialEq)]
pub enum ReputationError {
    #[error("maximum validator reputation must be positive, got {0}")]
    NonPositiveMaxReputation(f64),
    #[error("confidence needs at least one score")]
    EmptyInput,
}

/// One validator's score for a prompt, with the validator's reputation at scoring time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidationRecord {
    pub validator_id: NodeId,
    pub score: f64,
    pub validator_reputation: f64,
}

impl ValidationRecord {
    pub fn new(validator_id: impl Into<NodeId>, score: f64, validator_reputation: f64) -> Self {
        Self {
            validator_id: validator_id.into(),
            score,
            validator_reputation,
        }
    }

    pub fn in_range(&self) -> bool {
        in_unit_range(self.score) && in_unit_range(self.validator_reputation)
    }
}

/// Accuracy feedback from an LLM service on a delivered prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedbackRecord {
    pub llm_id: NodeId,
    pub accuracy: f64,
    pub llm_reputation: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReputationParams {
    /// EMA coefficient, in `(0, 1]`.
    pub alpha: f64,
    /// Minimum similarity accepted by the official validator.
    pub official_threshold: f64,
    /// Fraction of reputation removed on a failed official check.
    pub threshold_penalty: f64,
}

impl Default for ReputationParams {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            official_threshold: 0.5,
            threshold_penalty: 0.5,
        }
    }
}

impl ReputationParams {
    pub const CLAMP_LOW: f64 = 0.0;
    pub const CLAMP_HIGH: f64 = 1.0;

    pub fn validate(&self) -> Result<(), String> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(format!("reputation.alpha must be in (0, 1], got {}", self.alpha));
        }
        if !in_unit_range(self.official_threshold) {
            return Err(format!(
                "reputation.official_threshold must be in [0, 1], got {}",
                self.official_threshold
            ));
        }
        if !in_unit_range(self.threshold_penalty) {
            return Err(format!(
                "reputation.threshold_penalty must be in [0, 1], got {}",
                self.threshold_penalty
            ));
        }
        Ok(())
    }
}

/// Disagreement of `own_score` with the other validators of the same prompt.
///
/// `n` counts every validator including the caller. Returns 0 when there are
/// no other validators or when every score is identical.
pub fn consistency(
    own_score: f64,
    others: &[ValidationRecord],
    max_validator_reputation: f64,
) -> Result<f64, ReputationError> {
    if !(max_validator_reputation > 0.0) {
        return Err(ReputationError::NonPositiveMaxReputation(
            max_validator_reputation,
        ));
    }
    if others.is_empty() {
        return Ok(0.0);
    }
    let (lo, hi) = others
        .iter()
        .map(|r| r.score)
        .fold((own_score, own_score), |(lo, hi), s| (lo.min(s), hi.max(s)));
    let spread = hi - lo;
    if spread == 0.0 {
        return Ok(0.0);
    }
    let weighted: f64 = others
        .iter()
        .map(|r| (own_score - r.score).abs() * r.validator_reputation)
        .sum();
    let n = others.len() + 1;
    let cs = weighted / ((n - 1) as f64 * spread * max_validator_reputation);
    Ok(unit_clamp(cs))
}

/// Population standard deviation of the scores.
pub fn confidence(scores: &[f64]) -> Result<f64, ReputationError> {
    if scores.is_empty() {
        return Err(ReputationError::EmptyInput);
    }
    Ok(population_std(scores))
}

fn population_std(scores: &[f64]) -> f64 {
    let n = scores.len() as f64;
    let mean = scores.iter().sum::<f64>() / n;
    (scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / n).sqrt()
}

fn mean(xs: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = xs.len();
    if n == 0 {
        return 0.0;
    }
    xs.sum::<f64>() / n as f64
}

fn ema_of_agreement(prev: f64, consistencies: &[f64], params: &ReputationParams) -> f64 {
    if consistencies.is_empty() {
        return prev;
    }
    let agreement = 1.0 - mean(consistencies.iter().copied());
    unit_clamp(params.alpha * agreement + (1.0 - params.alpha) * prev)
}

/// LLM-service reputation from the consistency of its feedback.
pub fn update_llm_reputation(prev: f64, consistencies: &[f64], params: &ReputationParams) -> f64 {
    ema_of_agreement(prev, consistencies, params)
}

/// Validator reputation from the consistency of its scores. Same form as the LLM update.
pub fn update_validator_reputation(
    prev: f64,
    consistencies: &[f64],
    params: &ReputationParams,
) -> f64 {
    ema_of_agreement(prev, consistencies, params)
}

/// Prompt reputation from its supplier, validations and LLM feedback, less the
/// score spread. Fewer than two validations contribute no spread penalty.
pub fn update_prompt_reputation(
    supplier_rep: f64,
    validations: &[ValidationRecord],
    feedbacks: &[FeedbackRecord],
) -> f64 {
    let n = validations.len() as f64;
    let m = feedbacks.len() as f64;
    let validation_term = n * mean(
        validations
            .iter()
            .map(|v| v.score * v.validator_reputation),
    );
    let feedback_term = m * mean(feedbacks.iter().map(|f| f.accuracy * f.llm_reputation));
    let spread = if validations.len() < 2 {
        0.0
    } else {
        let scores: Vec<f64> = validations.iter().map(|v| v.score).collect();
        population_std(&scores)
    };
    unit_clamp((supplier_rep + validation_term + feedback_term) / (n + m + 1.0) - spread)
}

/// Supplier reputation as an EMA of its prompts' reputations.
pub fn update_supplier_reputation(prev: f64, prompt_reps: &[f64], params: &ReputationParams) -> f64 {
    if prompt_reps.is_empty() {
        return prev;
    }
    unit_clamp(params.alpha * mean(prompt_reps.iter().copied()) + (1.0 - params.alpha) * prev)
}

/// Outcome of the official validator's threshold test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OfficialVerdict {
    Pass,
    /// The node is treated as malicious; its reputation is scaled by `retain`.
    Fail { retain: f64 },
}

impl OfficialVerdict {
    pub fn passed(&self) -> bool {
        matches!(self, OfficialVerdict::Pass)
    }

    /// Reputation after applying this verdict to `prev`.
    pub fn penalized_reputation(&self, prev: f64) -> f64 {
        match self {
            OfficialVerdict::Pass => prev,
            OfficialVerdict::Fail { retain } => unit_clamp(prev * retain),
        }
    }
}

/// Passes iff `similarity >= official_threshold`.
pub fn official_check(similarity: f64, params: &ReputationParams) -> OfficialVerdict {
    if similarity >= params.official_threshold {
        OfficialVerdict::Pass
    } else {
        OfficialVerdict::Fail {
            retain: 1.0 - params.threshold_penalty,
        }
    }
}

/// Agreement of a regular validator's score with the official assessment,
/// expressed on the same scale as [`official_check`]'s similarity input.
pub fn score_agreement(score: f64, official_score: f64) -> f64 {
    1.0 - (score - official_score).abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    fn rec(score: f64, rep: f64) -> ValidationRecord {
        ValidationRecord::new("v", score, rep)
    }

    fn params() -> ReputationParams {
        ReputationParams::default()
    }

    #[test]
    fn consistency_examples() {
        let cs = consistency(0.8, &[rec(0.6, 1.0), rec(1.0, 0.5)], 1.0).unwrap();
        assert!(close(cs, 0.375), "{cs}");
        assert_eq!(consistency(0.7, &[rec(0.7, 1.0), rec(0.7, 0.3)], 1.0).unwrap(), 0.0);
        assert!(close(consistency(1.0, &[rec(0.0, 1.0)], 1.0).unwrap(), 1.0));
    }

    #[test]
    fn consistency_degenerate_and_errors() {
        assert_eq!(consistency(0.4, &[], 1.0).unwrap(), 0.0);
        assert_eq!(
            consistency(0.4, &[rec(0.1, 1.0)], 0.0),
            Err(ReputationError::NonPositiveMaxReputation(0.0))
        );
    }

    #[test]
    fn consistency_is_clamped() {
        // reputation above the declared max would push the ratio past 1
        let cs = consistency(1.0, &[rec(0.0, 1.0)], 0.5).unwrap();
        assert_eq!(cs, 1.0);
    }

    #[test]
    fn confidence_examples() {
        assert!(close(confidence(&[0.9, 0.7]).unwrap(), 0.1));
        assert_eq!(confidence(&[0.5, 0.5, 0.5]).unwrap(), 0.0);
        assert!(close(confidence(&[0.0, 1.0]).unwrap(), 0.5));
        assert_eq!(confidence(&[]), Err(ReputationError::EmptyInput));
    }

    #[test]
    fn llm_update_examples() {
        assert!(close(update_llm_reputation(0.5, &[0.0], &params()), 0.6));
        assert_eq!(update_llm_reputation(0.37, &[], &params()), 0.37);
        let mut r = 1.0;
        for _ in 0..100 {
            let next = update_llm_reputation(r, &[1.0], &params());
            assert!(next < r);
            r = next;
        }
        assert!(r < 1e-9);
    }

    #[test]
    fn prompt_update_examples() {
        let v = [rec(0.9, 1.0), rec(0.7, 0.5)];
        let f = [FeedbackRecord {
            llm_id: "l".into(),
            accuracy: 1.0,
            llm_reputation: 0.8,
        }];
        assert!(close(update_prompt_reputation(0.8, &v, &f), 0.6125));
        assert!(close(update_prompt_reputation(0.8, &[], &[]), 0.8));
        let zeros = [rec(0.0, 0.9), rec(0.0, 0.2), rec(0.0, 1.0)];
        assert_eq!(update_prompt_reputation(0.0, &zeros, &[]), 0.0);
    }

    #[test]
    fn supplier_update_examples() {
        assert!(close(update_supplier_reputation(0.5, &[1.0, 1.0], &params()), 0.6));
        assert_eq!(update_supplier_reputation(0.42, &[], &params()), 0.42);
        let mut r = 0.9;
        for _ in 0..200 {
            r = update_supplier_reputation(r, &[0.0], &params());
        }
        assert!(r < 1e-15);
    }

    #[test]
    fn validator_update_examples() {
        assert!(close(update_validator_reputation(0.5, &[0.375], &params()), 0.525));
        assert_eq!(update_validator_reputation(0.3, &[], &params()), 0.3);
    }

    #[test]
    fn official_check_examples() {
        let p = params();
        assert!(official_check(0.9, &p).passed());
        let v = official_check(0.1, &p);
        assert!(!v.passed());
        assert!(close(v.penalized_reputation(0.8), 0.4));
        assert!(official_check(0.5, &p).passed());
    }

    #[test]
    fn params_validation() {
        assert!(params().validate().is_ok());
        let bad = ReputationParams {
            alpha: 0.0,
            ..params()
        };
        assert!(bad.validate().unwrap_err().contains("alpha"));
    }
}
