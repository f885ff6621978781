//! Backend abstraction for masked-LM scoring, causal generation, first-token
//! distributions and fine-tuning. Ships a deterministic in-process mock and
//! an HTTP client for a remote inference/training service.

mod mock;
mod remote;

pub use mock::MockBackend;
pub use remote::{RemoteBackend, RemoteConfig};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::float::Scalar;
use crate::prompting::MASK_PLACEHOLDER;

/// Token the mock uses to mark end-of-sequence in generation scripts.
pub const EOS_TOKEN: &str = "<eos>";

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("input contains no {MASK_PLACEHOLDER} placeholder")]
    NoPlaceholder,
    #[error("candidate list is empty")]
    EmptyCandidates,
    #[error("candidate {0:?} is not a single token under the backend tokenization")]
    MultiTokenCandidate(String),
    #[error("duplicate token {0:?} in first-token query")]
    DuplicateToken(String),
    #[error("empty token list in first-token query")]
    EmptyTokens,
    #[error("invalid generation parameters: {0}")]
    BadGenerationParams(String),
    #[error("probability {value} out of range at position {position}")]
    BadProbability { position: usize, value: f64 },
    #[error("eos probability 1 at non-final position {position} makes the unlikelihood term infinite")]
    InfiniteLoss { position: usize },
    #[error("fine-tune dataset is empty")]
    EmptyDataset,
    #[error("cannot derive a token from empty text")]
    EmptyText,
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("remote service error: {0}")]
    Service(String),
    #[error("remote training failed: {0}")]
    TrainingFailed(String),
}

/// Per-mask softmax scores over a restricted candidate vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MaskFillResult<F: Scalar> {
    /// One map per mask, in input order; scores sum to 1 over the supplied
    /// candidate set.
    pub per_mask_scores: Vec<BTreeMap<String, F>>,
}

impl<F: Scalar> MaskFillResult<F> {
    /// Highest-scoring candidate per mask; ties break to the
    /// lexicographically smaller candidate.
    pub fn top_picks(&self) -> Vec<(String, F)> {
        self.per_mask_scores
            .iter()
            .map(|scores| {
                scores
                    .iter()
                    .fold(None::<(&String, F)>, |best, (cand, &score)| match best {
                        Some((_, s)) if s >= score => best,
                        _ => Some((cand, score)),
                    })
                    .map(|(cand, score)| (cand.clone(), score))
                    .expect("non-empty candidate map")
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    /// Generated continuation, excluding the prompt.
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationParams {
    pub beam_size: usize,
    pub max_new_tokens: usize,
    /// EOS is masked out of the distribution for this many initial steps;
    /// 0 disables the suppression.
    pub suppress_eos_until: usize,
}

impl GenerationParams {
    /// Inference defaults: beam search with beam size 5.
    pub fn beam5() -> Self {
        Self {
            beam_size: 5,
            max_new_tokens: 32,
            suppress_eos_until: 0,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.beam_size < 1 {
            return Err(BackendError::BadGenerationParams("beam_size must be >= 1".into()));
        }
        if self.max_new_tokens < 1 {
            return Err(BackendError::BadGenerationParams(
                "max_new_tokens must be >= 1".into(),
            ));
        }
        if self.suppress_eos_until > self.max_new_tokens {
            return Err(BackendError::BadGenerationParams(
                "suppress_eos_until must be <= max_new_tokens".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Nll,
    NllPlusUlEos,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct LossSpec<F: Scalar> {
    pub kind: LossKind,
    /// Weight on the EOS unlikelihood term; ignored for plain NLL.
    pub ul_weight: F,
}

impl<F: Scalar> LossSpec<F> {
    pub fn nll() -> Self {
        Self {
            kind: LossKind::Nll,
            ul_weight: F::one(),
        }
    }

    pub fn nll_plus_ul_eos(ul_weight: F) -> Self {
        Self {
            kind: LossKind::NllPlusUlEos,
            ul_weight,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub learning_rate: f64,
    pub epochs: u32,
    pub batch_size: u32,
    pub seed: u64,
}

impl FineTuneConfig {
    /// Masked-LM defaults: lr 1e-7, 20 epochs, batch 8.
    pub fn mlm_defaults() -> Self {
        Self {
            learning_rate: 1e-7,
            epochs: 20,
            batch_size: 8,
            seed: 0,
        }
    }

    /// Causal-LM defaults: lr 1e-7, 50 epochs, batch 2.
    pub fn clm_defaults() -> Self {
        Self {
            learning_rate: 1e-7,
            epochs: 50,
            batch_size: 2,
            seed: 0,
        }
    }

    /// Seq2seq defaults: lr 1e-5, 30 epochs.
    pub fn seq2seq_defaults() -> Self {
        Self {
            learning_rate: 1e-5,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Per-target-position probabilities used by [`compute_loss`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct PositionProbs<F: Scalar> {
    /// Model probability of the gold token at this position.
    pub target_prob: F,
    /// Model probability of EOS at this position.
    pub eos_prob: F,
}

/// NLL over target positions, optionally plus the EOS unlikelihood term
/// `ul_weight * sum_{t < final} -ln(1 - p_eos_t)`.
pub fn compute_loss<F: Scalar>(
    positions: &[PositionProbs<F>],
    spec: &LossSpec<F>,
) -> Result<F, BackendError> {
    let last = positions.len().saturating_sub(1);
    for (i, p) in positions.iter().enumerate() {
        if !(p.target_prob > F::zero() && p.target_prob <= F::one()) {
            return Err(BackendError::BadProbability {
                position: i,
                value: p.target_prob.to_f64_lossy(),
            });
        }
        if !(p.eos_prob >= F::zero() && p.eos_prob <= F::one()) {
            return Err(BackendError::BadProbability {
                position: i,
                value: p.eos_prob.to_f64_lossy(),
            });
        }
        if spec.kind == LossKind::NllPlusUlEos && i < last && p.eos_prob == F::one() {
            return Err(BackendError::InfiniteLoss { position: i });
        }
    }

    let nll: F = positions.iter().map(|p| -p.target_prob.ln()).sum();
    match spec.kind {
        LossKind::Nll => Ok(nll),
        LossKind::NllPlusUlEos => {
            let ul: F = positions
                .iter()
                .take(last)
                .map(|p| -(F::one() - p.eos_prob).ln())
                .sum();
            Ok(nll + spec.ul_weight * ul)
        }
    }
}

/// Analytic derivative of the per-position unlikelihood term `-ln(1 - p)`
/// with respect to `p` (unit weight).
pub fn ul_eos_grad<F: Scalar>(eos_prob: F) -> F {
    F::one() / (F::one() - eos_prob)
}

/// Validates `input` for mask filling and returns the placeholder count.
pub fn count_placeholders(input: &str) -> Result<usize, BackendError> {
    let n = input.matches(MASK_PLACEHOLDER).count();
    if n == 0 {
        return Err(BackendError::NoPlaceholder);
    }
    Ok(n)
}

/// Restricted-vocabulary renormalization: candidate probabilities divided by
/// their sum. A degenerate all-zero row falls back to uniform.
pub fn renormalize<F: Scalar>(raw: &BTreeMap<String, F>, candidates: &[String]) -> BTreeMap<String, F> {
    let zero = F::zero();
    let sum: F = candidates
        .iter()
        .map(|c| raw.get(c).copied().unwrap_or(zero))
        .sum();
    if sum > zero {
        candidates
            .iter()
            .map(|c| (c.clone(), raw.get(c).copied().unwrap_or(zero) / sum))
            .collect()
    } else {
        let uniform = F::one() / F::from_usize(candidates.len()).expect("candidate count");
        candidates.iter().map(|c| (c.clone(), uniform)).collect()
    }
}

/// Abstract language-model backend. Scoring and generation are read-only;
/// `fine_tune` yields a fresh handle and must not run concurrently with
/// scoring on that handle.
pub trait LmBackend<F: Scalar>: Send + Sync {
    /// Softmax scores over exactly `candidates`, one map per mask in input
    /// order. Candidates must be single tokens under the backend's
    /// tokenization.
    fn mask_fill(
        &self,
        input: &str,
        candidates: &[String],
    ) -> Result<MaskFillResult<F>, BackendError>;

    /// Beam-search continuation of `input`.
    fn generate(
        &self,
        input: &str,
        params: &GenerationParams,
    ) -> Result<GenerationResult, BackendError>;

    /// Raw next-token probabilities for exactly `first_tokens`
    /// (unnormalized over the candidate set).
    fn first_token_distribution(
        &self,
        input: &str,
        first_tokens: &[String],
    ) -> Result<BTreeMap<String, F>, BackendError>;

    /// First token of `text` under the backend's tokenization.
    fn first_token(&self, text: &str) -> Result<String, BackendError>;

    fn fine_tune(
        &self,
        dataset: &[(String, String)],
        loss: &LossSpec<F>,
        cfg: &FineTuneConfig,
    ) -> Result<Box<dyn LmBackend<F>>, BackendError>;

    /// Identifier of the underlying model, recorded in training artifacts.
    fn model_id(&self) -> String {
        "local".to_string()
    }
}

fn validate_candidates(candidates: &[String]) -> Result<(), BackendError> {
    if candidates.is_empty() {
        return Err(BackendError::EmptyCandidates);
    }
    Ok(())
}

fn validate_first_tokens(first_tokens: &[String]) -> Result<(), BackendError> {
    if first_tokens.is_empty() {
        return Err(BackendError::EmptyTokens);
    }
    let mut seen = std::collections::BTreeSet::new();
    for t in first_tokens {
        if !seen.insert(t) {
            return Err(BackendError::DuplicateToken(t.clone()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn loss_is_zero_for_perfect_prediction() {
        let positions = vec![
            PositionProbs { target_prob: 1.0, eos_prob: 0.0 };
            3
        ];
        let loss = compute_loss(&positions, &LossSpec::nll_plus_ul_eos(1.0)).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn ul_term_matches_hand_arithmetic() {
        // eos 0.5 at the two non-final positions: UL = -2 ln(0.5) = 2 ln 2.
        let positions = vec![
            PositionProbs { target_prob: 1.0, eos_prob: 0.5 },
            PositionProbs { target_prob: 1.0, eos_prob: 0.5 },
            PositionProbs { target_prob: 1.0, eos_prob: 0.9 },
        ];
        let loss = compute_loss(&positions, &LossSpec::nll_plus_ul_eos(1.0)).unwrap();
        assert_relative_eq!(loss, 2.0 * std::f64::consts::LN_2, max_relative = 1e-12);
    }

    #[test]
    fn nll_kind_ignores_eos_probs() {
        let a = vec![
            PositionProbs { target_prob: 0.5, eos_prob: 0.9 },
            PositionProbs { target_prob: 0.25, eos_prob: 0.1 },
        ];
        let b = vec![
            PositionProbs { target_prob: 0.5, eos_prob: 0.0 },
            PositionProbs { target_prob: 0.25, eos_prob: 0.0 },
        ];
        let spec = LossSpec::nll();
        assert_eq!(
            compute_loss(&a, &spec).unwrap(),
            compute_loss(&b, &spec).unwrap()
        );
    }

    #[test]
    fn eos_prob_one_at_non_final_position_errors() {
        let positions = vec![
            PositionProbs { target_prob: 1.0, eos_prob: 1.0 },
            PositionProbs { target_prob: 1.0, eos_prob: 0.0 },
        ];
        assert!(matches!(
            compute_loss(&positions, &LossSpec::nll_plus_ul_eos(1.0)),
            Err(BackendError::InfiniteLoss { position: 0 })
        ));
        // EOS at the final position is fine.
        let positions = vec![PositionProbs { target_prob: 1.0, eos_prob: 1.0 }];
        assert!(compute_loss(&positions, &LossSpec::nll_plus_ul_eos(1.0)).is_ok());
    }

    #[test]
    fn renormalize_two_to_one() {
        let mut raw = BTreeMap::new();
        raw.insert("a".to_string(), 2.0);
        raw.insert("b".to_string(), 1.0);
        let candidates = vec!["a".to_string(), "b".to_string()];
        let norm = renormalize(&raw, &candidates);
        assert_relative_eq!(norm["a"], 2.0 / 3.0, max_relative = 1e-12);
        assert_relative_eq!(norm["b"], 1.0 / 3.0, max_relative = 1e-12);
    }

    #[test]
    fn renormalize_degenerate_falls_back_to_uniform() {
        let raw: BTreeMap<String, f64> = BTreeMap::new();
        let candidates = vec!["a".to_string(), "b".to_string()];
        let norm = renormalize(&raw, &candidates);
        assert_eq!(norm["a"], 0.5);
        assert_eq!(norm["b"], 0.5);
    }

    #[test]
    fn generation_params_validation() {
        let mut p = GenerationParams::beam5();
        assert!(p.validate().is_ok());
        p.beam_size = 0;
        assert!(p.validate().is_err());
        let p = GenerationParams {
            beam_size: 1,
            max_new_tokens: 4,
            suppress_eos_until: 5,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn top_picks_take_per_mask_argmax() {
        let mut m1 = BTreeMap::new();
        m1.insert("hotel".to_string(), 0.9);
        m1.insert("train".to_string(), 0.1);
        let mut m2 = BTreeMap::new();
        m2.insert("hotel".to_string(), 0.4);
        m2.insert("train".to_string(), 0.6);
        let result = MaskFillResult { per_mask_scores: vec![m1, m2] };
        let picks = result.top_picks();
        assert_eq!(picks[0].0, "hotel");
        assert_eq!(picks[1].0, "train");
    }

    #[test]
    fn ul_grad_is_reciprocal_of_survival() {
        for p in [0.1, 0.5, 0.9] {
            assert_relative_eq!(ul_eos_grad(p), 1.0 / (1.0 - p), max_relative = 1e-12);
        }
    }

    #[test]
    fn loss_works_in_f32() {
        let positions = vec![PositionProbs {
            target_prob: 0.5f32,
            eos_prob: 0.0,
        }];
        let loss = compute_loss(&positions, &LossSpec::<f32>::nll()).unwrap();
        assert!((loss - std::f32::consts::LN_2).abs() < 1e-6);
    }
}
