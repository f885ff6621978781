//! Deterministic in-process backend. All behavior comes from scripted
//! lookup tables, so pipeline tests are bit-reproducible without a model.
//!
//! Tokenization is whitespace splitting; a candidate is single-token iff it
//! contains no whitespace. Fine-tuning memorizes the dataset: exact-match
//! lookup on the input with fallback to the scripted tables.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    count_placeholders, renormalize, validate_candidates, validate_first_tokens, BackendError,
    FineTuneConfig, GenerationParams, GenerationResult, LmBackend, LossSpec, MaskFillResult,
    EOS_TOKEN,
};
use crate::float::Scalar;

#[derive(Debug, Clone, Default)]
pub struct MockBackend<F: Scalar> {
    /// Full input text -> per-mask raw candidate probabilities.
    mask_scores: HashMap<String, Vec<BTreeMap<String, F>>>,
    /// Fallback raw scores by mask index; the last entry repeats.
    default_mask_scores: Vec<BTreeMap<String, F>>,
    /// Full input text -> generation token script. `<eos>` ends generation.
    generation_scripts: HashMap<String, Vec<String>>,
    /// Full input text -> raw next-token probabilities.
    first_token_tables: HashMap<String, BTreeMap<String, F>>,
    default_first_token: BTreeMap<String, F>,
    /// Memorized fine-tune pairs, consulted before the scripted tables.
    tuned: HashMap<String, String>,
}

/// JSON layout for mock tables loaded from disk.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound = "")]
struct MockTableFile<F: Scalar> {
    #[serde(default)]
    mask_scores: HashMap<String, Vec<BTreeMap<String, F>>>,
    #[serde(default)]
    default_mask_scores: Vec<BTreeMap<String, F>>,
    /// Plain-text generations; tokenized by whitespace with a trailing EOS.
    #[serde(default)]
    generations: HashMap<String, String>,
    /// Explicit token scripts, for EOS-behavior control.
    #[serde(default)]
    generation_scripts: HashMap<String, Vec<String>>,
    #[serde(default)]
    first_token: HashMap<String, BTreeMap<String, F>>,
    #[serde(default)]
    default_first_token: BTreeMap<String, F>,
    /// Memorized fine-tune pairs, as persisted by [`MockBackend::save`].
    #[serde(default)]
    tuned: HashMap<String, String>,
}

fn text_to_script(text: &str) -> Vec<String> {
    let mut tokens: Vec<String> = text.split_whitespace().map(str::to_string).collect();
    tokens.push(EOS_TOKEN.to_string());
    tokens
}

impl<F: Scalar> MockBackend<F> {
    pub fn new() -> Self {
        Self {
            mask_scores: HashMap::new(),
            default_mask_scores: Vec::new(),
            generation_scripts: HashMap::new(),
            first_token_tables: HashMap::new(),
            default_first_token: BTreeMap::new(),
            tuned: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))?;
        let file: MockTableFile<F> = serde_json::from_str(&text)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))?;
        let mut backend = Self::new();
        backend.mask_scores = file.mask_scores;
        backend.default_mask_scores = file.default_mask_scores;
        for (input, text) in file.generations {
            backend.generation_scripts.insert(input, text_to_script(&text));
        }
        backend.generation_scripts.extend(file.generation_scripts);
        backend.first_token_tables = file.first_token;
        backend.default_first_token = file.default_first_token;
        backend.tuned = file.tuned;
        Ok(backend)
    }

    /// Persists the tables (including memorized fine-tune pairs) so a tuned
    /// mock can be reloaded by a later pipeline stage.
    pub fn save(&self, path: &Path) -> Result<(), BackendError> {
        let file = MockTableFile {
            mask_scores: self.mask_scores.clone(),
            default_mask_scores: self.default_mask_scores.clone(),
            generations: HashMap::new(),
            generation_scripts: self.generation_scripts.clone(),
            first_token: self.first_token_tables.clone(),
            default_first_token: self.default_first_token.clone(),
            tuned: self.tuned.clone(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| BackendError::Transport(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, text)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))?;
        std::fs::rename(&tmp, path)
            .map_err(|e| BackendError::Transport(format!("{}: {e}", path.display())))
    }

    /// Concrete-typed fine-tune (the trait method boxes the result).
    pub fn tuned_with(&self, dataset: &[(String, String)]) -> Result<Self, BackendError> {
        if dataset.is_empty() {
            return Err(BackendError::EmptyDataset);
        }
        let mut tuned = self.clone();
        for (input, target) in dataset {
            tuned.tuned.insert(input.clone(), target.clone());
        }
        Ok(tuned)
    }

    pub fn script_mask_scores(
        mut self,
        input: impl Into<String>,
        per_mask: Vec<BTreeMap<String, F>>,
    ) -> Self {
        self.mask_scores.insert(input.into(), per_mask);
        self
    }

    /// Fallback raw scores used for any input without a dedicated script.
    pub fn with_default_mask_scores(mut self, per_mask: Vec<BTreeMap<String, F>>) -> Self {
        self.default_mask_scores = per_mask;
        self
    }

    /// Scripts a plain-text generation (whitespace tokens, then EOS).
    pub fn script_generation(mut self, input: impl Into<String>, text: &str) -> Self {
        self.generation_scripts.insert(input.into(), text_to_script(text));
        self
    }

    /// Scripts an explicit token sequence; use [`EOS_TOKEN`] to place EOS.
    pub fn script_generation_tokens(
        mut self,
        input: impl Into<String>,
        tokens: Vec<String>,
    ) -> Self {
        self.generation_scripts.insert(input.into(), tokens);
        self
    }

    pub fn script_first_token(
        mut self,
        input: impl Into<String>,
        table: BTreeMap<String, F>,
    ) -> Self {
        self.first_token_tables.insert(input.into(), table);
        self
    }

    pub fn with_default_first_token(mut self, table: BTreeMap<String, F>) -> Self {
        self.default_first_token = table;
        self
    }

    fn raw_scores_for_mask(&self, input: &str, mask_index: usize) -> BTreeMap<String, F> {
        if let Some(target) = self.tuned.get(input) {
            // Memorized target: token at the mask's position (comma/"and"
            // separated) gets probability 1.
            let tokens: Vec<&str> = target
                .split([',', ' '])
                .filter(|t| !t.is_empty() && *t != "and")
                .collect();
            if let Some(tok) = tokens.get(mask_index).or_else(|| tokens.last()) {
                let mut scores = BTreeMap::new();
                scores.insert(tok.to_lowercase(), F::one());
                return scores;
            }
        }
        if let Some(per_mask) = self.mask_scores.get(input) {
            if let Some(scores) = per_mask.get(mask_index).or_else(|| per_mask.last()) {
                return scores.clone();
            }
        }
        self.default_mask_scores
            .get(mask_index)
            .or_else(|| self.default_mask_scores.last())
            .cloned()
            .unwrap_or_default()
    }
}

impl<F: Scalar> LmBackend<F> for MockBackend<F> {
    fn mask_fill(
        &self,
        input: &str,
        candidates: &[String],
    ) -> Result<MaskFillResult<F>, BackendError> {
        let mask_count = count_placeholders(input)?;
        validate_candidates(candidates)?;
        for candidate in candidates {
            if candidate.trim().is_empty() || candidate.split_whitespace().count() != 1 {
                return Err(BackendError::MultiTokenCandidate(candidate.clone()));
            }
        }
        let per_mask_scores = (0..mask_count)
            .map(|i| renormalize(&self.raw_scores_for_mask(input, i), candidates))
            .collect();
        Ok(MaskFillResult { per_mask_scores })
    }

    fn generate(
        &self,
        input: &str,
        params: &GenerationParams,
    ) -> Result<GenerationResult, BackendError> {
        params.validate()?;
        let script: Vec<String> = if let Some(target) = self.tuned.get(input) {
            text_to_script(target)
        } else if let Some(script) = self.generation_scripts.get(input) {
            script.clone()
        } else {
            Vec::new()
        };

        let mut tokens = Vec::new();
        for tok in &script {
            if tokens.len() >= params.max_new_tokens {
                break;
            }
            if tok == EOS_TOKEN {
                if tokens.len() < params.suppress_eos_until {
                    continue;
                }
                break;
            }
            tokens.push(tok.clone());
        }
        Ok(GenerationResult {
            token_count: tokens.len(),
            text: tokens.join(" "),
        })
    }

    fn first_token_distribution(
        &self,
        input: &str,
        first_tokens: &[String],
    ) -> Result<BTreeMap<String, F>, BackendError> {
        validate_first_tokens(first_tokens)?;
        let table: BTreeMap<String, F> = if let Some(target) = self.tuned.get(input) {
            let mut t = BTreeMap::new();
            t.insert(self.first_token(target)?, F::one());
            t
        } else {
            self.first_token_tables
                .get(input)
                .unwrap_or(&self.default_first_token)
                .clone()
        };
        Ok(first_tokens
            .iter()
            .map(|t| (t.clone(), table.get(t).copied().unwrap_or_else(F::zero)))
            .collect())
    }

    fn first_token(&self, text: &str) -> Result<String, BackendError> {
        text.split_whitespace()
            .next()
            .map(|t| t.to_lowercase())
            .ok_or(BackendError::EmptyText)
    }

    fn fine_tune(
        &self,
        dataset: &[(String, String)],
        _loss: &LossSpec<F>,
        _cfg: &FineTuneConfig,
    ) -> Result<Box<dyn LmBackend<F>>, BackendError> {
        Ok(Box::new(self.tuned_with(dataset)?))
    }

    fn model_id(&self) -> String {
        "mock".to_string()
    }
}
