//! Stage 2 of the pipeline: assigning a value to each slot of the predicted
//! domains, by free generation or categorical first-token scoring, and
//! assembling the belief state.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationParams, LmBackend};
use crate::domain_predictor::{
    keyword_classify, predict_domains_clm, predict_domains_mlm, predict_domains_mlm_known_k,
    DomainPredictError, KeywordTable, WgsWeights,
};
use crate::float::Scalar;
use crate::model::{BeliefState, Domain, ModelError, Ontology, SlotDef, NONE_SENTINEL};
use crate::prompting::{build_slot_input, MaskedPromptFamily, PromptError, SlotPromptTable};

#[derive(Debug, Error)]
pub enum SlotPredictError {
    #[error("slot {0} is not categorical")]
    NotCategorical(String),
    #[error("values {a:?} and {b:?} of slot {slot} share first token {token:?}")]
    AmbiguousFirstToken {
        slot: String,
        a: String,
        b: String,
        token: String,
    },
    #[error("degenerate distribution: all candidate probabilities are zero for slot {0}")]
    DegenerateDistribution(String),
    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<SlotPredictError>,
    },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Domain(#[from] DomainPredictError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn at_stage(stage: &'static str, source: SlotPredictError) -> SlotPredictError {
    SlotPredictError::Stage {
        stage,
        source: Box::new(source),
    }
}

/// Injective mapping from a categorical slot's values to their first tokens,
/// with the inverse. Construction queries the backend once per value.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoricalIndex {
    slot: String,
    /// (value, first token) in categorical_values order.
    entries: Vec<(String, String)>,
}

impl CategoricalIndex {
    pub fn build<F: Scalar>(
        backend: &dyn LmBackend<F>,
        slot: &SlotDef,
    ) -> Result<Self, SlotPredictError> {
        if !slot.is_categorical {
            return Err(SlotPredictError::NotCategorical(slot.qualified_name()));
        }
        let mut entries: Vec<(String, String)> = Vec::new();
        for value in &slot.categorical_values {
            let token = backend.first_token(value)?;
            if let Some((prev, _)) = entries.iter().find(|(_, t)| *t == token) {
                return Err(SlotPredictError::AmbiguousFirstToken {
                    slot: slot.qualified_name(),
                    a: prev.clone(),
                    b: value.clone(),
                    token,
                });
            }
            entries.push((value.clone(), token));
        }
        Ok(Self {
            slot: slot.qualified_name(),
            entries,
        })
    }

    pub fn first_tokens(&self) -> Vec<String> {
        self.entries.iter().map(|(_, t)| t.clone()).collect()
    }

    pub fn value_for_token(&self, token: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(_, t)| t == token)
            .map(|(v, _)| v.as_str())
    }
}

/// Free-form slot-value prediction: beam-5 generation from the slot prompt.
/// Returns `None` when the generation is empty or the "none" sentinel.
pub fn predict_slot_value<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
    slot: &SlotDef,
    table: &SlotPromptTable,
) -> Result<Option<String>, SlotPredictError> {
    let input = build_slot_input(dh, slot, table)?;
    let generation = backend.generate(&input, &GenerationParams::beam5())?;
    let value = generation.text.trim();
    if value.is_empty() || value == NONE_SENTINEL {
        Ok(None)
    } else {
        Ok(Some(value.to_string()))
    }
}

/// Categorical prediction: first-token probabilities over the index's
/// tokens, normalized over the value set. Returns the argmax value with its
/// normalized probability; ties break to the value earliest in
/// `categorical_values`.
pub fn predict_categorical<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
    slot: &SlotDef,
    index: &CategoricalIndex,
    table: &SlotPromptTable,
) -> Result<(String, F), SlotPredictError> {
    let normalized = categorical_distribution(backend, dh, slot, index, table)?;
    let best = index
        .entries
        .iter()
        .map(|(value, _)| (value, normalized[value]))
        .fold(None::<(&String, F)>, |best, (value, p)| match best {
            Some((_, bp)) if bp >= p => best,
            _ => Some((value, p)),
        })
        .expect("categorical index is non-empty");
    Ok((best.0.clone(), best.1))
}

/// Diagnostic variant returning the full normalized value distribution.
pub fn categorical_distribution<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
    slot: &SlotDef,
    index: &CategoricalIndex,
    table: &SlotPromptTable,
) -> Result<BTreeMap<String, F>, SlotPredictError> {
    let input = build_slot_input(dh, slot, table)?;
    let raw = backend.first_token_distribution(&input, &index.first_tokens())?;
    let total: F = index
        .entries
        .iter()
        .map(|(_, t)| raw.get(t).copied().unwrap_or_else(F::zero))
        .sum();
    if total <= F::zero() {
        return Err(SlotPredictError::DegenerateDistribution(index.slot.clone()));
    }
    Ok(index
        .entries
        .iter()
        .map(|(value, token)| {
            let p = raw.get(token).copied().unwrap_or_else(F::zero) / total;
            (value.clone(), p)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainStrategy {
    MlmWgs,
    Clm,
    /// Known domain count; the count comes from the gold label at call time.
    KnownK,
    Keyword,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotMode {
    Generative,
    CategoricalWhenAvailable,
}

/// Everything stage 1 needs, bundled per strategy.
pub struct PipelineContext<'a, F: Scalar> {
    pub domain_backend: &'a dyn LmBackend<F>,
    pub slot_backend: &'a dyn LmBackend<F>,
    pub ontology: &'a Ontology,
    pub family: &'a MaskedPromptFamily,
    pub weights: &'a WgsWeights<F>,
    pub slot_prompts: &'a SlotPromptTable,
    pub keyword_table: Option<&'a KeywordTable>,
    /// Pre-built categorical indexes by qualified slot name. Slots without
    /// an entry fall back to generative prediction.
    pub categorical_indexes: BTreeMap<String, CategoricalIndex>,
    /// Diagnostic switch: issue slot prompts for every ontology slot, not
    /// just the predicted domains' slots.
    pub all_slots: bool,
}

impl<'a, F: Scalar> PipelineContext<'a, F> {
    pub fn new(
        domain_backend: &'a dyn LmBackend<F>,
        slot_backend: &'a dyn LmBackend<F>,
        ontology: &'a Ontology,
        family: &'a MaskedPromptFamily,
        weights: &'a WgsWeights<F>,
        slot_prompts: &'a SlotPromptTable,
    ) -> Self {
        Self {
            domain_backend,
            slot_backend,
            ontology,
            family,
            weights,
            slot_prompts,
            keyword_table: None,
            categorical_indexes: BTreeMap::new(),
            all_slots: false,
        }
    }

    /// Builds categorical indexes for every categorical ontology slot whose
    /// values have distinct first tokens; ambiguous slots stay generative.
    pub fn with_categorical_indexes(mut self) -> Self {
        for slot in self.ontology.slots() {
            if !slot.is_categorical {
                continue;
            }
            if let Ok(index) = CategoricalIndex::build(self.slot_backend, slot) {
                self.categorical_indexes.insert(slot.qualified_name(), index);
            }
        }
        self
    }
}

/// One turn's full prediction record, including diagnostics.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct TurnPrediction<F: Scalar> {
    pub domains: BTreeSet<Domain>,
    pub state: BeliefState,
    /// Raw generation per issued slot prompt, qualified slot name -> text.
    pub slot_generations: BTreeMap<String, String>,
    /// Normalized categorical distribution per categorical slot issued.
    pub categorical_maps: BTreeMap<String, BTreeMap<String, F>>,
    /// Count of value strings emitted for more than one slot this turn; a
    /// diagnostic for cross-slot over-prediction.
    pub duplicate_value_count: usize,
}

/// Runs both stages for one turn. Errors are annotated with the failing
/// stage name.
pub fn predict_turn<F: Scalar>(
    ctx: &PipelineContext<'_, F>,
    dh: &str,
    strategy: DomainStrategy,
    slot_mode: SlotMode,
    known_k: Option<usize>,
) -> Result<TurnPrediction<F>, SlotPredictError> {
    let domains: BTreeSet<Domain> = match strategy {
        DomainStrategy::MlmWgs => predict_domains_mlm(
            ctx.domain_backend,
            dh,
            ctx.family,
            ctx.weights,
            &Domain::ALL,
        )
        .map_err(|e| at_stage("domain_prediction", e.into()))?,
        DomainStrategy::Clm => predict_domains_clm(ctx.domain_backend, dh)
            .map_err(|e| at_stage("domain_prediction", e.into()))?,
        DomainStrategy::KnownK => {
            let k = known_k.unwrap_or(1);
            predict_domains_mlm_known_k(ctx.domain_backend, dh, ctx.family, k, &Domain::ALL)
                .map_err(|e| at_stage("domain_prediction", e.into()))?
        }
        DomainStrategy::Keyword => {
            let table = ctx.keyword_table.ok_or_else(|| {
                at_stage(
                    "domain_prediction",
                    DomainPredictError::BadKeywordTable("no keyword table configured".into())
                        .into(),
                )
            })?;
            keyword_classify(dh, table, false)
        }
    };

    let slots: Vec<&SlotDef> = if ctx.all_slots {
        ctx.ontology.slots().iter().collect()
    } else {
        ctx.ontology
            .slots()
            .iter()
            .filter(|s| domains.contains(&s.domain))
            .collect()
    };

    let mut state = BeliefState::new();
    let mut slot_generations = BTreeMap::new();
    let mut categorical_maps = BTreeMap::new();
    let mut value_counts: BTreeMap<String, usize> = BTreeMap::new();

    for slot in slots {
        // Slots outside the predicted domains (all_slots diagnostic mode)
        // never contribute to the assembled state.
        let in_predicted = domains.contains(&slot.domain);
        let qualified = slot.qualified_name();

        let index = match slot_mode {
            SlotMode::CategoricalWhenAvailable => ctx.categorical_indexes.get(&qualified),
            SlotMode::Generative => None,
        };

        let value = if let Some(index) = index {
            let distribution =
                categorical_distribution(ctx.slot_backend, dh, slot, index, ctx.slot_prompts)
                    .map_err(|e| at_stage("slot_prediction", e))?;
            let (value, _) = predict_categorical(ctx.slot_backend, dh, slot, index, ctx.slot_prompts)
                .map_err(|e| at_stage("slot_prediction", e))?;
            categorical_maps.insert(qualified.clone(), distribution);
            Some(value)
        } else {
            let value = predict_slot_value(ctx.slot_backend, dh, slot, ctx.slot_prompts)
                .map_err(|e| at_stage("slot_prediction", e))?;
            slot_generations.insert(
                qualified.clone(),
                value.clone().unwrap_or_else(|| NONE_SENTINEL.to_string()),
            );
            value
        };

        if let (Some(value), true) = (value, in_predicted) {
            *value_counts.entry(value.clone()).or_insert(0) += 1;
            state
                .insert(ctx.ontology, slot.domain, &slot.slot_name, value)
                .map_err(|e| at_stage("state_assembly", e.into()))?;
        }
    }

    let duplicate_value_count = value_counts.values().filter(|&&c| c > 1).map(|&c| c).sum();

    Ok(TurnPrediction {
        domains,
        state,
        slot_generations,
        categorical_maps,
        duplicate_value_count,
    })
}

/// Training pairs for slot-value fine-tuning: one pair per (example, slot
/// of the example's gold domains), prompting with the slot question and
/// targeting the gold value, or the "none" sentinel when the slot is
/// unfilled. Slots without a prompt entry are skipped.
pub fn make_slot_training_pairs(
    examples: &[crate::model::LabeledExample],
    ontology: &Ontology,
    table: &SlotPromptTable,
    style: crate::model::RenderStyle,
) -> Result<Vec<(String, String)>, SlotPredictError> {
    let mut pairs = Vec::new();
    for example in examples {
        let dh = crate::model::render_history(&example.history, style)?;
        for slot in ontology.slots() {
            if !example.gold_domains.contains(&slot.domain) || table.get(slot).is_none() {
                continue;
            }
            let input = build_slot_input(&dh, slot, table)?;
            let target = example
                .gold_state
                .get(slot.domain, &slot.slot_name)
                .unwrap_or(NONE_SENTINEL)
                .to_string();
            pairs.push((input, target));
        }
    }
    Ok(pairs)
}

/// Convenience wrapper returning only the assembled belief state.
pub fn predict_belief_state<F: Scalar>(
    ctx: &PipelineContext<'_, F>,
    dh: &str,
    strategy: DomainStrategy,
    slot_mode: SlotMode,
) -> Result<BeliefState, SlotPredictError> {
    predict_turn(ctx, dh, strategy, slot_mode, None).map(|t| t.state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use crate::model::{Ontology, SlotDef};
    use approx::assert_relative_eq;

    fn ontology() -> Ontology {
        Ontology::new(vec![
            SlotDef {
                domain: Domain::Hotel,
                slot_name: "name".into(),
                is_categorical: false,
                categorical_values: vec![],
            },
            SlotDef {
                domain: Domain::Hotel,
                slot_name: "area".into(),
                is_categorical: false,
                categorical_values: vec![],
            },
            SlotDef {
                domain: Domain::Train,
                slot_name: "day".into(),
                is_categorical: true,
                categorical_values: vec!["monday".into(), "tuesday".into()],
            },
        ])
        .unwrap()
    }

    fn slot_prompts() -> SlotPromptTable {
        let mut entries = BTreeMap::new();
        entries.insert("hotel-name".into(), "What is the name of the hotel?".into());
        entries.insert("hotel-area".into(), "What is the area of the hotel?".into());
        entries.insert("train-day".into(), "What is the day of the train?".into());
        SlotPromptTable::new(entries).unwrap()
    }

    fn slot(name: &str) -> SlotDef {
        ontology().get(Domain::Hotel, name).unwrap().clone()
    }

    #[test]
    fn slot_value_scripted_generation() {
        let table = slot_prompts();
        let backend: MockBackend<f64> = MockBackend::new().script_generation(
            "dh What is the name of the hotel?",
            "acorn guest house",
        );
        let value = predict_slot_value(&backend, "dh", &slot("name"), &table).unwrap();
        assert_eq!(value.as_deref(), Some("acorn guest house"));
    }

    #[test]
    fn slot_value_sentinel_and_trim() {
        let table = slot_prompts();
        let backend: MockBackend<f64> =
            MockBackend::new().script_generation("dh What is the name of the hotel?", "none");
        assert_eq!(
            predict_slot_value(&backend, "dh", &slot("name"), &table).unwrap(),
            None
        );
        // Unscripted input generates nothing -> absent.
        assert_eq!(
            predict_slot_value(&backend, "other", &slot("name"), &table).unwrap(),
            None
        );
        let backend: MockBackend<f64> = MockBackend::new()
            .script_generation("dh What is the area of the hotel?", "  cambridge \n");
        assert_eq!(
            predict_slot_value(&backend, "dh", &slot("area"), &table).unwrap().as_deref(),
            Some("cambridge")
        );
    }

    fn day_slot() -> SlotDef {
        ontology().get(Domain::Train, "day").unwrap().clone()
    }

    #[test]
    fn categorical_index_rejects_shared_first_tokens() {
        let backend: MockBackend<f64> = MockBackend::new();
        let slot = SlotDef {
            domain: Domain::Train,
            slot_name: "day".into(),
            is_categorical: true,
            categorical_values: vec!["monday morning".into(), "monday evening".into()],
        };
        assert!(matches!(
            CategoricalIndex::build(&backend, &slot),
            Err(SlotPredictError::AmbiguousFirstToken { .. })
        ));
    }

    #[test]
    fn categorical_prediction_normalizes() {
        let slot = day_slot();
        let table = slot_prompts();
        let mut probs = BTreeMap::new();
        probs.insert("monday".to_string(), 0.2);
        probs.insert("tuesday".to_string(), 0.6);
        let backend = MockBackend::new()
            .script_first_token("dh What is the day of the train?", probs);
        let index = CategoricalIndex::build(&backend, &slot).unwrap();
        let (value, p) = predict_categorical(&backend, "dh", &slot, &index, &table).unwrap();
        assert_eq!(value, "tuesday");
        assert_relative_eq!(p, 0.75, max_relative = 1e-12);

        let distribution =
            categorical_distribution(&backend, "dh", &slot, &index, &table).unwrap();
        let sum: f64 = distribution.values().sum();
        assert_relative_eq!(sum, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn categorical_single_value_is_certain() {
        let slot = SlotDef {
            domain: Domain::Train,
            slot_name: "day".into(),
            is_categorical: true,
            categorical_values: vec!["monday".into()],
        };
        let table = slot_prompts();
        let mut probs = BTreeMap::new();
        probs.insert("monday".to_string(), 0.01);
        let backend = MockBackend::new()
            .script_first_token("dh What is the day of the train?", probs);
        let index = CategoricalIndex::build(&backend, &slot).unwrap();
        let (value, p) = predict_categorical(&backend, "dh", &slot, &index, &table).unwrap();
        assert_eq!(value, "monday");
        assert_relative_eq!(p, 1.0, max_relative = 1e-12);
    }

    #[test]
    fn categorical_all_zero_is_degenerate() {
        let slot = day_slot();
        let table = slot_prompts();
        let backend: MockBackend<f64> = MockBackend::new();
        let index = CategoricalIndex::build(&backend, &slot).unwrap();
        assert!(matches!(
            predict_categorical(&backend, "dh", &slot, &index, &table),
            Err(SlotPredictError::DegenerateDistribution(_))
        ));
    }

    fn hotel_dominant_backend() -> MockBackend<f64> {
        let mut scores = BTreeMap::new();
        scores.insert("hotel".to_string(), 0.9);
        scores.insert("train".to_string(), 0.05);
        MockBackend::new().with_default_mask_scores(vec![scores])
    }

    #[test]
    fn belief_state_composition() {
        let ont = ontology();
        let family = MaskedPromptFamily::default_family();
        let weights = WgsWeights::default_fixture();
        let prompts = slot_prompts();
        let domain_backend = hotel_dominant_backend();
        let slot_backend: MockBackend<f64> = MockBackend::new()
            .script_generation("dh What is the name of the hotel?", "acorn")
            .script_generation("dh What is the area of the hotel?", "none");
        let ctx = PipelineContext::new(
            &domain_backend,
            &slot_backend,
            &ont,
            &family,
            &weights,
            &prompts,
        );
        let state =
            predict_belief_state(&ctx, "dh", DomainStrategy::MlmWgs, SlotMode::Generative)
                .unwrap();
        assert_eq!(state.len(), 1);
        assert_eq!(state.get(Domain::Hotel, "name"), Some("acorn"));
    }

    #[test]
    fn empty_stage1_yields_empty_state() {
        let ont = ontology();
        let family = MaskedPromptFamily::default_family();
        let weights = WgsWeights::default_fixture();
        let prompts = slot_prompts();
        let backend: MockBackend<f64> = MockBackend::new();
        let ctx = PipelineContext::new(&backend, &backend, &ont, &family, &weights, &prompts);
        // CLM with no scripted generation predicts no domains.
        let state =
            predict_belief_state(&ctx, "dh", DomainStrategy::Clm, SlotMode::Generative).unwrap();
        assert!(state.is_empty());
    }

    #[test]
    fn predicted_state_never_leaves_predicted_domains() {
        let ont = ontology();
        let family = MaskedPromptFamily::default_family();
        let weights = WgsWeights::default_fixture();
        let prompts = slot_prompts();
        let domain_backend = hotel_dominant_backend();
        // Slot backend would happily answer the train question too.
        let slot_backend: MockBackend<f64> = MockBackend::new()
            .script_generation("dh What is the name of the hotel?", "acorn")
            .script_generation("dh What is the day of the train?", "monday");
        let mut ctx = PipelineContext::new(
            &domain_backend,
            &slot_backend,
            &ont,
            &family,
            &weights,
            &prompts,
        );
        ctx.all_slots = true;
        let turn =
            predict_turn(&ctx, "dh", DomainStrategy::MlmWgs, SlotMode::Generative, None).unwrap();
        assert!(turn.slot_generations.contains_key("train-day"));
        assert!(turn.state.get(Domain::Train, "day").is_none());
        for domain in turn.state.domains() {
            assert!(turn.domains.contains(&domain));
        }
    }

    #[test]
    fn duplicate_value_diagnostic_counts_cross_slot_repeats() {
        let ont = ontology();
        let family = MaskedPromptFamily::default_family();
        let weights = WgsWeights::default_fixture();
        let prompts = slot_prompts();
        let domain_backend = hotel_dominant_backend();
        let slot_backend: MockBackend<f64> = MockBackend::new()
            .script_generation("dh What is the name of the hotel?", "centre")
            .script_generation("dh What is the area of the hotel?", "centre");
        let ctx = PipelineContext::new(
            &domain_backend,
            &slot_backend,
            &ont,
            &family,
            &weights,
            &prompts,
        );
        let turn =
            predict_turn(&ctx, "dh", DomainStrategy::MlmWgs, SlotMode::Generative, None).unwrap();
        assert_eq!(turn.duplicate_value_count, 2);
    }
}
