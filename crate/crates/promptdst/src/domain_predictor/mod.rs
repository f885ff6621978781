//! Stage 1 of the pipeline: predicting the set of mentioned domains.
//!
//! Four strategies are provided: masked-LM inference with weighted grouped
//! token scores, masked-LM with a known domain count, causal-LM generation
//! from the QA prompt, and the keyword baseline. Weight learning for the
//! grouped scores lives in [`ga`].

pub mod ga;

pub use ga::{learn_weights_ga, GaConfig};

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;
use std::str::FromStr;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, GenerationParams, LmBackend};
use crate::float::Scalar;
use crate::model::{Domain, LabeledExample, ModelError};
use crate::prompting::{
    build_domain_qa_input, build_masked_input, MaskedPromptFamily, PromptError,
};

/// Search box for the grouped-score weights.
pub const WEIGHT_LOWER: f64 = 0.05;
pub const WEIGHT_UPPER: f64 = 1.0;

#[derive(Debug, Error)]
pub enum DomainPredictError {
    #[error("domain vocabulary is empty")]
    EmptyVocab,
    #[error("k={0} outside 1..=4")]
    KOutOfRange(usize),
    #[error("missing k={0} stratum in grouped scores")]
    MissingStratum(usize),
    #[error("stratum k={k} holds {found} picks, expected {k}")]
    WrongPickCount { k: usize, found: usize },
    #[error("weight {value} outside [{WEIGHT_LOWER}, {WEIGHT_UPPER}] at index {index}")]
    WeightOutOfBox { index: usize, value: f64 },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("invalid genetic algorithm config: {0}")]
    BadGaConfig(String),
    #[error("keyword table: {0}")]
    BadKeywordTable(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse weights file {path}: {message}")]
    ParseWeights { path: String, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The four per-k weights normalizing grouped token scores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct WgsWeights<F: Scalar> {
    pub w: [F; 4],
}

impl<F: Scalar> WgsWeights<F> {
    pub fn new(w: [F; 4]) -> Result<Self, DomainPredictError> {
        for (index, &value) in w.iter().enumerate() {
            let v = value.to_f64_lossy();
            if !(WEIGHT_LOWER..=WEIGHT_UPPER).contains(&v) {
                return Err(DomainPredictError::WeightOutOfBox { index, value: v });
            }
        }
        Ok(Self { w })
    }

    /// The weights the search settled on for MultiWOZ-2.2: around 0.35 for
    /// 1-3 domain predictions and 0.8 for 4-domain predictions.
    pub fn default_fixture() -> Self {
        Self::new([
            F::from_f64_lossy(0.35),
            F::from_f64_lossy(0.35),
            F::from_f64_lossy(0.35),
            F::from_f64_lossy(0.8),
        ])
        .expect("fixture inside the box")
    }

    /// Reads the weights file: four decimal numbers, one per line, w_1..w_4.
    pub fn load(path: &Path) -> Result<Self, DomainPredictError> {
        let text = std::fs::read_to_string(path).map_err(|source| DomainPredictError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let values: Vec<F> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| {
                l.parse::<f64>()
                    .map(F::from_f64_lossy)
                    .map_err(|e| DomainPredictError::ParseWeights {
                        path: path.display().to_string(),
                        message: format!("{l:?}: {e}"),
                    })
            })
            .collect::<Result<_, _>>()?;
        let w: [F; 4] = values
            .try_into()
            .map_err(|v: Vec<F>| DomainPredictError::ParseWeights {
                path: path.display().to_string(),
                message: format!("expected 4 weights, found {}", v.len()),
            })?;
        Self::new(w)
    }

    pub fn save(&self, path: &Path) -> Result<(), DomainPredictError> {
        let text: String = self
            .w
            .iter()
            .map(|w| format!("{w}\n"))
            .collect();
        std::fs::write(path, text).map_err(|source| DomainPredictError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// One mask's top-1 domain pick with its restricted softmax score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound = "")]
pub struct MaskPick<F: Scalar> {
    pub domain: Domain,
    pub score: F,
}

/// Per-k top-1 picks, before deduplication. Key k in 1..=4; the k-mask
/// entry holds exactly k picks.
pub type PickTable<F> = BTreeMap<usize, Vec<MaskPick<F>>>;

#[derive(Debug, Clone, PartialEq)]
pub struct WgsOutcome<F: Scalar> {
    /// S_1..S_4.
    pub scores: [F; 4],
    pub chosen_k: usize,
    /// Deduplicated picks of the chosen stratum.
    pub domains: BTreeSet<Domain>,
}

/// Grouped-score selection: S_k = (1 / (k * w_k)) * sum of the k per-mask
/// top-1 scores, taken before deduplication; the chosen stratum is the
/// argmax over k, ties breaking toward smaller k.
pub fn wgs_score<F: Scalar>(
    picks: &PickTable<F>,
    weights: &WgsWeights<F>,
) -> Result<WgsOutcome<F>, DomainPredictError> {
    let mut scores = [F::zero(); 4];
    for k in 1..=4usize {
        let stratum = picks.get(&k).ok_or(DomainPredictError::MissingStratum(k))?;
        if stratum.len() != k {
            return Err(DomainPredictError::WrongPickCount { k, found: stratum.len() });
        }
        let sum: F = stratum.iter().map(|p| p.score).sum();
        scores[k - 1] = sum / (F::from_usize(k).unwrap() * weights.w[k - 1]);
    }

    let mut chosen_k = 1;
    for k in 2..=4 {
        if scores[k - 1] > scores[chosen_k - 1] {
            chosen_k = k;
        }
    }
    let domains = picks[&chosen_k].iter().map(|p| p.domain).collect();
    Ok(WgsOutcome { scores, chosen_k, domains })
}

/// Runs the backend once per k in 1..=4 and collects the per-mask top-1
/// picks. This is the cacheable half of [`predict_domains_mlm`].
pub fn mlm_pick_table<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
    family: &MaskedPromptFamily,
    vocab: &[Domain],
) -> Result<PickTable<F>, DomainPredictError> {
    if vocab.is_empty() {
        return Err(DomainPredictError::EmptyVocab);
    }
    let candidates: Vec<String> = vocab.iter().map(|d| d.name().to_string()).collect();
    let mut table = PickTable::new();
    for k in 1..=4usize {
        let input = build_masked_input(dh, k, family)?;
        let result = backend.mask_fill(&input, &candidates)?;
        let picks = result
            .top_picks()
            .into_iter()
            .map(|(name, score)| {
                Domain::from_str(&name)
                    .map(|domain| MaskPick { domain, score })
                    .map_err(DomainPredictError::Model)
            })
            .collect::<Result<Vec<_>, _>>()?;
        table.insert(k, picks);
    }
    Ok(table)
}

/// Masked-LM prediction with weighted grouped token scores.
pub fn predict_domains_mlm<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
    family: &MaskedPromptFamily,
    weights: &WgsWeights<F>,
    vocab: &[Domain],
) -> Result<BTreeSet<Domain>, DomainPredictError> {
    let picks = mlm_pick_table(backend, dh, family, vocab)?;
    Ok(wgs_score(&picks, weights)?.domains)
}

/// Masked-LM prediction when the domain count k is known beforehand:
/// a single pass with the k-mask prompt, picks deduplicated.
pub fn predict_domains_mlm_known_k<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
    family: &MaskedPromptFamily,
    k: usize,
    vocab: &[Domain],
) -> Result<BTreeSet<Domain>, DomainPredictError> {
    if !(1..=4).contains(&k) {
        return Err(DomainPredictError::KOutOfRange(k));
    }
    if vocab.is_empty() {
        return Err(DomainPredictError::EmptyVocab);
    }
    let candidates: Vec<String> = vocab.iter().map(|d| d.name().to_string()).collect();
    let input = build_masked_input(dh, k, family)?;
    let result = backend.mask_fill(&input, &candidates)?;
    result
        .top_picks()
        .into_iter()
        .map(|(name, _)| Domain::from_str(&name).map_err(DomainPredictError::Model))
        .collect()
}

/// Causal-LM prediction: generate from the QA prompt with beam size 5 and
/// keep the ontology domain names found in the output.
pub fn predict_domains_clm<F: Scalar>(
    backend: &dyn LmBackend<F>,
    dh: &str,
) -> Result<BTreeSet<Domain>, DomainPredictError> {
    let input = build_domain_qa_input(dh)?;
    let generation = backend.generate(&input, &GenerationParams::beam5())?;
    Ok(parse_domain_string(&generation.text))
}

/// Splits a generated domain string on commas, "and" and whitespace and
/// keeps the tokens that are ontology domain names.
pub fn parse_domain_string(text: &str) -> BTreeSet<Domain> {
    text.split([',', ' ', '\n', '\t'])
        .map(|t| t.trim().to_lowercase())
        .filter(|t| !t.is_empty() && t != "and")
        .filter_map(|t| Domain::from_str(&t).ok())
        .collect()
}

/// Training pairs for causal-LM domain prediction: QA-prompted history in,
/// gold domains in ontology order out (EOS is appended by the backend's
/// tokenizer). Examples without gold domains are skipped; the count of
/// skipped examples is returned alongside.
pub fn make_clm_training_pairs(
    examples: &[LabeledExample],
    style: crate::model::RenderStyle,
) -> Result<(Vec<(String, String)>, usize), DomainPredictError> {
    let mut pairs = Vec::new();
    let mut skipped = 0usize;
    for example in examples {
        if example.gold_domains.is_empty() {
            skipped += 1;
            continue;
        }
        let dh = crate::model::render_history(&example.history, style)?;
        let input = build_domain_qa_input(&dh)?;
        // BTreeSet iterates in Domain declaration order, i.e. ontology order.
        let target = example
            .gold_domains
            .iter()
            .map(|d| d.name())
            .collect::<Vec<_>>()
            .join(", ");
        pairs.push((input, target));
    }
    Ok((pairs, skipped))
}

/// Hand-curated keywords per domain for the naive baseline.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KeywordTable {
    entries: BTreeMap<Domain, Vec<String>>,
}

impl KeywordTable {
    pub fn new(entries: BTreeMap<Domain, Vec<String>>) -> Result<Self, DomainPredictError> {
        for (domain, keywords) in &entries {
            if keywords.is_empty() {
                return Err(DomainPredictError::BadKeywordTable(format!(
                    "no keywords for {domain}"
                )));
            }
            for kw in keywords {
                if kw.trim() != kw || kw.is_empty() || kw.chars().any(|c| c.is_uppercase()) {
                    return Err(DomainPredictError::BadKeywordTable(format!(
                        "keyword {kw:?} for {domain} must be non-empty, trimmed and lower-case"
                    )));
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self, DomainPredictError> {
        let text = std::fs::read_to_string(path).map_err(|source| DomainPredictError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let entries: BTreeMap<Domain, Vec<String>> = serde_json::from_str(&text)
            .map_err(|e| DomainPredictError::BadKeywordTable(e.to_string()))?;
        Self::new(entries)
    }

    pub fn entries(&self) -> &BTreeMap<Domain, Vec<String>> {
        &self.entries
    }
}

/// Word-boundary keyword matching. With `stem_prefix` the keyword may be a
/// prefix of a longer word ("hotel" matches "hotels"); default off.
pub fn keyword_classify(
    dh: &str,
    table: &KeywordTable,
    stem_prefix: bool,
) -> BTreeSet<Domain> {
    let haystack = dh.to_lowercase();
    let mut cache: HashMap<&str, bool> = HashMap::new();
    let mut matched = BTreeSet::new();
    for (&domain, keywords) in &table.entries {
        for kw in keywords {
            let hit = *cache.entry(kw.as_str()).or_insert_with(|| {
                let escaped = regex::escape(kw);
                let pattern = if stem_prefix {
                    format!(r"\b{escaped}")
                } else {
                    format!(r"\b{escaped}\b")
                };
                Regex::new(&pattern)
                    .map(|re| re.is_match(&haystack))
                    .unwrap_or(false)
            });
            if hit {
                matched.insert(domain);
                break;
            }
        }
    }
    matched
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::MockBackend;
    use approx::assert_relative_eq;

    fn pick(domain: Domain, score: f64) -> MaskPick<f64> {
        MaskPick { domain, score }
    }

    /// Table matching the worked grouped-score example: sums 0.9, 1.4, 1.5, 1.6.
    fn example_table() -> PickTable<f64> {
        let mut table = PickTable::new();
        table.insert(1, vec![pick(Domain::Hotel, 0.9)]);
        table.insert(2, vec![pick(Domain::Hotel, 0.9), pick(Domain::Train, 0.5)]);
        table.insert(
            3,
            vec![
                pick(Domain::Hotel, 0.5),
                pick(Domain::Train, 0.5),
                pick(Domain::Taxi, 0.5),
            ],
        );
        table.insert(
            4,
            vec![
                pick(Domain::Hotel, 0.4),
                pick(Domain::Train, 0.4),
                pick(Domain::Taxi, 0.4),
                pick(Domain::Attraction, 0.4),
            ],
        );
        table
    }

    #[test]
    fn wgs_unit_weights_match_hand_evaluation() {
        let weights = WgsWeights::new([1.0; 4]).unwrap();
        let outcome = wgs_score(&example_table(), &weights).unwrap();
        assert_relative_eq!(outcome.scores[0], 0.9, max_relative = 1e-12);
        assert_relative_eq!(outcome.scores[1], 0.7, max_relative = 1e-12);
        assert_relative_eq!(outcome.scores[2], 0.5, max_relative = 1e-12);
        assert_relative_eq!(outcome.scores[3], 0.4, max_relative = 1e-12);
        assert_eq!(outcome.chosen_k, 1);
        assert_eq!(outcome.domains, [Domain::Hotel].into_iter().collect());
    }

    #[test]
    fn wgs_fixture_weights_match_hand_evaluation() {
        let weights = WgsWeights::default_fixture();
        let outcome = wgs_score(&example_table(), &weights).unwrap();
        assert_relative_eq!(outcome.scores[0], 0.9 / 0.35, max_relative = 1e-12);
        assert_relative_eq!(outcome.scores[1], 1.4 / (2.0 * 0.35), max_relative = 1e-12);
        assert_relative_eq!(outcome.scores[2], 1.5 / (3.0 * 0.35), max_relative = 1e-12);
        assert_relative_eq!(outcome.scores[3], 1.6 / (4.0 * 0.8), max_relative = 1e-12);
        assert_eq!(outcome.chosen_k, 1);
    }

    #[test]
    fn wgs_all_zero_scores_tie_break_to_k1() {
        let mut table = PickTable::new();
        for k in 1..=4usize {
            table.insert(k, vec![pick(Domain::Hotel, 0.0); k]);
        }
        let weights = WgsWeights::new([1.0; 4]).unwrap();
        let outcome = wgs_score(&table, &weights).unwrap();
        assert!(outcome.scores.iter().all(|&s| s == 0.0));
        assert_eq!(outcome.chosen_k, 1);
    }

    #[test]
    fn wgs_missing_stratum_errors() {
        let mut table = example_table();
        table.remove(&3);
        let weights = WgsWeights::new([1.0; 4]).unwrap();
        assert!(matches!(
            wgs_score(&table, &weights),
            Err(DomainPredictError::MissingStratum(3))
        ));
    }

    #[test]
    fn wgs_duplicate_picks_sum_before_dedup() {
        let mut table = example_table();
        table.insert(2, vec![pick(Domain::Hotel, 0.9), pick(Domain::Hotel, 0.9)]);
        let weights = WgsWeights::new([1.0, 0.05, 1.0, 1.0]).unwrap();
        let outcome = wgs_score(&table, &weights).unwrap();
        // S_2 = 1.8 / (2 * 0.05) = 18, wins; returned set is deduplicated.
        assert_eq!(outcome.chosen_k, 2);
        assert_eq!(outcome.domains.len(), 1);
    }

    #[test]
    fn weights_box_is_enforced() {
        assert!(WgsWeights::new([0.04, 0.5, 0.5, 0.5]).is_err());
        assert!(WgsWeights::new([0.05, 1.0, 0.5, 0.5]).is_ok());
        assert!(WgsWeights::new([0.5, 0.5, 0.5, 1.01]).is_err());
    }

    fn unanimous_hotel_backend() -> MockBackend<f64> {
        let mut scores = BTreeMap::new();
        scores.insert("hotel".to_string(), 0.9);
        scores.insert("train".to_string(), 0.05);
        MockBackend::new().with_default_mask_scores(vec![scores])
    }

    #[test]
    fn predict_mlm_unanimous_mock_returns_hotel() {
        let backend = unanimous_hotel_backend();
        let family = MaskedPromptFamily::default_family();
        let weights = WgsWeights::default_fixture();
        let predicted =
            predict_domains_mlm(&backend, "i need a room", &family, &weights, &Domain::ALL)
                .unwrap();
        assert_eq!(predicted, [Domain::Hotel].into_iter().collect());
    }

    #[test]
    fn predict_mlm_empty_vocab_errors() {
        let backend = unanimous_hotel_backend();
        let family = MaskedPromptFamily::default_family();
        let weights = WgsWeights::default_fixture();
        assert!(matches!(
            predict_domains_mlm(&backend, "x", &family, &weights, &[]),
            Err(DomainPredictError::EmptyVocab)
        ));
    }

    #[test]
    fn known_k_deduplicates_picks() {
        let backend = unanimous_hotel_backend();
        let family = MaskedPromptFamily::default_family();
        let predicted =
            predict_domains_mlm_known_k(&backend, "x", &family, 2, &Domain::ALL).unwrap();
        assert_eq!(predicted, [Domain::Hotel].into_iter().collect());
        assert!(matches!(
            predict_domains_mlm_known_k(&backend, "x", &family, 5, &Domain::ALL),
            Err(DomainPredictError::KOutOfRange(5))
        ));
    }

    #[test]
    fn clm_parse_examples() {
        let expected: BTreeSet<Domain> = [Domain::Hotel, Domain::Train].into_iter().collect();
        assert_eq!(parse_domain_string("hotel, train"), expected);
        assert_eq!(parse_domain_string("the weather is nice"), BTreeSet::new());
        assert_eq!(
            parse_domain_string("Hotel and hotel"),
            [Domain::Hotel].into_iter().collect()
        );
    }

    #[test]
    fn clm_prediction_uses_qa_prompt() {
        let backend: MockBackend<f64> = MockBackend::new().script_generation(
            "i need a room What are the mentioned domains?",
            "hotel , train",
        );
        let predicted = predict_domains_clm(&backend, "i need a room").unwrap();
        let expected: BTreeSet<Domain> = [Domain::Hotel, Domain::Train].into_iter().collect();
        assert_eq!(predicted, expected);
    }

    #[test]
    fn clm_training_pairs_use_ontology_order() {
        use crate::model::{
            BeliefState, DialogueHistory, DialogueTurn, Ontology, RenderStyle, SlotDef, Speaker,
        };
        let ont = Ontology::new(vec![
            SlotDef {
                domain: Domain::Hotel,
                slot_name: "name".into(),
                is_categorical: false,
                categorical_values: vec![],
            },
            SlotDef {
                domain: Domain::Train,
                slot_name: "day".into(),
                is_categorical: false,
                categorical_values: vec![],
            },
        ])
        .unwrap();
        let state = BeliefState::from_entries(
            &ont,
            vec![(Domain::Hotel, "name", "acorn"), (Domain::Train, "day", "monday")],
        )
        .unwrap();
        let with_gold = LabeledExample {
            history: DialogueHistory::new(vec![
                DialogueTurn::new(Speaker::User, "a hotel and a train").unwrap(),
            ]),
            gold_domains: state.domains(),
            gold_state: state,
            dialogue_id: "d".into(),
            turn_index: 0,
        };
        let mut without_gold = with_gold.clone();
        without_gold.gold_domains.clear();
        without_gold.gold_state = BeliefState::new();

        let (pairs, skipped) =
            make_clm_training_pairs(&[with_gold, without_gold], RenderStyle::Plain).unwrap();
        assert_eq!(skipped, 1);
        assert_eq!(pairs.len(), 1);
        assert_eq!(pairs[0].0, "a hotel and a train What are the mentioned domains?");
        // Ontology order puts train before hotel.
        assert_eq!(pairs[0].1, "train, hotel");
    }

    fn keyword_table() -> KeywordTable {
        let mut entries = BTreeMap::new();
        entries.insert(Domain::Hotel, vec!["hotel".to_string(), "room".to_string()]);
        entries.insert(Domain::Train, vec!["train".to_string()]);
        KeywordTable::new(entries).unwrap()
    }

    #[test]
    fn keyword_classify_matches_on_word_boundaries() {
        let table = keyword_table();
        assert_eq!(
            keyword_classify("i need a hotel room", &table, false),
            [Domain::Hotel].into_iter().collect()
        );
        assert_eq!(keyword_classify("nothing relevant here", &table, false), BTreeSet::new());
        // "hotels" only matches with the prefix-stem flag.
        assert_eq!(keyword_classify("hotels are full", &table, false), BTreeSet::new());
        assert_eq!(
            keyword_classify("hotels are full", &table, true),
            [Domain::Hotel].into_iter().collect()
        );
    }

    #[test]
    fn keyword_table_rejects_uppercase() {
        let mut entries = BTreeMap::new();
        entries.insert(Domain::Hotel, vec!["Hotel".to_string()]);
        assert!(KeywordTable::new(entries).is_err());
    }
}
