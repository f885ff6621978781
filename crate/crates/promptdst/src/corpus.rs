//! MultiWOZ-2.2-style corpus ingestion and distribution-controlled few-shot
//! sampling.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    BeliefState, DialogueHistory, DialogueTurn, Domain, LabeledExample, ModelError, Ontology,
    Speaker, NONE_SENTINEL,
};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("failed to read corpus {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("malformed corpus JSON in {path} at line {line}, column {column} (byte {byte_offset}){dialogue}: {message}")]
    Parse {
        path: String,
        line: usize,
        column: usize,
        byte_offset: usize,
        /// ` in dialogue <id>` when the failing dialogue is known.
        dialogue: String,
        message: String,
    },
    #[error("unknown service {service:?} in dialogue {dialogue_id}")]
    UnknownService {
        service: String,
        dialogue_id: String,
    },
    #[error("dialogue {dialogue_id}: {source}")]
    Model {
        dialogue_id: String,
        source: ModelError,
    },
    #[error(
        "stratum k={stratum} holds {available} examples but {requested} were requested \
         (short by {})", requested - available
    )]
    InsufficientStratum {
        stratum: usize,
        available: usize,
        requested: usize,
    },
    #[error("distribution fractions must be nonnegative and sum to 1 (got {0:?})")]
    BadDistribution([f64; 4]),
    #[error("per_slot must be >= 1")]
    BadPerSlot,
}

/// Target proportions of 1-, 2-, 3- and 4-domain examples in a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainDistribution {
    pub p: [f64; 4],
}

impl DomainDistribution {
    pub fn new(p: [f64; 4]) -> Result<Self, CorpusError> {
        let sum: f64 = p.iter().sum();
        if p.iter().any(|&x| x < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::BadDistribution(p));
        }
        Ok(Self { p })
    }
}

/// What a sample was drawn for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleSpec {
    DomainDistribution { size: usize, dist: DomainDistribution },
    PerSlot { per_slot: usize },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampledDataset {
    pub examples: Vec<LabeledExample>,
    pub seed: u64,
    pub spec: SampleSpec,
    /// Slots that could not supply the full per-slot quota, with the count
    /// actually drawn. Empty for domain-distribution samples.
    pub short_slots: Vec<(String, usize)>,
}

/// Examples excluded from stratification, by reason.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscardReport {
    pub zero_domain: usize,
    pub over_four_domain: usize,
}

// ---- corpus JSON layout (MultiWOZ-2.2) ----

#[derive(Debug, Deserialize)]
struct RawDialogue {
    dialogue_id: String,
    #[serde(default)]
    #[allow(dead_code)]
    services: Vec<String>,
    turns: Vec<RawTurn>,
}

#[derive(Debug, Deserialize)]
struct RawTurn {
    #[serde(default)]
    #[allow(dead_code)]
    turn_id: String,
    speaker: String,
    utterance: String,
    #[serde(default)]
    frames: Vec<RawFrame>,
}

#[derive(Debug, Deserialize)]
struct RawFrame {
    service: String,
    #[serde(default)]
    state: RawFrameState,
}

#[derive(Debug, Default, Deserialize)]
struct RawFrameState {
    #[serde(default)]
    slot_values: BTreeMap<String, Vec<String>>,
}

fn byte_offset(text: &str, line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split('\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    offset
}

/// Reads a dialogue file into one [`LabeledExample`] per USER turn. The
/// history covers all turns up to and including the user turn; the gold
/// state is that turn's cumulative frame state.
pub fn load_corpus(path: &Path, ontology: &Ontology) -> Result<Vec<LabeledExample>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    load_corpus_str(&text, ontology, &path.display().to_string())
}

pub fn load_corpus_str(
    text: &str,
    ontology: &Ontology,
    path_label: &str,
) -> Result<Vec<LabeledExample>, CorpusError> {
    let raw: Vec<serde_json::Value> =
        serde_json::from_str(text).map_err(|e| CorpusError::Parse {
            path: path_label.to_string(),
            line: e.line(),
            column: e.column(),
            byte_offset: byte_offset(text, e.line(), e.column()),
            dialogue: String::new(),
            message: e.to_string(),
        })?;

    let mut examples = Vec::new();
    for value in raw {
        let id_hint = value
            .get("dialogue_id")
            .and_then(|v| v.as_str())
            .unwrap_or("<unknown>")
            .to_string();
        let dialogue: RawDialogue =
            serde_json::from_value(value).map_err(|e| CorpusError::Parse {
                path: path_label.to_string(),
                line: 0,
                column: 0,
                byte_offset: 0,
                dialogue: format!(" in dialogue {id_hint}"),
                message: e.to_string(),
            })?;
        examples.extend(dialogue_examples(dialogue, ontology)?);
    }
    Ok(examples)
}

fn dialogue_examples(
    dialogue: RawDialogue,
    ontology: &Ontology,
) -> Result<Vec<LabeledExample>, CorpusError> {
    let mut history = DialogueHistory::default();
    let mut examples = Vec::new();
    let mut user_turn_index = 0u32;

    for turn in dialogue.turns {
        let speaker = match turn.speaker.as_str() {
            "USER" => Speaker::User,
            _ => Speaker::System,
        };
        let dialogue_turn =
            DialogueTurn::new(speaker, turn.utterance).map_err(|source| CorpusError::Model {
                dialogue_id: dialogue.dialogue_id.clone(),
                source,
            })?;
        history.push(dialogue_turn);

        if speaker != Speaker::User {
            continue;
        }

        let mut state = BeliefState::new();
        for frame in &turn.frames {
            let domain: Domain =
                frame
                    .service
                    .parse()
                    .map_err(|_| CorpusError::UnknownService {
                        service: frame.service.clone(),
                        dialogue_id: dialogue.dialogue_id.clone(),
                    })?;
            for (slot_name, values) in &frame.state.slot_values {
                // Multi-valued slots take the first listed value.
                let Some(value) = values.first() else { continue };
                if value == NONE_SENTINEL {
                    continue;
                }
                let prefix = format!("{}-", frame.service);
                let slot_name = slot_name.strip_prefix(&prefix).unwrap_or(slot_name);
                state
                    .insert(ontology, domain, slot_name, value.clone())
                    .map_err(|source| CorpusError::Model {
                        dialogue_id: dialogue.dialogue_id.clone(),
                        source,
                    })?;
            }
        }

        examples.push(LabeledExample {
            history: history.clone(),
            gold_domains: state.domains(),
            gold_state: state,
            dialogue_id: dialogue.dialogue_id.clone(),
            turn_index: user_turn_index,
        });
        user_turn_index += 1;
    }
    Ok(examples)
}

/// Buckets examples by gold domain count k in 1..=4. Examples with zero or
/// more than four domains are excluded and counted in the report.
pub fn stratify_by_domain_count(
    examples: &[LabeledExample],
) -> (BTreeMap<usize, Vec<LabeledExample>>, DiscardReport) {
    let mut strata: BTreeMap<usize, Vec<LabeledExample>> =
        (1..=4).map(|k| (k, Vec::new())).collect();
    let mut report = DiscardReport::default();
    for example in examples {
        match example.domain_count() {
            0 => report.zero_domain += 1,
            k @ 1..=4 => strata.get_mut(&k).unwrap().push(example.clone()),
            _ => report.over_four_domain += 1,
        }
    }
    (strata, report)
}

/// Largest-remainder apportionment of `size` across the four strata. Ties
/// on remainders break toward smaller k.
pub fn stratum_counts(size: usize, dist: &DomainDistribution) -> [usize; 4] {
    let raw: Vec<f64> = dist.p.iter().map(|p| p * size as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..4).collect();
    order.sort_by(|&a, &b| {
        let ra = raw[a] - raw[a].floor();
        let rb = raw[b] - raw[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(size.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    [counts[0], counts[1], counts[2], counts[3]]
}

/// Draws a seeded sample with the given size and domain-count distribution.
pub fn sample_domain_dataset(
    examples: &[LabeledExample],
    size: usize,
    dist: DomainDistribution,
    seed: u64,
) -> Result<SampledDataset, CorpusError> {
    let (strata, _) = stratify_by_domain_count(examples);
    let counts = stratum_counts(size, &dist);

    let mut sampled = Vec::with_capacity(size);
    for (i, count) in counts.iter().enumerate() {
        let k = i + 1;
        let pool = &strata[&k];
        if pool.len() < *count {
            return Err(CorpusError::InsufficientStratum {
                stratum: k,
                available: pool.len(),
                requested: *count,
            });
        }
        // Per-stratum sub-seed keeps draws independent of other strata.
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut indices: Vec<usize> = (0..pool.len()).collect();
        indices.shuffle(&mut rng);
        for &idx in indices.iter().take(*count) {
            sampled.push(pool[idx].clone());
        }
    }

    Ok(SampledDataset {
        examples: sampled,
        seed,
        spec: SampleSpec::DomainDistribution { size, dist },
        short_slots: Vec::new(),
    })
}

/// Draws up to `per_slot` examples for every ontology slot that occurs
/// filled at least once. An example may serve several slots but appears at
/// most once per slot; the overall sample is deduplicated.
pub fn sample_slot_dataset(
    examples: &[LabeledExample],
    ontology: &Ontology,
    per_slot: usize,
    seed: u64,
) -> Result<SampledDataset, CorpusError> {
    if per_slot < 1 {
        return Err(CorpusError::BadPerSlot);
    }

    let mut selected_indices: Vec<usize> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    let mut short_slots = Vec::new();

    for (slot_idx, slot) in ontology.slots().iter().enumerate() {
        let pool: Vec<usize> = examples
            .iter()
            .enumerate()
            .filter(|(_, e)| e.gold_state.get(slot.domain, &slot.slot_name).is_some())
            .map(|(i, _)| i)
            .collect();
        if pool.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1000 + slot_idx as u64));
        let mut indices = pool.clone();
        indices.shuffle(&mut rng);
        let take = per_slot.min(indices.len());
        if take < per_slot {
            short_slots.push((slot.qualified_name(), take));
        }
        for &idx in indices.iter().take(take) {
            if seen.insert(idx) {
                selected_indices.push(idx);
            }
        }
    }

    Ok(SampledDataset {
        examples: selected_indices
            .into_iter()
            .map(|i| examples[i].clone())
            .collect(),
        seed,
        spec: SampleSpec::PerSlot { per_slot },
        short_slots,
    })
}
