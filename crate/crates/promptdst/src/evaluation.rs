//! Metric suite: domain-set accuracies, strict/flexible slot-value
//! accuracy, joint and slot accuracy over belief states, and the aggregate
//! report built from prediction dumps.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dump::PredictionRecord;
use crate::model::{BeliefState, Domain, LabeledExample, Ontology};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction and gold lists differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("empty input")]
    Empty,
    #[error("dump records without a matching gold turn: {0:?}")]
    UnmatchedRecords(Vec<String>),
}

/// Full accuracy: exact set equality between predicted and gold domains.
pub fn full_accuracy(
    preds: &[BTreeSet<Domain>],
    golds: &[BTreeSet<Domain>],
) -> Result<f64, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(correct as f64 / preds.len() as f64)
}

/// Operative definition of the partial-credit domain metric.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartialMode {
    /// |pred ∩ gold| / |gold| — recall-style credit. The default.
    GoldRecall,
    /// |pred ∩ gold| / |pred ∪ gold| — alternate definition for
    /// sensitivity analysis.
    Jaccard,
}

/// Mean partial credit over examples; examples with an empty gold set are
/// skipped and their count returned alongside.
pub fn partial_accuracy(
    preds: &[BTreeSet<Domain>],
    golds: &[BTreeSet<Domain>],
    mode: PartialMode,
) -> Result<(f64, usize), EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for (pred, gold) in preds.iter().zip(golds) {
        if gold.is_empty() {
            skipped += 1;
            continue;
        }
        let intersection = pred.intersection(gold).count() as f64;
        total += match mode {
            PartialMode::GoldRecall => intersection / gold.len() as f64,
            PartialMode::Jaccard => intersection / pred.union(gold).count() as f64,
        };
        counted += 1;
    }
    if counted == 0 {
        return Err(EvalError::Empty);
    }
    Ok((total / counted as f64, skipped))
}

/// Flexible-match normalization: lower-case, trim, strip `. , ! ? ' "`,
/// collapse whitespace runs. Idempotent.
pub fn normalize_value(v: &str) -> String {
    let stripped: String = v
        .to_lowercase()
        .chars()
        .filter(|c| !matches!(c, '.' | ',' | '!' | '?' | '\'' | '"'))
        .collect();
    stripped.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMode {
    Strict,
    Flexible,
}

fn values_match(pred: &str, gold: &str, mode: MatchMode) -> bool {
    match mode {
        MatchMode::Strict => pred == gold,
        MatchMode::Flexible => normalize_value(pred) == normalize_value(gold),
    }
}

/// Accuracy over aligned per-example (slot, value) targets.
pub fn slot_value_accuracy(
    preds: &[(String, String)],
    golds: &[(String, String)],
    mode: MatchMode,
) -> Result<f64, EvalError> {
    check_lengths(preds.len(), golds.len())?;
    let correct = preds
        .iter()
        .zip(golds)
        .filter(|((ps, pv), (gs, gv))| ps == gs && values_match(pv, gv, mode))
        .count();
    Ok(correct as f64 / preds.len() as f64)
}

fn states_agree_on_slot(
    pred: &BeliefState,
    gold: &BeliefState,
    domain: Domain,
    slot_name: &str,
) -> bool {
    match (pred.get(domain, slot_name), gold.get(domain, slot_name)) {
        (None, None) => true,
        (Some(p), Some(g)) => values_match(p, g, MatchMode::Flexible),
        _ => false,
    }
}

/// Joint accuracy (mean exact belief-state match per turn, flexible value
/// comparison) and slot accuracy (mean agreement over turn × ontology slot,
/// both-absent counting as agreement).
pub fn joint_and_slot_accuracy(
    pred_states: &[BeliefState],
    gold_states: &[BeliefState],
    ontology: &Ontology,
) -> Result<(f64, f64), EvalError> {
    check_lengths(pred_states.len(), gold_states.len())?;
    let mut joint_hits = 0usize;
    let mut slot_hits = 0usize;
    for (pred, gold) in pred_states.iter().zip(gold_states) {
        let mut all_agree = true;
        for slot in ontology.slots() {
            if states_agree_on_slot(pred, gold, slot.domain, &slot.slot_name) {
                slot_hits += 1;
            } else {
                all_agree = false;
            }
        }
        if all_agree {
            joint_hits += 1;
        }
    }
    let turns = pred_states.len() as f64;
    Ok((
        joint_hits as f64 / turns,
        slot_hits as f64 / (turns * ontology.len() as f64),
    ))
}

fn check_lengths(preds: usize, golds: usize) -> Result<(), EvalError> {
    if preds != golds {
        return Err(EvalError::LengthMismatch { preds, golds });
    }
    if preds == 0 {
        return Err(EvalError::Empty);
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub full_accuracy: f64,
    pub partial_accuracy: f64,
    pub strict_slot_accuracy: f64,
    pub flexible_slot_accuracy: f64,
    pub joint_accuracy: f64,
    pub slot_accuracy: f64,
    pub n_examples: usize,
    /// Full accuracy by gold domain count, keyed "1".."4".
    pub per_stratum: BTreeMap<String, f64>,
    pub skipped_empty_gold: usize,
}

impl MetricReport {
    /// Fixed-column CSV: metric,value,n,stratum.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value,n,stratum\n");
        let rows = [
            ("full_accuracy", self.full_accuracy),
            ("partial_accuracy", self.partial_accuracy),
            ("strict_slot_accuracy", self.strict_slot_accuracy),
            ("flexible_slot_accuracy", self.flexible_slot_accuracy),
            ("joint_accuracy", self.joint_accuracy),
            ("slot_accuracy", self.slot_accuracy),
        ];
        for (metric, value) in rows {
            out.push_str(&format!("{metric},{value},{},all\n", self.n_examples));
        }
        for (k, value) in &self.per_stratum {
            out.push_str(&format!("full_accuracy,{value},{},{k}\n", self.n_examples));
        }
        out
    }
}

/// Joins dump records to gold turns by (dialogue_id, turn_index) and
/// computes every metric. Fails if any record has no gold counterpart or the
/// dump is empty.
pub fn build_report(
    records: &[PredictionRecord],
    golds: &[LabeledExample],
    ontology: &Ontology,
    partial_mode: PartialMode,
) -> Result<MetricReport, EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    let gold_index: HashMap<(&str, u32), &LabeledExample> = golds
        .iter()
        .map(|g| ((g.dialogue_id.as_str(), g.turn_index), g))
        .collect();

    let mut unmatched = Vec::new();
    let mut pairs: Vec<(&PredictionRecord, &LabeledExample)> = Vec::new();
    for record in records {
        match gold_index.get(&(record.dialogue_id.as_str(), record.turn_index)) {
            Some(gold) => pairs.push((record, gold)),
            None => unmatched.push(format!("{}#{}", record.dialogue_id, record.turn_index)),
        }
    }
    if !unmatched.is_empty() {
        return Err(EvalError::UnmatchedRecords(unmatched));
    }

    let pred_domains: Vec<BTreeSet<Domain>> = pairs.iter().map(|(r, _)| r.domains.clone()).collect();
    let gold_domains: Vec<BTreeSet<Domain>> =
        pairs.iter().map(|(_, g)| g.gold_domains.clone()).collect();
    let full = full_accuracy(&pred_domains, &gold_domains)?;
    let (partial, skipped) = partial_accuracy(&pred_domains, &gold_domains, partial_mode)?;

    // Slot-value accuracy over the gold slot targets: the prediction is the
    // dumped state's value for that slot, absent counting as a miss.
    let mut strict_hits = 0usize;
    let mut flexible_hits = 0usize;
    let mut slot_targets = 0usize;
    for (record, gold) in &pairs {
        for (domain, slot_name, gold_value) in gold.gold_state.entries() {
            slot_targets += 1;
            if let Some(pred_value) = record.state.get(domain, slot_name) {
                if values_match(pred_value, gold_value, MatchMode::Strict) {
                    strict_hits += 1;
                }
                if values_match(pred_value, gold_value, MatchMode::Flexible) {
                    flexible_hits += 1;
                }
            }
        }
    }
    let (strict, flexible) = if slot_targets == 0 {
        (1.0, 1.0)
    } else {
        (
            strict_hits as f64 / slot_targets as f64,
            flexible_hits as f64 / slot_targets as f64,
        )
    };

    let pred_states: Vec<BeliefState> = pairs.iter().map(|(r, _)| r.state.clone()).collect();
    let gold_states: Vec<BeliefState> = pairs.iter().map(|(_, g)| g.gold_state.clone()).collect();
    let (joint, slot) = joint_and_slot_accuracy(&pred_states, &gold_states, ontology)?;

    let mut per_stratum = BTreeMap::new();
    for k in 1..=4usize {
        let stratum: Vec<usize> = pairs
            .iter()
            .enumerate()
            .filter(|(_, (_, g))| g.gold_domains.len() == k)
            .map(|(i, _)| i)
            .collect();
        if stratum.is_empty() {
            continue;
        }
        let hits = stratum
            .iter()
            .filter(|&&i| pred_domains[i] == gold_domains[i])
            .count();
        per_stratum.insert(k.to_string(), hits as f64 / stratum.len() as f64);
    }

    Ok(MetricReport {
        full_accuracy: full,
        partial_accuracy: partial,
        strict_slot_accuracy: strict,
        flexible_slot_accuracy: flexible,
        joint_accuracy: joint,
        slot_accuracy: slot,
        n_examples: pairs.len(),
        per_stratum,
        skipped_empty_gold: skipped,
    })
}
