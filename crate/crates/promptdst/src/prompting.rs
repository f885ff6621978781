//! Prompt construction: masked cloze templates for domain prediction, the
//! QA-style causal prompt, and the slot-to-question table.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::SlotDef;

/// Canonical mask placeholder. Backends substitute their own mask token.
pub const MASK_PLACEHOLDER: &str = "[MASK]";

/// Fixed question appended for causal-LM domain prediction.
pub const DOMAIN_QA_PROMPT: &str = "What are the mentioned domains?";

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("mask count {0} outside 1..=4")]
    MaskCountOutOfRange(usize),
    #[error("empty dialogue history text")]
    EmptyHistory,
    #[error("no prompt registered for slot {0}")]
    MissingSlotPrompt(String),
    #[error("template for k={k} contains {found} placeholders, expected {k}")]
    BadTemplate { k: usize, found: usize },
    #[error("slot prompt for {0} does not end with '?'")]
    BadSlotPrompt(String),
    #[error("failed to read prompt catalog {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse prompt catalog {path}: {source}")]
    Parse {
        path: String,
        source: serde_json::Error,
    },
}

fn placeholder_count(template: &str) -> usize {
    template.matches(MASK_PLACEHOLDER).count()
}

/// The cloze templates used for 1..=4-domain prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskedPromptFamily {
    templates: BTreeMap<usize, String>,
}

impl MaskedPromptFamily {
    pub fn new(templates: BTreeMap<usize, String>) -> Result<Self, PromptError> {
        for (&k, template) in &templates {
            if !(1..=4).contains(&k) {
                return Err(PromptError::MaskCountOutOfRange(k));
            }
            let found = placeholder_count(template);
            if found != k {
                return Err(PromptError::BadTemplate { k, found });
            }
        }
        Ok(Self { templates })
    }

    /// The adopted prompt and its multi-mask variants, masks joined with
    /// "and".
    pub fn default_family() -> Self {
        let mut templates = BTreeMap::new();
        for k in 1..=4usize {
            let masks = vec![MASK_PLACEHOLDER; k].join(" and ");
            templates.insert(k, format!("Excited to see the {masks}."));
        }
        Self::new(templates).expect("default templates are well-formed")
    }

    pub fn template(&self, k: usize) -> Result<&str, PromptError> {
        self.templates
            .get(&k)
            .map(|s| s.as_str())
            .ok_or(PromptError::MaskCountOutOfRange(k))
    }
}

/// Slot-specific questions, e.g. hotel-name -> "What is the name of the hotel?".
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotPromptTable {
    entries: BTreeMap<String, String>,
}

impl SlotPromptTable {
    pub fn new(entries: BTreeMap<String, String>) -> Result<Self, PromptError> {
        for (slot, prompt) in &entries {
            if !prompt.trim_end().ends_with('?') {
                return Err(PromptError::BadSlotPrompt(slot.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, slot: &SlotDef) -> Option<&str> {
        self.entries.get(&slot.qualified_name()).map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// The candidate domain-prediction templates in ranked order, plus the
/// active masked family and slot table, as loaded from the catalog file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PromptCatalog {
    pub ranked_domain_prompts: Vec<String>,
    pub masked_family: MaskedPromptFamily,
    pub slot_prompts: SlotPromptTable,
}

#[derive(Debug, Deserialize)]
struct RawCatalog {
    ranked_domain_prompts: Vec<String>,
    masked_templates: BTreeMap<String, String>,
    slot_prompts: BTreeMap<String, String>,
}

impl PromptCatalog {
    pub fn load(path: &Path) -> Result<Self, PromptError> {
        let text = std::fs::read_to_string(path).map_err(|source| PromptError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text).map_err(|e| match e {
            PromptError::Parse { source, .. } => PromptError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<Self, PromptError> {
        let raw: RawCatalog = serde_json::from_str(text).map_err(|source| PromptError::Parse {
            path: "<inline>".to_string(),
            source,
        })?;
        let templates = raw
            .masked_templates
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|k| (k, v))
                    .map_err(|_| PromptError::MaskCountOutOfRange(0))
            })
            .collect::<Result<BTreeMap<_, _>, _>>()?;
        Ok(Self {
            ranked_domain_prompts: raw.ranked_domain_prompts,
            masked_family: MaskedPromptFamily::new(templates)?,
            slot_prompts: SlotPromptTable::new(raw.slot_prompts)?,
        })
    }
}

/// Appends the k-mask cloze template to the rendered history.
pub fn build_masked_input(
    dh: &str,
    k: usize,
    family: &MaskedPromptFamily,
) -> Result<String, PromptError> {
    if !(1..=4).contains(&k) {
        return Err(PromptError::MaskCountOutOfRange(k));
    }
    Ok(format!("{dh} {}", family.template(k)?))
}

/// Appends the fixed domain question for causal-LM prediction.
pub fn build_domain_qa_input(dh: &str) -> Result<String, PromptError> {
    if dh.is_empty() {
        return Err(PromptError::EmptyHistory);
    }
    Ok(format!("{dh} {DOMAIN_QA_PROMPT}"))
}

/// Appends the slot's question from the table.
pub fn build_slot_input(
    dh: &str,
    slot: &SlotDef,
    table: &SlotPromptTable,
) -> Result<String, PromptError> {
    let prompt = table
        .get(slot)
        .ok_or_else(|| PromptError::MissingSlotPrompt(slot.qualified_name()))?;
    Ok(format!("{dh} {prompt}"))
}
