//! Core domain types shared by every stage of the pipeline: domains,
//! ontology slots, dialogue histories and belief states.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Sentinel used at the generation layer for unfilled slots. Never stored
/// inside a [`BeliefState`].
pub const NONE_SENTINEL: &str = "none";

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("unknown domain: {0:?}")]
    UnknownDomain(String),
    #[error("empty dialogue history")]
    EmptyHistory,
    #[error("empty utterance in dialogue turn")]
    EmptyUtterance,
    #[error("unknown slot {domain}-{slot}")]
    UnknownSlot { domain: Domain, slot: String },
    #[error("belief state value may not be the sentinel {NONE_SENTINEL:?} ({domain}-{slot})")]
    SentinelValue { domain: Domain, slot: String },
    #[error("duplicate slot {domain}-{slot} in ontology")]
    DuplicateSlot { domain: Domain, slot: String },
    #[error("categorical slot {domain}-{slot} has invalid value list")]
    BadCategoricalValues { domain: Domain, slot: String },
    #[error("failed to read ontology schema {path}: {source}")]
    SchemaIo {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse ontology schema {path}: {source}")]
    SchemaParse {
        path: String,
        source: serde_json::Error,
    },
    #[error("unparseable speaker-tagged rendering: {0:?}")]
    BadRendering(String),
    #[error("bad serialized slot key: {0:?}")]
    BadSlotKey(String),
}

/// One of the eight MultiWOZ-2.2 services, in corpus listing order.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Restaurant,
    Train,
    Attraction,
    Hotel,
    Taxi,
    Hospital,
    Police,
    Bus,
}

impl Domain {
    pub const ALL: [Domain; 8] = [
        Domain::Restaurant,
        Domain::Train,
        Domain::Attraction,
        Domain::Hotel,
        Domain::Taxi,
        Domain::Hospital,
        Domain::Police,
        Domain::Bus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Domain::Restaurant => "restaurant",
            Domain::Train => "train",
            Domain::Attraction => "attraction",
            Domain::Hotel => "hotel",
            Domain::Taxi => "taxi",
            Domain::Hospital => "hospital",
            Domain::Police => "police",
            Domain::Bus => "bus",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "restaurant" => Ok(Domain::Restaurant),
            "train" => Ok(Domain::Train),
            "attraction" => Ok(Domain::Attraction),
            "hotel" => Ok(Domain::Hotel),
            "taxi" => Ok(Domain::Taxi),
            "hospital" => Ok(Domain::Hospital),
            "police" => Ok(Domain::Police),
            "bus" => Ok(Domain::Bus),
            other => Err(ModelError::UnknownDomain(other.to_string())),
        }
    }
}

/// One slot of the loaded ontology.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDef {
    pub domain: Domain,
    pub slot_name: String,
    pub is_categorical: bool,
    pub categorical_values: Vec<String>,
}

impl SlotDef {
    pub fn key(&self) -> (Domain, &str) {
        (self.domain, self.slot_name.as_str())
    }

    /// `hotel-name` style identifier.
    pub fn qualified_name(&self) -> String {
        format!("{}-{}", self.domain, self.slot_name)
    }
}

/// The closed set of (domain, slot) pairs the tracker knows about.
#[derive(Debug, Clone)]
pub struct Ontology {
    slots: Vec<SlotDef>,
    index: HashMap<(Domain, String), usize>,
}

/// JSON layout mirroring the MultiWOZ-2.2 schema file.
#[derive(Debug, Deserialize)]
struct SchemaService {
    service_name: String,
    slots: Vec<SchemaSlot>,
}

#[derive(Debug, Deserialize)]
struct SchemaSlot {
    name: String,
    #[serde(default)]
    is_categorical: bool,
    #[serde(default)]
    possible_values: Vec<String>,
}

impl Ontology {
    pub fn new(slots: Vec<SlotDef>) -> Result<Self, ModelError> {
        let mut index = HashMap::new();
        for (i, slot) in slots.iter().enumerate() {
            if slot.is_categorical {
                let mut seen = BTreeSet::new();
                let ok = !slot.categorical_values.is_empty()
                    && slot.categorical_values.iter().all(|v| seen.insert(v));
                if !ok {
                    return Err(ModelError::BadCategoricalValues {
                        domain: slot.domain,
                        slot: slot.slot_name.clone(),
                    });
                }
            }
            let prev = index.insert((slot.domain, slot.slot_name.clone()), i);
            if prev.is_some() {
                return Err(ModelError::DuplicateSlot {
                    domain: slot.domain,
                    slot: slot.slot_name.clone(),
                });
            }
        }
        Ok(Self { slots, index })
    }

    /// Loads a MultiWOZ-2.2-style schema file (list of services with slots).
    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::SchemaIo {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_schema_json(&text).map_err(|e| match e {
            ModelError::SchemaParse { source, .. } => ModelError::SchemaParse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_schema_json(text: &str) -> Result<Self, ModelError> {
        let services: Vec<SchemaService> =
            serde_json::from_str(text).map_err(|source| ModelError::SchemaParse {
                path: "<inline>".to_string(),
                source,
            })?;
        let mut slots = Vec::new();
        for service in services {
            let domain: Domain = service.service_name.parse()?;
            for slot in service.slots {
                // Schema names slots as "hotel-name"; strip the service prefix.
                let prefix = format!("{}-", service.service_name);
                let slot_name = slot
                    .name
                    .strip_prefix(&prefix)
                    .unwrap_or(&slot.name)
                    .to_string();
                slots.push(SlotDef {
                    domain,
                    slot_name,
                    is_categorical: slot.is_categorical,
                    categorical_values: slot.possible_values,
                });
            }
        }
        Self::new(slots)
    }

    pub fn slots(&self) -> &[SlotDef] {
        &self.slots
    }

    pub fn slots_for(&self, domain: Domain) -> impl Iterator<Item = &SlotDef> {
        self.slots.iter().filter(move |s| s.domain == domain)
    }

    pub fn get(&self, domain: Domain, slot_name: &str) -> Option<&SlotDef> {
        self.index
            .get(&(domain, slot_name.to_string()))
            .map(|&i| &self.slots[i])
    }

    pub fn contains(&self, domain: Domain, slot_name: &str) -> bool {
        self.get(domain, slot_name).is_some()
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn tag(self) -> &'static str {
        match self {
            Speaker::User => "USER",
            Speaker::System => "SYSTEM",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub speaker: Speaker,
    pub utterance: String,
}

impl DialogueTurn {
    pub fn new(speaker: Speaker, utterance: impl Into<String>) -> Result<Self, ModelError> {
        let utterance = utterance.into();
        if utterance.trim().is_empty() {
            return Err(ModelError::EmptyUtterance);
        }
        Ok(Self { speaker, utterance })
    }
}

/// How a history is rendered into prompt text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderStyle {
    Plain,
    SpeakerTagged,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DialogueHistory {
    turns: Vec<DialogueTurn>,
}

impl DialogueHistory {
    pub fn new(turns: Vec<DialogueTurn>) -> Self {
        Self { turns }
    }

    pub fn turns(&self) -> &[DialogueTurn] {
        &self.turns
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push(&mut self, turn: DialogueTurn) {
        self.turns.push(turn);
    }

    /// Copy with only the user's turns kept, for prompts that exclude the
    /// system side.
    pub fn user_only(&self) -> Self {
        Self {
            turns: self
                .turns
                .iter()
                .filter(|t| t.speaker == Speaker::User)
                .cloned()
                .collect(),
        }
    }

    /// Drops oldest turns until the rendering fits `max_chars`. Truncation
    /// is always from the front.
    pub fn truncated_to_chars(&self, style: RenderStyle, max_chars: usize) -> Self {
        let mut start = 0;
        while start < self.turns.len() {
            let candidate = Self {
                turns: self.turns[start..].to_vec(),
            };
            if render_history(&candidate, style)
                .map(|s| s.chars().count() <= max_chars)
                .unwrap_or(true)
            {
                return candidate;
            }
            start += 1;
        }
        Self { turns: Vec::new() }
    }
}

/// Renders a dialogue history into the flat text fed to the prompt builders.
pub fn render_history(history: &DialogueHistory, style: RenderStyle) -> Result<String, ModelError> {
    if history.is_empty() {
        return Err(ModelError::EmptyHistory);
    }
    let rendered = match style {
        RenderStyle::Plain => history
            .turns
            .iter()
            .map(|t| t.utterance.as_str())
            .collect::<Vec<_>>()
            .join(" "),
        RenderStyle::SpeakerTagged => history
            .turns
            .iter()
            .map(|t| format!("{}: {}", t.speaker.tag(), t.utterance))
            .collect::<Vec<_>>()
            .join(" "),
    };
    Ok(rendered)
}

/// Inverse of the speaker-tagged rendering; recovers turn boundaries and
/// speakers.
pub fn parse_speaker_tagged(text: &str) -> Result<DialogueHistory, ModelError> {
    let mut turns: Vec<DialogueTurn> = Vec::new();
    let mut rest = text;
    if !(rest.starts_with("USER: ") || rest.starts_with("SYSTEM: ")) {
        return Err(ModelError::BadRendering(text.to_string()));
    }
    while !rest.is_empty() {
        let (speaker, body) = if let Some(body) = rest.strip_prefix("USER: ") {
            (Speaker::User, body)
        } else if let Some(body) = rest.strip_prefix("SYSTEM: ") {
            (Speaker::System, body)
        } else {
            return Err(ModelError::BadRendering(text.to_string()));
        };
        let next_user = body.find(" USER: ");
        let next_system = body.find(" SYSTEM: ");
        let cut = match (next_user, next_system) {
            (Some(a), Some(b)) => Some(a.min(b)),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        };
        let (utterance, remainder) = match cut {
            Some(i) => (&body[..i], &body[i + 1..]),
            None => (body, ""),
        };
        turns.push(DialogueTurn::new(speaker, utterance)?);
        rest = remainder;
    }
    Ok(DialogueHistory::new(turns))
}

/// The pipeline's final output: filled (domain, slot) pairs and their values.
/// Serializes as a flat `"domain-slot": value` map.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(into = "BTreeMap<String, String>", try_from = "BTreeMap<String, String>")]
pub struct BeliefState {
    entries: BTreeMap<(Domain, String), String>,
}

impl From<BeliefState> for BTreeMap<String, String> {
    fn from(state: BeliefState) -> Self {
        state
            .entries
            .into_iter()
            .map(|((domain, slot), value)| (format!("{domain}-{slot}"), value))
            .collect()
    }
}

impl TryFrom<BTreeMap<String, String>> for BeliefState {
    type Error = ModelError;

    fn try_from(map: BTreeMap<String, String>) -> Result<Self, ModelError> {
        let mut entries = BTreeMap::new();
        for (key, value) in map {
            let (domain, slot) = key.split_once('-').ok_or(ModelError::BadSlotKey(key.clone()))?;
            let domain: Domain = domain
                .parse()
                .map_err(|_| ModelError::BadSlotKey(key.clone()))?;
            entries.insert((domain, slot.to_string()), value);
        }
        Ok(Self { entries })
    }
}

impl BeliefState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Inserts a slot value, validating the key against the ontology and
    /// rejecting the "none" sentinel.
    pub fn insert(
        &mut self,
        ontology: &Ontology,
        domain: Domain,
        slot_name: &str,
        value: impl Into<String>,
    ) -> Result<(), ModelError> {
        if !ontology.contains(domain, slot_name) {
            return Err(ModelError::UnknownSlot {
                domain,
                slot: slot_name.to_string(),
            });
        }
        let value = value.into();
        if value == NONE_SENTINEL {
            return Err(ModelError::SentinelValue {
                domain,
                slot: slot_name.to_string(),
            });
        }
        self.entries.insert((domain, slot_name.to_string()), value);
        Ok(())
    }

    pub fn from_entries<I, S, V>(ontology: &Ontology, entries: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = (Domain, S, V)>,
        S: AsRef<str>,
        V: Into<String>,
    {
        let mut state = Self::new();
        for (domain, slot, value) in entries {
            state.insert(ontology, domain, slot.as_ref(), value)?;
        }
        Ok(state)
    }

    pub fn get(&self, domain: Domain, slot_name: &str) -> Option<&str> {
        self.entries
            .get(&(domain, slot_name.to_string()))
            .map(|s| s.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (Domain, &str, &str)> {
        self.entries
            .iter()
            .map(|((d, s), v)| (*d, s.as_str(), v.as_str()))
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.entries.keys().map(|(d, _)| *d).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// A rendered training/evaluation unit: one user turn with its gold labels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub history: DialogueHistory,
    pub gold_domains: BTreeSet<Domain>,
    pub gold_state: BeliefState,
    pub dialogue_id: String,
    pub turn_index: u32,
}

impl LabeledExample {
    /// Number of gold domains; the stratification key.
    pub fn domain_count(&self) -> usize {
        self.gold_domains.len()
    }
}
