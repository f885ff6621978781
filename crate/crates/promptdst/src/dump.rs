//! On-disk artifact formats: prediction dumps and example caches, both JSON
//! lines. Writes are atomic (write-temp-then-rename).

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::float::Scalar;
use crate::model::{BeliefState, Domain, LabeledExample};
use crate::slot_predictor::TurnPrediction;

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("failed to write {path}: {source}")]
    Write {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to read {path}: {source}")]
    Read {
        path: String,
        source: std::io::Error,
    },
    #[error("bad record at {path}:{line}: {source}")]
    Parse {
        path: String,
        line: usize,
        source: serde_json::Error,
    },
}

/// One turn's prediction, as dumped for the evaluation stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub dialogue_id: String,
    pub turn_index: u32,
    pub domains: BTreeSet<Domain>,
    pub state: BeliefState,
    pub slot_generations: BTreeMap<String, String>,
    pub categorical_maps: BTreeMap<String, BTreeMap<String, f64>>,
    pub duplicate_value_count: usize,
}

impl PredictionRecord {
    pub fn from_turn<F: Scalar>(
        dialogue_id: impl Into<String>,
        turn_index: u32,
        turn: &TurnPrediction<F>,
    ) -> Self {
        Self {
            dialogue_id: dialogue_id.into(),
            turn_index,
            domains: turn.domains.clone(),
            state: turn.state.clone(),
            slot_generations: turn.slot_generations.clone(),
            categorical_maps: turn
                .categorical_maps
                .iter()
                .map(|(slot, dist)| {
                    (
                        slot.clone(),
                        dist.iter().map(|(v, p)| (v.clone(), p.to_f64_lossy())).collect(),
                    )
                })
                .collect(),
            duplicate_value_count: turn.duplicate_value_count,
        }
    }
}

/// Writes records as JSON lines via a temp file renamed into place.
pub fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), DumpError> {
    let wrap = |source| DumpError::Write {
        path: path.display().to_string(),
        source,
    };
    let tmp = path.with_extension("tmp");
    {
        let mut file = std::fs::File::create(&tmp).map_err(wrap)?;
        for record in records {
            let line = serde_json::to_string(record).map_err(|e| DumpError::Write {
                path: path.display().to_string(),
                source: std::io::Error::other(e),
            })?;
            writeln!(file, "{line}").map_err(wrap)?;
        }
        file.flush().map_err(wrap)?;
    }
    std::fs::rename(&tmp, path).map_err(wrap)
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, DumpError> {
    let text = std::fs::read_to_string(path).map_err(|source| DumpError::Read {
        path: path.display().to_string(),
        source,
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            serde_json::from_str(line).map_err(|source| DumpError::Parse {
                path: path.display().to_string(),
                line: i + 1,
                source,
            })
        })
        .collect()
}

pub fn write_example_cache(path: &Path, examples: &[LabeledExample]) -> Result<(), DumpError> {
    write_jsonl(path, examples)
}

pub fn read_example_cache(path: &Path) -> Result<Vec<LabeledExample>, DumpError> {
    read_jsonl(path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        let records = vec![PredictionRecord {
            dialogue_id: "d1".into(),
            turn_index: 0,
            domains: [Domain::Hotel].into_iter().collect(),
            state: BeliefState::new(),
            slot_generations: BTreeMap::new(),
            categorical_maps: BTreeMap::new(),
            duplicate_value_count: 0,
        }];
        write_jsonl(&path, &records).unwrap();
        let read: Vec<PredictionRecord> = read_jsonl(&path).unwrap();
        assert_eq!(read, records);
        assert!(!path.with_extension("tmp").exists());
    }

    #[test]
    fn bad_line_reports_location() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.jsonl");
        std::fs::write(&path, "{\"not\": \"a record\"}\n").unwrap();
        let err = read_jsonl::<PredictionRecord>(&path).unwrap_err();
        assert!(matches!(err, DumpError::Parse { line: 1, .. }));
    }
}
