//! Experiment configuration: a flat-key TOML file describing corpus paths,
//! backend, sampling grids and training hyperparameters.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{FineTuneConfig, LossKind};
use crate::corpus::DomainDistribution;
use crate::domain_predictor::GaConfig;
use crate::evaluation::PartialMode;
use crate::model::RenderStyle;
use crate::slot_predictor::{DomainStrategy, SlotMode};

/// Environment variable overriding the remote backend URL.
pub const BACKEND_URL_ENV: &str = "PROMPTDST_BACKEND_URL";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("failed to read config {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("failed to parse config {path}: {source}")]
    Parse {
        path: String,
        source: Box<toml::de::Error>,
    },
    #[error("referenced path does not exist: {key} = {path}")]
    MissingPath { key: &'static str, path: PathBuf },
    #[error("distribution grid is empty")]
    EmptyGrid,
    #[error("bad distribution in grid: {0}")]
    BadDistribution(String),
    #[error("backend {0:?} is not one of mock, remote")]
    BadBackend(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Mock,
    Remote,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub corpus_path: PathBuf,
    /// Optional held-out corpus for evaluation; defaults to `corpus_path`.
    #[serde(default)]
    pub eval_corpus_path: Option<PathBuf>,
    pub ontology_path: PathBuf,
    pub prompt_catalog_path: PathBuf,

    #[serde(default = "defaults::backend")]
    pub backend: BackendKind,
    #[serde(default)]
    pub mock_table_path: Option<PathBuf>,
    #[serde(default)]
    pub backend_url: Option<String>,
    #[serde(default = "defaults::model_name")]
    pub model_name: String,

    #[serde(default)]
    pub weights_path: Option<PathBuf>,
    #[serde(default)]
    pub keyword_table_path: Option<PathBuf>,

    #[serde(default = "defaults::render_style")]
    pub render_style: RenderStyle,
    #[serde(default = "defaults::yes")]
    pub include_system_turns: bool,

    /// Rows of the sampling grid, p1..p4 per row.
    #[serde(default = "defaults::distribution_grid")]
    pub distribution_grid: Vec<[f64; 4]>,
    #[serde(default = "defaults::dataset_sizes")]
    pub dataset_sizes: Vec<usize>,
    #[serde(default = "defaults::per_slot_counts")]
    pub per_slot_counts: Vec<usize>,
    #[serde(default = "defaults::sample_size")]
    pub sample_size: usize,

    #[serde(default = "defaults::loss_kind")]
    pub loss_kind: LossKind,
    #[serde(default = "defaults::one")]
    pub ul_weight: f64,
    #[serde(default = "defaults::learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "defaults::epochs")]
    pub epochs: u32,
    #[serde(default = "defaults::batch_size")]
    pub batch_size: u32,

    #[serde(default)]
    pub ga: GaOverrides,

    #[serde(default = "defaults::domain_strategy")]
    pub domain_strategy: DomainStrategy,
    #[serde(default = "defaults::slot_mode")]
    pub slot_mode: SlotMode,
    #[serde(default = "defaults::partial_mode")]
    pub partial_mode: PartialMode,

    #[serde(default)]
    pub seed: u64,
    #[serde(default = "defaults::one_usize")]
    pub workers: usize,
}

/// Flat GA keys (ga_population_size etc. are spelled ga.population_size in
/// TOML's dotted-key form, still a flat namespace).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GaOverrides {
    pub population_size: usize,
    pub generations: usize,
    pub mutation_rate: f64,
    pub mutation_sigma: f64,
    pub crossover_rate: f64,
    pub elitism_count: usize,
}

impl Default for GaOverrides {
    fn default() -> Self {
        let d = GaConfig::default();
        Self {
            population_size: d.population_size,
            generations: d.generations,
            mutation_rate: d.mutation_rate,
            mutation_sigma: d.mutation_sigma,
            crossover_rate: d.crossover_rate,
            elitism_count: d.elitism_count,
        }
    }
}

mod defaults {
    use super::*;

    pub fn backend() -> BackendKind {
        BackendKind::Mock
    }
    pub fn model_name() -> String {
        "default".to_string()
    }
    pub fn render_style() -> RenderStyle {
        RenderStyle::Plain
    }
    pub fn yes() -> bool {
        true
    }
    /// The P1..P6 distribution grid, least to most 3/4-domain weighted.
    pub fn distribution_grid() -> Vec<[f64; 4]> {
        vec![
            [0.4, 0.3, 0.2, 0.1],
            [0.35, 0.35, 0.15, 0.15],
            [0.25, 0.25, 0.25, 0.25],
            [0.2, 0.2, 0.3, 0.3],
            [0.15, 0.15, 0.35, 0.35],
            [0.1, 0.2, 0.3, 0.4],
        ]
    }
    pub fn dataset_sizes() -> Vec<usize> {
        vec![16, 32, 64, 128, 256]
    }
    pub fn per_slot_counts() -> Vec<usize> {
        vec![0, 3, 5, 7]
    }
    pub fn sample_size() -> usize {
        128
    }
    pub fn loss_kind() -> LossKind {
        LossKind::Nll
    }
    pub fn one() -> f64 {
        1.0
    }
    pub fn learning_rate() -> f64 {
        1e-7
    }
    pub fn epochs() -> u32 {
        50
    }
    pub fn batch_size() -> u32 {
        2
    }
    pub fn domain_strategy() -> DomainStrategy {
        DomainStrategy::MlmWgs
    }
    pub fn slot_mode() -> SlotMode {
        SlotMode::Generative
    }
    pub fn partial_mode() -> PartialMode {
        PartialMode::GoldRecall
    }
    pub fn one_usize() -> usize {
        1
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let mut config: ExperimentConfig =
            toml::from_str(&text).map_err(|source| ConfigError::Parse {
                path: path.display().to_string(),
                source: Box::new(source),
            })?;
        if let Ok(url) = std::env::var(BACKEND_URL_ENV) {
            config.backend_url = Some(url);
            config.backend = BackendKind::Remote;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        for (key, path) in [
            ("corpus_path", Some(&self.corpus_path)),
            ("ontology_path", Some(&self.ontology_path)),
            ("prompt_catalog_path", Some(&self.prompt_catalog_path)),
            ("eval_corpus_path", self.eval_corpus_path.as_ref()),
            ("mock_table_path", self.mock_table_path.as_ref()),
            ("weights_path", self.weights_path.as_ref()),
            ("keyword_table_path", self.keyword_table_path.as_ref()),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    return Err(ConfigError::MissingPath {
                        key,
                        path: path.clone(),
                    });
                }
            }
        }
        if self.distribution_grid.is_empty() {
            return Err(ConfigError::EmptyGrid);
        }
        for row in &self.distribution_grid {
            DomainDistribution::new(*row)
                .map_err(|e| ConfigError::BadDistribution(e.to_string()))?;
        }
        if self.backend == BackendKind::Remote && self.backend_url.is_none() {
            return Err(ConfigError::BadBackend(
                "remote backend requires backend_url".to_string(),
            ));
        }
        Ok(())
    }

    pub fn ga_config(&self, seed: u64) -> GaConfig {
        GaConfig {
            population_size: self.ga.population_size,
            generations: self.ga.generations,
            mutation_rate: self.ga.mutation_rate,
            mutation_sigma: self.ga.mutation_sigma,
            crossover_rate: self.ga.crossover_rate,
            elitism_count: self.ga.elitism_count,
            seed,
        }
    }

    pub fn fine_tune_config(&self, seed: u64) -> FineTuneConfig {
        FineTuneConfig {
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed,
        }
    }

    /// Stable hash of the full configuration, stamped into artifacts.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let hex: String = digest.iter().map(|b| format!("{b:02x}")).collect();
        hex[..16].to_string()
    }
}
