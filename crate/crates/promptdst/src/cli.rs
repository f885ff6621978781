//! Command-line pipeline driver: ingest, sample, train, optimize, predict,
//! evaluate, report. Every artifact is stamped with the config hash and the
//! effective seed; writes are atomic.
//!
//! Exit codes: 1 usage, 2 config, 3 backend, 4 data.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{
    BackendError, FineTuneConfig, LmBackend, LossKind, LossSpec, MockBackend, RemoteBackend,
    RemoteConfig,
};
use crate::config::{BackendKind, ExperimentConfig};
use crate::corpus::{
    load_corpus, sample_domain_dataset, sample_slot_dataset, stratify_by_domain_count,
    DomainDistribution, SampledDataset,
};
use crate::domain_predictor::{
    learn_weights_ga, make_clm_training_pairs, KeywordTable, WgsWeights,
};
use crate::dump::{read_example_cache, read_jsonl, write_jsonl, PredictionRecord};
use crate::evaluation::{build_report, EvalError, MetricReport};
use crate::model::{render_history, LabeledExample, Ontology};
use crate::prompting::PromptCatalog;
use crate::reference::reference_footer;
use crate::slot_predictor::{
    make_slot_training_pairs, predict_turn, DomainStrategy, PipelineContext, SlotMode,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Backend(String),
    #[error("{0}")]
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Config(_) => 2,
            CliError::Backend(_) => 3,
            CliError::Data(_) => 4,
        }
    }
}

impl From<crate::config::ConfigError> for CliError {
    fn from(e: crate::config::ConfigError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<BackendError> for CliError {
    fn from(e: BackendError) -> Self {
        CliError::Backend(e.to_string())
    }
}

impl From<crate::corpus::CorpusError> for CliError {
    fn from(e: crate::corpus::CorpusError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::dump::DumpError> for CliError {
    fn from(e: crate::dump::DumpError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::model::ModelError> for CliError {
    fn from(e: crate::model::ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::prompting::PromptError> for CliError {
    fn from(e: crate::prompting::PromptError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<crate::domain_predictor::DomainPredictError> for CliError {
    fn from(e: crate::domain_predictor::DomainPredictError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<crate::slot_predictor::SlotPredictError> for CliError {
    fn from(e: crate::slot_predictor::SlotPredictError) -> Self {
        // Peel stage wrappers so backend faults keep exit code 3.
        fn is_backend(e: &crate::slot_predictor::SlotPredictError) -> bool {
            use crate::slot_predictor::SlotPredictError as E;
            match e {
                E::Backend(_) => true,
                E::Stage { source, .. } => is_backend(source),
                E::Domain(crate::domain_predictor::DomainPredictError::Backend(_)) => true,
                _ => false,
            }
        }
        if is_backend(&e) {
            CliError::Backend(e.to_string())
        } else {
            CliError::Data(e.to_string())
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "promptdst", about = "Prompt-based dialogue state tracking pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Experiment configuration (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides the seed from the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Overrides the worker count from the config file.
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Artifact directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse the corpus into a labeled example cache.
    Ingest,
    /// Draw the domain-distribution and per-slot datasets.
    Sample,
    /// Fine-tune the domain model on question-answer pairs.
    TrainDomain,
    /// Fine-tune the slot model on slot-question pairs.
    TrainSlot,
    /// Learn the grouped-score weights by genetic search.
    GaWeights,
    /// Run the two-stage pipeline over the evaluation corpus.
    Predict,
    /// Score a prediction dump against the gold states.
    Evaluate,
    /// Aggregate per-cell reports into one CSV table.
    Report,
}

/// JSON artifact wrapper carrying reproducibility stamps.
#[derive(Debug, Serialize, Deserialize)]
pub struct Artifact<T> {
    pub config_hash: String,
    pub seed: u64,
    #[serde(flatten)]
    pub payload: T,
}

fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

#[derive(Debug, Serialize, Deserialize)]
struct SidecarMeta {
    config_hash: String,
    seed: u64,
    n_records: usize,
}

fn write_sidecar(path: &Path, env: &Env, n_records: usize) -> Result<(), CliError> {
    let meta = SidecarMeta {
        config_hash: env.config_hash.clone(),
        seed: env.seed,
        n_records,
    };
    write_json_atomic(&path.with_extension("meta.json"), &meta)
}

/// Everything a subcommand needs from the shared options.
struct Env {
    config: ExperimentConfig,
    config_hash: String,
    seed: u64,
    workers: usize,
    out: PathBuf,
}

impl Env {
    fn new(cli: &Cli) -> Result<Self, CliError> {
        let config_path = cli
            .config
            .as_ref()
            .ok_or_else(|| CliError::Usage("--config is required".to_string()))?;
        let config = ExperimentConfig::load(config_path)?;
        let config_hash = config.hash();
        let seed = cli.seed.unwrap_or(config.seed);
        let workers = cli.workers.unwrap_or(config.workers).max(1);
        std::fs::create_dir_all(&cli.out)
            .map_err(|e| CliError::Data(format!("{}: {e}", cli.out.display())))?;
        Ok(Self {
            config,
            config_hash,
            seed,
            workers,
            out: cli.out.clone(),
        })
    }

    fn ontology(&self) -> Result<Ontology, CliError> {
        Ontology::load(&self.config.ontology_path).map_err(Into::into)
    }

    fn catalog(&self) -> Result<PromptCatalog, CliError> {
        PromptCatalog::load(&self.config.prompt_catalog_path).map_err(Into::into)
    }

    fn base_backend(&self) -> Result<Box<dyn LmBackend<f64>>, CliError> {
        self.backend_from(None)
    }

    /// Opens the configured backend, preferring a trained-model artifact
    /// (a saved mock table, or a remote model id) when one is given.
    fn backend_from(&self, model_artifact: Option<&Path>) -> Result<Box<dyn LmBackend<f64>>, CliError> {
        match self.config.backend {
            BackendKind::Mock => {
                if let Some(path) = model_artifact {
                    if path.exists() {
                        return Ok(Box::new(MockBackend::<f64>::load(path)?));
                    }
                }
                match &self.config.mock_table_path {
                    Some(path) => Ok(Box::new(MockBackend::<f64>::load(path)?)),
                    None => Ok(Box::new(MockBackend::<f64>::new())),
                }
            }
            BackendKind::Remote => {
                let url = self
                    .config
                    .backend_url
                    .clone()
                    .ok_or_else(|| CliError::Config("remote backend without backend_url".into()))?;
                let model = match model_artifact {
                    Some(path) if path.exists() => {
                        let artifact: Artifact<TrainedModel> = read_json(path)?;
                        artifact.payload.model_id
                    }
                    _ => self.config.model_name.clone(),
                };
                Ok(Box::new(RemoteBackend::<f64>::new(RemoteConfig::new(url, model))?))
            }
        }
    }

    fn loss_spec(&self) -> LossSpec<f64> {
        match self.config.loss_kind {
            LossKind::Nll => LossSpec::nll(),
            LossKind::NllPlusUlEos => LossSpec::nll_plus_ul_eos(self.config.ul_weight),
        }
    }

    fn example_cache_path(&self) -> PathBuf {
        self.out.join("examples.jsonl")
    }

    fn eval_cache_path(&self) -> PathBuf {
        self.out.join("eval_examples.jsonl")
    }

    /// Training examples: the ingest cache when present, otherwise parsed
    /// straight from the corpus.
    fn train_examples(&self, ontology: &Ontology) -> Result<Vec<LabeledExample>, CliError> {
        let cache = self.example_cache_path();
        if cache.exists() {
            Ok(read_example_cache(&cache)?)
        } else {
            Ok(load_corpus(&self.config.corpus_path, ontology)?)
        }
    }

    fn eval_examples(&self, ontology: &Ontology) -> Result<Vec<LabeledExample>, CliError> {
        let cache = self.eval_cache_path();
        if cache.exists() {
            return Ok(read_example_cache(&cache)?);
        }
        match &self.config.eval_corpus_path {
            Some(path) => Ok(load_corpus(path, ontology)?),
            None => self.train_examples(ontology),
        }
    }

    /// The canonical training sample shared by train-domain, train-slot and
    /// ga-weights: sample_size examples at the first grid distribution.
    fn training_sample(&self, ontology: &Ontology) -> Result<SampledDataset, CliError> {
        let examples = self.train_examples(ontology)?;
        let dist = DomainDistribution::new(self.config.distribution_grid[0])
            .map_err(|e| CliError::Config(e.to_string()))?;
        sample_domain_dataset(&examples, self.config.sample_size, dist, self.seed)
            .map_err(Into::into)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TrainedModel {
    model_id: String,
    n_pairs: usize,
    /// Saved mock table path, when the backend is the in-process mock.
    table_path: Option<PathBuf>,
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let env = Env::new(cli)?;
    match cli.command {
        Command::Ingest => ingest(&env),
        Command::Sample => sample(&env),
        Command::TrainDomain => train_domain(&env),
        Command::TrainSlot => train_slot(&env),
        Command::GaWeights => ga_weights(&env),
        Command::Predict => predict(&env),
        Command::Evaluate => evaluate(&env),
        Command::Report => report(&env),
    }
}

fn ingest(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let examples = load_corpus(&env.config.corpus_path, &ontology)?;
    let (strata, discards) = stratify_by_domain_count(&examples);
    write_jsonl(&env.example_cache_path(), &examples)?;
    write_sidecar(&env.example_cache_path(), env, examples.len())?;
    println!(
        "ingest: {} examples ({} zero-domain, {} over-four-domain excluded from strata)",
        examples.len(),
        discards.zero_domain,
        discards.over_four_domain
    );
    for (k, bucket) in &strata {
        println!("ingest: stratum k={k}: {} examples", bucket.len());
    }
    if let Some(path) = &env.config.eval_corpus_path {
        let eval = load_corpus(path, &ontology)?;
        write_jsonl(&env.eval_cache_path(), &eval)?;
        write_sidecar(&env.eval_cache_path(), env, eval.len())?;
        println!("ingest: {} evaluation examples", eval.len());
    }
    Ok(())
}

/// Runs independent jobs on up to `workers` threads, preserving job order
/// in the returned results.
fn run_jobs<T: Send>(
    workers: usize,
    jobs: Vec<Box<dyn FnOnce() -> T + Send + '_>>,
) -> Vec<T> {
    let n = jobs.len();
    let queue: Mutex<Vec<(usize, Box<dyn FnOnce() -> T + Send + '_>)>> =
        Mutex::new(jobs.into_iter().enumerate().rev().collect());
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n).max(1) {
            scope.spawn(|| loop {
                let Some((index, job)) = queue.lock().unwrap().pop() else {
                    break;
                };
                let value = job();
                results.lock().unwrap()[index] = Some(value);
            });
        }
    });
    results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|v| v.expect("every job ran"))
        .collect()
}

fn sample(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let examples = env.train_examples(&ontology)?;

    // Grid cells are independent jobs: one per distribution at the default
    // size, one per size at the first distribution, one per per-slot count.
    type Job<'a> = Box<dyn FnOnce() -> Result<String, CliError> + Send + 'a>;
    let mut jobs: Vec<Job> = Vec::new();

    for (i, row) in env.config.distribution_grid.iter().enumerate() {
        let examples = &examples;
        let size = env.config.sample_size;
        let seed = env.seed;
        let path = env.out.join(format!("dataset_domain_p{}.json", i + 1));
        jobs.push(Box::new(move || {
            let dist =
                DomainDistribution::new(*row).map_err(|e| CliError::Config(e.to_string()))?;
            let dataset = sample_domain_dataset(examples, size, dist, seed)?;
            write_json_atomic(
                &path,
                &Artifact { config_hash: String::new(), seed, payload: dataset },
            )?;
            Ok(format!("sample: wrote {}", path.display()))
        }));
    }

    for &size in &env.config.dataset_sizes {
        let examples = &examples;
        let row = env.config.distribution_grid[0];
        let seed = env.seed;
        let path = env.out.join(format!("dataset_domain_s{size}.json"));
        jobs.push(Box::new(move || {
            let dist =
                DomainDistribution::new(row).map_err(|e| CliError::Config(e.to_string()))?;
            let dataset = sample_domain_dataset(examples, size, dist, seed)?;
            write_json_atomic(
                &path,
                &Artifact { config_hash: String::new(), seed, payload: dataset },
            )?;
            Ok(format!("sample: wrote {}", path.display()))
        }));
    }

    for &per_slot in env.config.per_slot_counts.iter().filter(|&&n| n > 0) {
        let examples = &examples;
        let ontology = &ontology;
        let seed = env.seed;
        let path = env.out.join(format!("dataset_slot_k{per_slot}.json"));
        jobs.push(Box::new(move || {
            let dataset = sample_slot_dataset(examples, ontology, per_slot, seed)?;
            let mut note = String::new();
            for (slot, got) in &dataset.short_slots {
                note.push_str(&format!(" [short: {slot} has only {got}]"));
            }
            write_json_atomic(
                &path,
                &Artifact { config_hash: String::new(), seed, payload: dataset },
            )?;
            Ok(format!("sample: wrote {}{note}", path.display()))
        }));
    }

    let results = run_jobs(env.workers, jobs);
    let mut failed = None;
    for result in results {
        match result {
            Ok(line) => println!("{line}"),
            Err(e) => failed = Some(e),
        }
    }
    if let Some(e) = failed {
        return Err(e);
    }

    // Stamp the real config hash into the artifacts in one pass; the jobs
    // above cannot borrow env mutably across threads.
    stamp_hashes(env)?;
    Ok(())
}

fn stamp_hashes(env: &Env) -> Result<(), CliError> {
    for entry in std::fs::read_dir(&env.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", env.out.display())))?
    {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.starts_with("dataset_") || !name.ends_with(".json") {
            continue;
        }
        let mut value: serde_json::Value = read_json(&path)?;
        if value["config_hash"] == "" {
            value["config_hash"] = serde_json::Value::String(env.config_hash.clone());
            write_json_atomic(&path, &value)?;
        }
    }
    Ok(())
}

fn train_domain(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let sample = env.training_sample(&ontology)?;
    let (pairs, skipped) =
        make_clm_training_pairs(&sample.examples, env.config.render_style)?;
    if skipped > 0 {
        println!("train-domain: skipped {skipped} examples without gold domains");
    }
    finish_training(env, &pairs, "domain_model", FineTuneConfig {
        seed: env.seed,
        ..FineTuneConfig::clm_defaults()
    })
}

fn train_slot(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let catalog = env.catalog()?;
    let per_slot = env
        .config
        .per_slot_counts
        .iter()
        .copied()
        .filter(|&n| n > 0)
        .max()
        .ok_or_else(|| CliError::Config("per_slot_counts has no positive entry".into()))?;
    let examples = env.train_examples(&ontology)?;
    let sample = sample_slot_dataset(&examples, &ontology, per_slot, env.seed)?;
    let pairs = make_slot_training_pairs(
        &sample.examples,
        &ontology,
        &catalog.slot_prompts,
        env.config.render_style,
    )?;
    finish_training(env, &pairs, "slot_model", FineTuneConfig {
        seed: env.seed,
        ..FineTuneConfig::seq2seq_defaults()
    })
}

fn finish_training(
    env: &Env,
    pairs: &[(String, String)],
    stem: &str,
    cfg: FineTuneConfig,
) -> Result<(), CliError> {
    let backend = env.base_backend()?;
    let tuned = backend.fine_tune(pairs, &env.loss_spec(), &cfg)?;

    let table_path = match env.config.backend {
        BackendKind::Mock => {
            // Re-tune on the concrete type so the tables can be persisted.
            let base = match &env.config.mock_table_path {
                Some(path) => MockBackend::<f64>::load(path)?,
                None => MockBackend::<f64>::new(),
            };
            let concrete = base.tuned_with(pairs)?;
            let path = env.out.join(format!("{stem}_tables.json"));
            concrete.save(&path)?;
            Some(path)
        }
        BackendKind::Remote => None,
    };

    let artifact = Artifact {
        config_hash: env.config_hash.clone(),
        seed: env.seed,
        payload: TrainedModel {
            model_id: tuned.model_id(),
            n_pairs: pairs.len(),
            table_path,
        },
    };
    let path = env.out.join(format!("{stem}.json"));
    write_json_atomic(&path, &artifact)?;
    println!(
        "{}: trained {} on {} pairs -> {}",
        stem.replace('_', "-"),
        artifact.payload.model_id,
        pairs.len(),
        path.display()
    );
    Ok(())
}

/// Opens the trained model for a pipeline stage, falling back to the base
/// backend when no training artifact exists.
fn stage_backend(env: &Env, stem: &str) -> Result<Box<dyn LmBackend<f64>>, CliError> {
    let artifact_path = env.out.join(format!("{stem}.json"));
    if !artifact_path.exists() {
        return env.base_backend();
    }
    match env.config.backend {
        BackendKind::Mock => {
            let artifact: Artifact<TrainedModel> = read_json(&artifact_path)?;
            match artifact.payload.table_path {
                Some(table) => env.backend_from(Some(&table)),
                None => env.base_backend(),
            }
        }
        BackendKind::Remote => env.backend_from(Some(&artifact_path)),
    }
}

fn ga_weights(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let catalog = env.catalog()?;
    let sample = env.training_sample(&ontology)?;
    let backend = stage_backend(env, "domain_model")?;
    let weights: WgsWeights<f64> = learn_weights_ga(
        &sample.examples,
        backend.as_ref(),
        &catalog.masked_family,
        &crate::model::Domain::ALL,
        &env.config.ga_config(env.seed),
        env.config.render_style,
    )?;
    let weights_path = env.out.join("weights.txt");
    weights.save(&weights_path)?;

    #[derive(Serialize)]
    struct GaArtifact {
        weights: [f64; 4],
        n_train: usize,
    }
    write_json_atomic(
        &env.out.join("ga_weights.json"),
        &Artifact {
            config_hash: env.config_hash.clone(),
            seed: env.seed,
            payload: GaArtifact { weights: weights.w, n_train: sample.examples.len() },
        },
    )?;
    println!(
        "ga-weights: w = [{:.4}, {:.4}, {:.4}, {:.4}] -> {}",
        weights.w[0],
        weights.w[1],
        weights.w[2],
        weights.w[3],
        weights_path.display()
    );
    Ok(())
}

fn load_weights(env: &Env) -> Result<WgsWeights<f64>, CliError> {
    if let Some(path) = &env.config.weights_path {
        return Ok(WgsWeights::load(path)?);
    }
    let learned = env.out.join("weights.txt");
    if learned.exists() {
        return Ok(WgsWeights::load(&learned)?);
    }
    Ok(WgsWeights::default_fixture())
}

fn predict(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let catalog = env.catalog()?;
    let examples = env.eval_examples(&ontology)?;
    if examples.is_empty() {
        return Err(CliError::Data("no evaluation examples".to_string()));
    }
    let domain_backend = stage_backend(env, "domain_model")?;
    let slot_backend = stage_backend(env, "slot_model")?;
    let weights = load_weights(env)?;
    let keyword_table = match &env.config.keyword_table_path {
        Some(path) => Some(KeywordTable::load(path)?),
        None => None,
    };

    let mut ctx = PipelineContext::new(
        domain_backend.as_ref(),
        slot_backend.as_ref(),
        &ontology,
        &catalog.masked_family,
        &weights,
        &catalog.slot_prompts,
    );
    ctx.keyword_table = keyword_table.as_ref();
    if env.config.slot_mode == SlotMode::CategoricalWhenAvailable {
        ctx = ctx.with_categorical_indexes();
    }
    let strategy = env.config.domain_strategy;
    let style = env.config.render_style;

    // Turns are independent jobs; results keep corpus order.
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<PredictionRecord, CliError>>>> =
        Mutex::new((0..examples.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..env.workers.min(examples.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(example) = examples.get(i) else { break };
                let result = (|| {
                    let dh = render_history(&example.history, style)?;
                    let known_k = match strategy {
                        DomainStrategy::KnownK => {
                            Some(example.gold_domains.len().clamp(1, 4))
                        }
                        _ => None,
                    };
                    let turn =
                        predict_turn(&ctx, &dh, strategy, env.config.slot_mode, known_k)?;
                    Ok::<_, CliError>(PredictionRecord::from_turn(
                        example.dialogue_id.clone(),
                        example.turn_index,
                        &turn,
                    ))
                })();
                results.lock().unwrap()[i] = Some(result);
            });
        }
    });

    let mut records = Vec::with_capacity(examples.len());
    for slot in results.into_inner().unwrap() {
        records.push(slot.expect("every turn ran")?);
    }

    let path = env.out.join("predictions.jsonl");
    write_jsonl(&path, &records)?;
    write_sidecar(&path, env, records.len())?;
    println!("predict: {} turns -> {}", records.len(), path.display());
    Ok(())
}

fn evaluate(env: &Env) -> Result<(), CliError> {
    let ontology = env.ontology()?;
    let golds = env.eval_examples(&ontology)?;
    let records: Vec<PredictionRecord> = read_jsonl(&env.out.join("predictions.jsonl"))?;
    let report = build_report(&records, &golds, &ontology, env.config.partial_mode)?;

    write_json_atomic(
        &env.out.join("report.json"),
        &Artifact {
            config_hash: env.config_hash.clone(),
            seed: env.seed,
            payload: report.clone(),
        },
    )?;
    let mut csv = report.to_csv();
    csv.push_str(&reference_footer());
    let csv_path = env.out.join("report.csv");
    let tmp = csv_path.with_extension("tmp");
    std::fs::write(&tmp, &csv)
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;
    std::fs::rename(&tmp, &csv_path)
        .map_err(|e| CliError::Data(format!("{}: {e}", csv_path.display())))?;

    println!(
        "evaluate: full {:.4} partial {:.4} strict-slot {:.4} flexible-slot {:.4} joint {:.4} slot {:.4} ({} turns)",
        report.full_accuracy,
        report.partial_accuracy,
        report.strict_slot_accuracy,
        report.flexible_slot_accuracy,
        report.joint_accuracy,
        report.slot_accuracy,
        report.n_examples
    );
    Ok(())
}

const REPORT_METRICS: usize = 6;

fn report(env: &Env) -> Result<(), CliError> {
    // One row per (cell, metric): cells are every report*.json in the out
    // directory, so the CSV has cells x 6 metric rows plus stratum rows.
    let mut cells: Vec<(String, MetricReport)> = Vec::new();
    let mut names: BTreeSet<String> = BTreeSet::new();
    for entry in std::fs::read_dir(&env.out)
        .map_err(|e| CliError::Data(format!("{}: {e}", env.out.display())))?
    {
        let entry = entry.map_err(|e| CliError::Data(e.to_string()))?;
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.starts_with("report") || !name.ends_with(".json") {
            continue;
        }
        names.insert(name.trim_end_matches(".json").to_string());
        let artifact: Artifact<MetricReport> = read_json(&path)?;
        cells.push((name.trim_end_matches(".json").to_string(), artifact.payload));
    }
    if cells.is_empty() {
        return Err(CliError::Data(format!(
            "no report*.json artifacts in {}",
            env.out.display()
        )));
    }
    cells.sort_by(|a, b| a.0.cmp(&b.0));

    let mut out = String::from("cell,metric,value,n,stratum\n");
    let mut rows = 0usize;
    for (cell, report) in &cells {
        let metrics = [
            ("full_accuracy", report.full_accuracy),
            ("partial_accuracy", report.partial_accuracy),
            ("strict_slot_accuracy", report.strict_slot_accuracy),
            ("flexible_slot_accuracy", report.flexible_slot_accuracy),
            ("joint_accuracy", report.joint_accuracy),
            ("slot_accuracy", report.slot_accuracy),
        ];
        debug_assert_eq!(metrics.len(), REPORT_METRICS);
        for (metric, value) in metrics {
            out.push_str(&format!("{cell},{metric},{value},{},all\n", report.n_examples));
            rows += 1;
        }
        for (k, value) in &report.per_stratum {
            out.push_str(&format!(
                "{cell},full_accuracy,{value},{},{k}\n",
                report.n_examples
            ));
            rows += 1;
        }
    }
    out.push_str(&reference_footer());

    let path = env.out.join("grid_report.csv");
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &out).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, &path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    println!(
        "report: {} cells, {rows} data rows -> {}",
        cells.len(),
        path.display()
    );
    Ok(())
}
