//! Command-line surface: dataset generation, training, evaluation, and β sweeps,
//! plus the library pipeline those commands share.

mod args;
mod sweep;

use std::collections::HashMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use args::{run, Cli, Command};
pub use sweep::{aggregate, aggregate_header, run_sweep, sweep_threads, AggregateRow, SweepCell, SweepResult, SweepRow, SweepSpec};

use crate::aggregation::Strategy;
use crate::autodiff::AdamConfig;
use crate::data::{generate_synthetic, load_dataset, write_dataset, FeatureStats, MultimodalDataset, SyntheticConfig};
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::eval::{
    coherence_matrix, fit_coherence_classifier, latent_accuracy, offdiag_mean, reconstruction_error, CoherenceClassifier,
    CoherenceTraining, RunMetrics,
};
use crate::model::{Checkpoint, LikelihoodFamily, ModelConfig, MultimodalModel};
use crate::train::{train, TraceEntry, TrainConfig, TrainOutcome};

pub const TRAIN_FILE: &str = "train.mmds";
pub const TEST_FILE: &str = "test.mmds";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.mmck";
pub const METRICS_FILE: &str = "metrics.json";
/// Coherence classifiers are trained with this seed regardless of the run seed, so
/// every run on one dataset shares them.
pub const CLASSIFIER_SEED: u64 = 0;

/// Process exit code for an error: 2 for configuration and validation problems,
/// 3 for runtime and numeric failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Validation(_) | Error::Format { .. } | Error::Json(_) | Error::Contract(_) => 2,
        Error::Numeric(_) | Error::Io(_) | Error::Csv(_) => 3,
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding `train.mmds` and `test.mmds`; when absent `synthetic` is generated in memory.
    pub data: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Z-score features with training-split statistics before training and evaluation.
    pub standardize: bool,
    pub strategy: Strategy,
    pub beta: f64,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub likelihood: LikelihoodFamily,
    pub likelihood_scale: f64,
    pub poe_prior_expert: bool,
    pub stop_prior_gradient: bool,
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    pub log_every: usize,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            synthetic: SyntheticConfig::default(),
            standardize: true,
            strategy: Strategy::Mmvm,
            beta: t.beta,
            latent_dim: 2,
            hidden: vec![64, 64],
            likelihood: LikelihoodFamily::GaussianFixedScale,
            likelihood_scale: 1.0,
            poe_prior_expert: true,
            stop_prior_gradient: false,
            epochs: t.epochs,
            batch_size: t.batch_size,
            adam: t.adam,
            seed: 0,
            log_every: t.log_every,
            out: None,
        }
    }
}

impl RunConfig {
    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { epochs: self.epochs, batch_size: self.batch_size, beta: self.beta, adam: self.adam, log_every: self.log_every }
    }

    pub fn model_config(&self, input_dims: Vec<usize>) -> ModelConfig {
        let m = input_dims.len();
        let mut c = ModelConfig::new(input_dims, self.strategy);
        c.latent_dim = self.latent_dim;
        c.hidden = self.hidden.clone();
        c.likelihood = vec![self.likelihood; m];
        c.likelihood_scale = self.likelihood_scale;
        c.poe_prior_expert = self.poe_prior_expert;
        c.stop_prior_gradient = self.stop_prior_gradient;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        if self.data.is_none() {
            self.synthetic.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        self.model_config(vec![1; 2]).validate().map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }
}

/// Train/test splits as fed to the model, with the hash of the raw splits.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: MultimodalDataset,
    pub test: MultimodalDataset,
    pub stats: Option<FeatureStats>,
    /// Hex SHA-256 of the serialized raw train and test splits.
    pub hash: String,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn dataset_hash(train: &MultimodalDataset, test: &MultimodalDataset) -> Result<String> {
    let mut h = Sha256::new();
    h.update(write_dataset(train)?);
    h.update(write_dataset(test)?);
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

pub fn load_split_dir(dir: &Path) -> Result<(MultimodalDataset, MultimodalDataset)> {
    let train = load_dataset(&dir.join(TRAIN_FILE))?;
    let test = load_dataset(&dir.join(TEST_FILE))?;
    if train.dims != test.dims || train.classes != test.classes {
        return Err(Error::Validation(format!(
            "train split has dims {:?} and {} classes, test split has dims {:?} and {} classes",
            train.dims, train.classes, test.dims, test.classes
        )));
    }
    Ok((train, test))
}

/// Raw splits named by `cfg`: loaded from `cfg.data` or generated from `cfg.synthetic`.
pub fn load_data(cfg: &RunConfig) -> Result<(MultimodalDataset, MultimodalDataset)> {
    match &cfg.data {
        Some(dir) => load_split_dir(dir),
        None => generate_synthetic(&cfg.synthetic),
    }
}

pub fn prepare_data(train: MultimodalDataset, test: MultimodalDataset, standardize: bool) -> Result<PreparedData> {
    let hash = dataset_hash(&train, &test)?;
    if !standardize {
        return Ok(PreparedData { train, test, stats: None, hash });
    }
    let stats = FeatureStats::fit(&train);
    Ok(PreparedData { train: stats.apply(&train)?, test: stats.apply(&test)?, stats: Some(stats), hash })
}

/// Initializes from `split("init")` of the run seed and trains with `split("train")`.
pub fn train_run(cfg: &RunConfig, data: &PreparedData) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let model = MultimodalModel::init(cfg.model_config(data.train.dims.clone()), &root.split("init"))?;
    train(model, &data.train, &cfg.train_config(), root.split("train"))
}

pub fn checkpoint_for(cfg: &RunConfig, outcome: &TrainOutcome) -> Checkpoint {
    let mut ckpt = Checkpoint::new(outcome.model.clone(), cfg.beta, cfg.seed, outcome.epochs_completed as u64, outcome.rng.state());
    ckpt.header.run_config = Some(cfg.to_json());
    ckpt
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalOptions {
    /// Decode posterior means instead of samples for coherence and reconstruction.
    pub deterministic: bool,
    pub seed: u64,
}

/// Latent accuracy, coherence matrix, and reconstruction error of a trained model.
pub fn evaluate_run(
    model: &MultimodalModel,
    cfg: &RunConfig,
    epoch: usize,
    trace: Vec<TraceEntry>,
    data: &PreparedData,
    classifier: &CoherenceClassifier,
    opts: EvalOptions,
) -> Result<RunMetrics> {
    let rng = RngStream::new(opts.seed).split("eval");
    let latent_acc = latent_accuracy(model, &data.train, &data.test, opts.seed)?;
    let coherence = coherence_matrix(model, &data.test, classifier, opts.deterministic, &rng.split("coherence"))?;
    let recon_rng = rng.split("recon");
    let recon = reconstruction_error(model, &data.test, (!opts.deterministic).then_some(&recon_rng))?;
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert("dataset_sha256".into(), data.hash.clone());
    metadata.insert("eval_seed".into(), opts.seed.to_string());
    metadata.insert("deterministic".into(), opts.deterministic.to_string());
    Ok(RunMetrics {
        strategy: model.config.strategy,
        beta: cfg.beta,
        seed: cfg.seed,
        epoch,
        recon,
        latent_acc_mean: latent_acc.iter().sum::<f64>() / latent_acc.len() as f64,
        latent_acc,
        coherence_offdiag_mean: offdiag_mean(&coherence),
        coherence,
        coherence_valid: classifier.is_valid(),
        objective_trace: trace,
        config: cfg.to_json(),
        metadata,
    })
}

/// Coherence classifiers keyed by dataset hash, preprocessing, and training budget;
/// kept in memory and, with a directory, as JSON files.
#[derive(Debug, Default)]
pub struct ClassifierCache {
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, CoherenceClassifier>>,
}

impl ClassifierCache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Self { dir, memory: Mutex::new(HashMap::new()) }
    }

    pub fn key(data: &PreparedData, training: &CoherenceTraining) -> String {
        let desc = serde_json::json!({
            "dataset": data.hash,
            "standardized": data.stats.is_some(),
            "training": training,
            "seed": CLASSIFIER_SEED,
        });
        sha256_hex(desc.to_string().as_bytes())
    }

    pub fn path_for(&self, key: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("coherence-{}.json", &key[..16])))
    }

    pub fn get_or_fit(&self, data: &PreparedData, training: &CoherenceTraining) -> Result<CoherenceClassifier> {
        let key = Self::key(data, training);
        if let Some(c) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(c.clone());
        }
        let path = self.path_for(&key);
        let clf = match path.as_ref().filter(|p| p.exists()) {
            Some(p) => serde_json::from_slice(&fs::read(p)?)?,
            None => {
                let clf = fit_coherence_classifier(&data.train, &data.test, training, CLASSIFIER_SEED)?;
                if let Some(p) = &path {
                    if let Some(parent) = p.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    fs::write(p, serde_json::to_vec(&clf)?)?;
                }
                clf
            }
        };
        self.memory.lock().expect("cache lock").insert(key, clf.clone());
        Ok(clf)
    }
}

pub fn csv_header_with_status(modalities: usize) -> Vec<String> {
    let mut h = RunMetrics::csv_header(modalities);
    h.push("status".into());
    h
}

/// Appends rows to `path`, writing the header for a new file and refusing files whose
/// header differs.
pub fn append_csv(path: &Path, header: &[String], rows: &[Vec<String>]) -> Result<()> {
    let existing = if path.exists() { fs::read_to_string(path)? } else { String::new() };
    let mut wtr = csv::WriterBuilder::new().from_writer(Vec::new());
    if existing.is_empty() {
        wtr.write_record(header)?;
    } else {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(existing.as_bytes());
        let first: Vec<String> = match rdr.records().next() {
            Some(r) => r?.iter().map(str::to_string).collect(),
            None => Vec::new(),
        };
        if first != header {
            return Err(Error::Validation(format!("{} has columns {:?}, expected {:?}", path.display(), first, header)));
        }
    }
    for r in rows {
        wtr.write_record(r)?;
    }
    let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes)?;
    Ok(())
}

/// What `train` writes to `metrics.json` before evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub status: String,
    pub dataset_sha256: String,
    pub epochs_completed: usize,
    pub config: RunConfig,
    pub objective_trace: Vec<TraceEntry>,
}

pub fn status_of(outcome: &TrainOutcome) -> String {
    match &outcome.diverged {
        None => "ok".into(),
        Some(msg) => format!("diverged: {msg}"),
    }
}

#[cfg(test)]
mod tests;
