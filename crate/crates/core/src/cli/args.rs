use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use super::{
    append_csv, checkpoint_for, csv_header_with_status, evaluate_run, load_data, load_split_dir, prepare_data, run_sweep, sha256_hex,
    status_of, sweep_threads, train_run, write_json, ClassifierCache, EvalOptions, RunConfig, SweepSpec, TrainReport,
    CHECKPOINT_FILE, MANIFEST_FILE, METRICS_FILE, TEST_FILE, TRAIN_FILE,
};
use crate::aggregation::Strategy;
use crate::data::{generate_synthetic, save_dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::eval::{CoherenceTraining, RunMetrics};
use crate::model::{load_checkpoint, save_checkpoint};
use crate::train::TraceEntry;

#[derive(Debug, Parser)]
#[command(name = "mmvm", version, about = "Multimodal VAEs with a mixture-of-experts prior")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset (train.mmds, test.mmds, manifest.json).
    GenData(GenDataArgs),
    /// Train one model; writes checkpoint.mmck and metrics.json.
    Train(TrainArgs),
    /// Evaluate a checkpoint and append a CSV row.
    Eval(EvalArgs),
    /// Train and evaluate strategies × β values × seeds.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// JSON file with synthetic dataset settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub modalities: Option<usize>,
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
    /// Comma-separated feature dimension per modality.
    #[arg(long, value_delimiter = ',')]
    pub dims: Option<Vec<usize>>,
    #[arg(long)]
    pub class_scale: Option<f64>,
    #[arg(long)]
    pub style_scale: Option<f64>,
    #[arg(long)]
    pub noise_std: Option<f64>,
}

/// Flags that override fields of a run configuration file.
#[derive(Debug, Args, Default)]
pub struct RunOverrides {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory with train.mmds and test.mmds.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub strategy: Option<Strategy>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub latent_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    pub hidden: Option<Vec<usize>>,
    #[arg(long)]
    pub log_every: Option<usize>,
    /// Train on raw features instead of z-scored ones.
    #[arg(long)]
    pub no_standardize: bool,
    #[arg(long)]
    pub stop_prior_gradient: bool,
}

impl RunOverrides {
    pub fn apply(&self, mut cfg: RunConfig) -> RunConfig {
        if let Some(v) = &self.data {
            cfg.data = Some(v.clone());
        }
        if let Some(v) = self.strategy {
            cfg.strategy = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.adam.lr = v;
        }
        if let Some(v) = self.latent_dim {
            cfg.latent_dim = v;
        }
        if let Some(v) = &self.hidden {
            cfg.hidden = v.clone();
        }
        if let Some(v) = self.log_every {
            cfg.log_every = v;
        }
        if self.no_standardize {
            cfg.standardize = false;
        }
        if self.stop_prior_gradient {
            cfg.stop_prior_gradient = true;
        }
        cfg
    }

    fn load(&self) -> Result<RunConfig> {
        let base = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => RunConfig::default(),
        };
        Ok(self.apply(base))
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunOverrides,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory; defaults to the one recorded in the checkpoint.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// CSV file the result row is appended to.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    /// Decode posterior means instead of samples.
    #[arg(long)]
    pub deterministic: bool,
    /// Evaluation seed; defaults to the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Directory for cached coherence classifiers; defaults to `<data>/classifiers`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Metrics JSON to write or update; defaults to metrics.json beside the checkpoint.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// JSON sweep specification.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<Strategy>>,
    #[arg(long, value_delimiter = ',')]
    pub betas: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub deterministic: bool,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
}

/// Runs a parsed command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let result = match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train_cmd(&a),
        Command::Eval(a) => eval_cmd(&a),
        Command::Sweep(a) => sweep_cmd(&a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            super::exit_code(&e)
        }
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<SyntheticConfig>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.modalities {
        cfg.modalities = v;
        if a.dims.is_none() && a.config.is_none() {
            cfg.dims = vec![cfg.dims[0]; v];
        }
    }
    if let Some(v) = a.classes {
        cfg.classes = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = &a.dims {
        cfg.dims = v.clone();
    }
    if let Some(v) = a.class_scale {
        cfg.class_scale = v;
    }
    if let Some(v) = a.style_scale {
        cfg.style_scale = v;
    }
    if let Some(v) = a.noise_std {
        cfg.noise_std = v;
    }
    let (train, test) = generate_synthetic(&cfg)?;
    fs::create_dir_all(&a.out)?;
    save_dataset(&train, &a.out.join(TRAIN_FILE))?;
    save_dataset(&test, &a.out.join(TEST_FILE))?;
    let manifest = serde_json::json!({
        "config": cfg,
        "files": {
            TRAIN_FILE: sha256_hex(&fs::read(a.out.join(TRAIN_FILE))?),
            TEST_FILE: sha256_hex(&fs::read(a.out.join(TEST_FILE))?),
        },
        "dataset_sha256": super::dataset_hash(&train, &test)?,
    });
    write_json(&a.out.join(MANIFEST_FILE), &manifest)?;
    println!("wrote {} train and {} test samples to {}", train.len(), test.len(), a.out.display());
    Ok(())
}

fn train_cmd(a: &TrainArgs) -> Result<()> {
    let mut cfg = a.run.load()?;
    if let Some(out) = &a.out {
        cfg.out = Some(out.clone());
    }
    let out = cfg.out.clone().ok_or_else(|| Error::Config("no output directory: pass --out or set \"out\"".into()))?;
    cfg.validate()?;
    let (train, test) = load_data(&cfg)?;
    let data = prepare_data(train, test, cfg.standardize)?;
    let outcome = train_run(&cfg, &data)?;
    for e in &outcome.trace {
        let o = &e.objective;
        println!("epoch {:>4} step {:>6} total {:.4} recon {:.4} rate {:.4}", e.epoch, e.step, o.total, o.recon_sum(), o.rate);
    }
    fs::create_dir_all(&out)?;
    save_checkpoint(&checkpoint_for(&cfg, &outcome), &out.join(CHECKPOINT_FILE))?;
    let report = TrainReport {
        status: status_of(&outcome),
        dataset_sha256: data.hash.clone(),
        epochs_completed: outcome.epochs_completed,
        config: cfg,
        objective_trace: outcome.trace,
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    match outcome.diverged {
        Some(msg) => Err(Error::Numeric(format!(
            "training diverged after {} epochs ({msg}); last finite state saved to {}",
            outcome.epochs_completed,
            out.display()
        ))),
        None => Ok(()),
    }
}

fn previous_trace(path: &Path) -> Vec<TraceEntry> {
    fs::read(path)
        .ok()
        .and_then(|b| serde_json::from_slice::<serde_json::Value>(&b).ok())
        .and_then(|v| v.get("objective_trace").cloned())
        .and_then(|t| serde_json::from_value(t).ok())
        .unwrap_or_default()
}

fn eval_cmd(a: &EvalArgs) -> Result<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let mut cfg: RunConfig = match &ckpt.header.run_config {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("checkpoint run config: {e}")))?,
        None => RunConfig {
            strategy: ckpt.header.strategy,
            beta: ckpt.header.beta,
            seed: ckpt.header.seed,
            ..RunConfig::default()
        },
    };
    if let Some(d) = &a.data {
        cfg.data = Some(d.clone());
    }
    let (train, test) = match &cfg.data {
        Some(dir) => load_split_dir(dir)?,
        None => load_data(&cfg)?,
    };
    let model = &ckpt.model;
    if model.config.input_dims != train.dims {
        return Err(Error::Validation(format!(
            "checkpoint expects modality dims {:?} (latent dim {}), dataset has dims {:?}",
            model.config.input_dims, model.config.latent_dim, train.dims
        )));
    }
    let data = prepare_data(train, test, cfg.standardize)?;
    let cache_dir = a.cache_dir.clone().or_else(|| cfg.data.as_ref().map(|d| d.join("classifiers")));
    let cache = ClassifierCache::new(cache_dir);
    let classifier = cache.get_or_fit(&data, &CoherenceTraining::default())?;
    let metrics_path = a
        .metrics
        .clone()
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join(METRICS_FILE));
    let opts = EvalOptions { deterministic: a.deterministic, seed: a.seed.unwrap_or(cfg.seed) };
    let mut metrics = evaluate_run(
        model,
        &cfg,
        ckpt.header.epoch as usize,
        previous_trace(&metrics_path),
        &data,
        &classifier,
        opts,
    )?;
    metrics.metadata.insert("status".into(), "ok".into());
    write_json(&metrics_path, &metrics)?;
    print_summary(&metrics);
    if let Some(csv) = &a.csv {
        let mut row = metrics.csv_row();
        row.push("ok".into());
        append_csv(csv, &csv_header_with_status(model.num_modalities()), &[row])?;
    }
    Ok(())
}

fn print_summary(m: &RunMetrics) {
    println!(
        "{} beta={} seed={}: recon_total={:.4} latent_acc_mean={:.4} coherence_offdiag_mean={:.4}",
        m.strategy, m.beta, m.seed, m.recon.total, m.latent_acc_mean, m.coherence_offdiag_mean
    );
}

fn sweep_cmd(a: &SweepArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str::<SweepSpec>(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => SweepSpec::default(),
    };
    if let Some(d) = &a.data {
        spec.base.data = Some(d.clone());
    }
    if let Some(v) = &a.strategies {
        spec.strategies = v.clone();
    }
    if let Some(v) = &a.betas {
        spec.betas = v.clone();
    }
    if let Some(v) = &a.seeds {
        spec.seeds = v.clone();
    }
    if let Some(v) = a.epochs {
        spec.base.epochs = v;
    }
    if a.deterministic {
        spec.deterministic_eval = true;
    }
    let cache_dir = a.cache_dir.clone().unwrap_or_else(|| a.out.join("classifiers"));
    let cache = ClassifierCache::new(Some(cache_dir));
    let result = run_sweep(&spec, Some(&a.out), &cache, sweep_threads())?;
    for row in &result.rows {
        match &row.metrics {
            Some(m) if row.status == "ok" => print_summary(m),
            _ => println!("{} beta={} seed={}: {}", row.cell.strategy, row.cell.beta, row.cell.seed, row.status),
        }
    }
    let failed = result.rows.iter().filter(|r| r.status != "ok").count();
    println!("{} runs, {failed} not ok; results in {}", result.rows.len(), a.out.display());
    Ok(())
}
