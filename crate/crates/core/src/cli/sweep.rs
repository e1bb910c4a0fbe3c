use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    append_csv, checkpoint_for, csv_header_with_status, load_data, prepare_data, status_of, train_run, write_json, ClassifierCache,
    EvalOptions, PreparedData, RunConfig, TrainReport, CHECKPOINT_FILE, METRICS_FILE,
};
use crate::aggregation::Strategy;
use crate::error::{Error, Result};
use crate::eval::{CoherenceClassifier, CoherenceTraining, RunMetrics};
use crate::model::save_checkpoint;

pub const RUNS_CSV: &str = "runs.csv";
pub const AGGREGATE_CSV: &str = "aggregate.csv";

/// Strategies × β values × seeds applied on top of a base run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub base: RunConfig,
    pub strategies: Vec<Strategy>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub deterministic_eval: bool,
    pub classifier: CoherenceTraining,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            base: RunConfig::default(),
            strategies: Strategy::ALL.to_vec(),
            betas: vec![2f64.powi(-8), 2f64.powi(-5), 2f64.powi(-3), 2f64.powi(-1), 2.0, 8.0],
            seeds: vec![0, 1, 2],
            deterministic_eval: false,
            classifier: CoherenceTraining::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
}

impl SweepCell {
    pub fn dir_name(&self) -> String {
        format!("{}_beta{}_seed{}", self.strategy, self.beta, self.seed)
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.strategies.is_empty() || self.betas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one strategy, β value, and seed".into()));
        }
        for &beta in &self.betas {
            RunConfig { beta, ..self.base.clone() }.validate()?;
        }
        Ok(())
    }

    /// Strategy-major, then β, then seed, each in declared order.
    pub fn cells(&self) -> Vec<SweepCell> {
        let mut out = Vec::with_capacity(self.strategies.len() * self.betas.len() * self.seeds.len());
        for &strategy in &self.strategies {
            for &beta in &self.betas {
                for &seed in &self.seeds {
                    out.push(SweepCell { strategy, beta, seed });
                }
            }
        }
        out
    }

    pub fn cell_config(&self, cell: &SweepCell) -> RunConfig {
        RunConfig { strategy: cell.strategy, beta: cell.beta, seed: cell.seed, ..self.base.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: SweepCell,
    /// `ok`, `diverged: …`, or `failed: …`.
    pub status: String,
    pub metrics: Option<RunMetrics>,
}

impl SweepRow {
    pub fn csv_row(&self, modalities: usize) -> Vec<String> {
        let mut r = match &self.metrics {
            Some(m) => m.csv_row(),
            None => {
                let mut r = vec![self.cell.strategy.to_string(), self.cell.beta.to_string(), self.cell.seed.to_string()];
                r.resize(RunMetrics::csv_header(modalities).len(), String::new());
                r
            }
        };
        r.push(self.status.clone());
        r
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub strategy: Strategy,
    pub beta: f64,
    /// Cells with status `ok`; only those enter the statistics.
    pub runs: usize,
    pub failed: usize,
    pub mean: Vec<f64>,
    /// Sample standard deviation; 0 for a single run.
    pub std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub modalities: usize,
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<AggregateRow>,
}

impl SweepResult {
    pub fn runs_csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        (csv_header_with_status(self.modalities), self.rows.iter().map(|r| r.csv_row(self.modalities)).collect())
    }

    pub fn aggregate_csv(&self) -> (Vec<String>, Vec<Vec<String>>) {
        let rows = self
            .aggregate
            .iter()
            .map(|a| {
                let mut r = vec![a.strategy.to_string(), a.beta.to_string(), a.runs.to_string(), a.failed.to_string()];
                for (m, s) in a.mean.iter().zip(&a.std) {
                    r.push(m.to_string());
                    r.push(s.to_string());
                }
                r
            })
            .collect();
        (aggregate_header(self.modalities), rows)
    }
}

/// Numeric per-run columns that are averaged across seeds.
fn numeric_columns(modalities: usize) -> Vec<String> {
    RunMetrics::csv_header(modalities).into_iter().skip(4).collect()
}

pub fn aggregate_header(modalities: usize) -> Vec<String> {
    let mut h: Vec<String> = ["strategy", "beta", "runs", "failed"].iter().map(|s| s.to_string()).collect();
    for c in numeric_columns(modalities) {
        h.push(format!("{c}_mean"));
        h.push(format!("{c}_std"));
    }
    h
}

/// Per-(strategy, β) means and sample standard deviations over successful seeds, in
/// first-appearance order.
pub fn aggregate(rows: &[SweepRow], modalities: usize) -> Vec<AggregateRow> {
    let width = numeric_columns(modalities).len();
    let mut groups: Vec<(SweepCell, Vec<Vec<f64>>, usize)> = Vec::new();
    for row in rows {
        let idx = match groups.iter().position(|(c, _, _)| c.strategy == row.cell.strategy && c.beta == row.cell.beta) {
            Some(i) => i,
            None => {
                groups.push((row.cell, Vec::new(), 0));
                groups.len() - 1
            }
        };
        match (&row.metrics, row.status == "ok") {
            (Some(m), true) => groups[idx].1.push(m.csv_row().iter().skip(4).map(|v| v.parse().unwrap_or(f64::NAN)).collect()),
            _ => groups[idx].2 += 1,
        }
    }
    groups
        .into_iter()
        .map(|(cell, values, failed)| {
            let n = values.len();
            let mut mean = vec![f64::NAN; width];
            let mut std = vec![f64::NAN; width];
            if n > 0 {
                for j in 0..width {
                    let mu = values.iter().map(|v| v[j]).sum::<f64>() / n as f64;
                    mean[j] = mu;
                    std[j] = if n > 1 {
                        (values.iter().map(|v| (v[j] - mu).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                    } else {
                        0.0
                    };
                }
            }
            AggregateRow { strategy: cell.strategy, beta: cell.beta, runs: n, failed, mean, std }
        })
        .collect()
}

fn run_cell(
    spec: &SweepSpec,
    cell: &SweepCell,
    data: &PreparedData,
    classifier: &CoherenceClassifier,
    out_dir: Option<&Path>,
) -> Result<(String, RunMetrics)> {
    let cfg = spec.cell_config(cell);
    let outcome = train_run(&cfg, data)?;
    let status = status_of(&outcome);
    let opts = EvalOptions { deterministic: spec.deterministic_eval, seed: cfg.seed };
    let mut metrics =
        super::evaluate_run(&outcome.model, &cfg, outcome.epochs_completed, outcome.trace.clone(), data, classifier, opts)?;
    metrics.metadata.insert("status".into(), status.clone());
    if let Some(dir) = out_dir {
        let cell_dir = dir.join("cells").join(cell.dir_name());
        fs::create_dir_all(&cell_dir)?;
        save_checkpoint(&checkpoint_for(&cfg, &outcome), &cell_dir.join(CHECKPOINT_FILE))?;
        write_json(&cell_dir.join(METRICS_FILE), &metrics)?;
        let report = TrainReport {
            status: status.clone(),
            dataset_sha256: data.hash.clone(),
            epochs_completed: outcome.epochs_completed,
            config: cfg,
            objective_trace: outcome.trace,
        };
        write_json(&cell_dir.join("train.json"), &report)?;
    }
    Ok((status, metrics))
}

/// Threads for sweep cells: `MMVAE_THREADS` when set to a positive integer, otherwise
/// the available parallelism.
pub fn sweep_threads() -> usize {
    std::env::var("MMVAE_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Trains and evaluates every cell. A failing cell is recorded with its status and the
/// sweep moves on. With `out_dir`, per-cell artifacts plus `runs.csv` and
/// `aggregate.csv` are written there; rows are appended in cell order by this thread.
pub fn run_sweep(spec: &SweepSpec, out_dir: Option<&Path>, cache: &ClassifierCache, threads: usize) -> Result<SweepResult> {
    spec.validate()?;
    let (train, test) = load_data(&spec.base)?;
    let data = prepare_data(train, test, spec.base.standardize)?;
    let classifier = cache.get_or_fit(&data, &spec.classifier)?;
    classifier.validate()?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("sweep.json"), spec)?;
    }
    let cells = spec.cells();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<(String, RunMetrics)>> =
        pool.install(|| cells.par_iter().map(|cell| run_cell(spec, cell, &data, &classifier, out_dir)).collect());
    let rows: Vec<SweepRow> = cells
        .iter()
        .zip(results)
        .map(|(cell, r)| match r {
            Ok((status, metrics)) => SweepRow { cell: *cell, status, metrics: Some(metrics) },
            Err(e) => SweepRow { cell: *cell, status: format!("failed: {e}"), metrics: None },
        })
        .collect();
    let modalities = data.train.num_modalities();
    let result = SweepResult { modalities, aggregate: aggregate(&rows, modalities), rows };
    if let Some(dir) = out_dir {
        let (h, r) = result.runs_csv();
        append_csv(&dir.join(RUNS_CSV), &h, &r)?;
        let (h, r) = result.aggregate_csv();
        let path = dir.join(AGGREGATE_CSV);
        if path.exists() {
            fs::remove_file(&path)?;
        }
        append_csv(&path, &h, &r)?;
    }
    Ok(result)
}
