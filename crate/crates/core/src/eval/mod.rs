//! Latent linear probes, cross-modal coherence, and reconstruction error.

mod classifier;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

pub use classifier::{
    accuracy, argmax, fit_coherence_classifier, fit_linear_classifier, fit_linear_classifier_with, CoherenceClassifier,
    CoherenceTraining, LinearClassifier, COHERENCE_MIN_ACCURACY, LINEAR_LR, LINEAR_STEPS, MAX_PROBE_POINTS,
};

use crate::aggregation::Strategy;
use crate::autodiff::Matrix;
use crate::data::MultimodalDataset;
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::model::{MultimodalModel, Noise};
use crate::train::TraceEntry;

fn check_dims(model: &MultimodalModel, data: &MultimodalDataset) -> Result<()> {
    if model.config.input_dims != data.dims {
        return Err(Error::Validation(format!(
            "model expects modality dims {:?}, dataset has {:?}",
            model.config.input_dims, data.dims
        )));
    }
    Ok(())
}

/// Linear-probe accuracy per modality, fit on unimodal posterior means of the
/// training set and scored on those of the test set.
pub fn latent_accuracy(model: &MultimodalModel, train: &MultimodalDataset, test: &MultimodalDataset, seed: u64) -> Result<Vec<f64>> {
    check_dims(model, train)?;
    check_dims(model, test)?;
    let (ytr, yte) = (train.labels_usize(), test.labels_usize());
    (0..model.num_modalities())
        .map(|m| {
            let (ztr, _) = model.encode_batch(m, &train.modality_matrix(m))?;
            let (zte, _) = model.encode_batch(m, &test.modality_matrix(m))?;
            let clf = fit_linear_classifier(&ztr, &ytr, train.classes, seed)?;
            Ok(clf.accuracy(&zte, &yte))
        })
        .collect()
}

/// `[source][target]` fraction of test samples whose generation from `source` into
/// `target` is classified as the true class. With `deterministic` the posterior mean
/// is decoded; otherwise pair `(s, t)` draws noise from `rng.split_idx("pair", s·M + t)`.
pub fn coherence_matrix(
    model: &MultimodalModel,
    test: &MultimodalDataset,
    classifiers: &CoherenceClassifier,
    deterministic: bool,
    rng: &RngStream,
) -> Result<Vec<Vec<f64>>> {
    check_dims(model, test)?;
    classifiers.validate()?;
    let m_count = model.num_modalities();
    if classifiers.num_modalities() != m_count {
        return Err(Error::Validation(format!(
            "{} coherence classifiers for {m_count} modalities",
            classifiers.num_modalities()
        )));
    }
    let labels = test.labels_usize();
    let mut out = vec![vec![0.0; m_count]; m_count];
    for (s, row) in out.iter_mut().enumerate() {
        let x = test.modality_matrix(s);
        for (t, cell) in row.iter_mut().enumerate() {
            let noise = (!deterministic).then(|| rng.split_idx("pair", s * m_count + t).normal_matrix(x.rows(), model.latent_dim()));
            let generated = model.conditional_generate_batch(s, t, &x, noise.as_ref())?;
            *cell = accuracy(&classifiers.predict(t, &generated)?, &labels);
        }
    }
    Ok(out)
}

pub fn offdiag_mean(matrix: &[Vec<f64>]) -> f64 {
    let m = matrix.len();
    if m < 2 {
        return f64::NAN;
    }
    let mut s = 0.0;
    for (i, row) in matrix.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                s += v;
            }
        }
    }
    s / (m * (m - 1)) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionError {
    /// Mean over samples of `‖x_m − x̂_m‖² / D_m`.
    pub per_modality: Vec<f64>,
    pub total: f64,
}

/// Mean squared error of the strategy's reconstruction path; mixture strategies use the
/// component-averaged location. `rng = None` uses zero noise.
pub fn reconstruction_error(model: &MultimodalModel, test: &MultimodalDataset, rng: Option<&RngStream>) -> Result<ReconstructionError> {
    check_dims(model, test)?;
    let inputs = test.all();
    let noise = match rng {
        Some(r) => Noise::draw(&model.config, test.len(), r),
        None => Noise::zeros(&model.config, test.len()),
    };
    let rec = model.reconstruct_batch(&inputs, &noise)?;
    let mut per_modality = Vec::with_capacity(inputs.len());
    for (m, x) in inputs.iter().enumerate() {
        let k = rec.locations[m].len() as f64;
        let mut loc = Matrix::zeros(x.rows(), x.cols());
        for l in &rec.locations[m] {
            loc.add_assign(&l.map(|v| v / k));
        }
        let sq: f64 = x.data().iter().zip(loc.data()).map(|(a, b)| (a - b).powi(2)).sum();
        per_modality.push(sq / (x.rows() * x.cols()) as f64);
    }
    let total = per_modality.iter().sum();
    Ok(ReconstructionError { per_modality, total })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub strategy: Strategy,
    pub beta: f64,
    pub seed: u64,
    pub epoch: usize,
    pub recon: ReconstructionError,
    pub latent_acc: Vec<f64>,
    pub latent_acc_mean: f64,
    /// `[source][target]`.
    pub coherence: Vec<Vec<f64>>,
    pub coherence_offdiag_mean: f64,
    pub coherence_valid: bool,
    pub objective_trace: Vec<TraceEntry>,
    pub config: serde_json::Value,
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

impl RunMetrics {
    pub fn csv_header(modalities: usize) -> Vec<String> {
        let mut h: Vec<String> = ["strategy", "beta", "seed", "epoch", "recon_total"].iter().map(|s| s.to_string()).collect();
        h.extend((0..modalities).map(|m| format!("recon_m{m}")));
        h.push("latent_acc_mean".into());
        h.extend((0..modalities).map(|m| format!("latent_acc_m{m}")));
        h.push("coherence_offdiag_mean".into());
        for s in 0..modalities {
            h.extend((0..modalities).map(|t| format!("coherence_{s}_{t}")));
        }
        h
    }

    pub fn csv_row(&self) -> Vec<String> {
        let mut r = vec![
            self.strategy.to_string(),
            self.beta.to_string(),
            self.seed.to_string(),
            self.epoch.to_string(),
            self.recon.total.to_string(),
        ];
        r.extend(self.recon.per_modality.iter().map(f64::to_string));
        r.push(self.latent_acc_mean.to_string());
        r.extend(self.latent_acc.iter().map(f64::to_string));
        r.push(self.coherence_offdiag_mean.to_string());
        for row in &self.coherence {
            r.extend(row.iter().map(f64::to_string));
        }
        r
    }
}
