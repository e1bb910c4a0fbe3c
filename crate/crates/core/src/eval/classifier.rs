use serde::{Deserialize, Serialize};

use crate::autodiff::mlp::LayerSpec;
use crate::autodiff::{apply_mlp, forward_mlp, init_mlp, Activation, AdamConfig, AdamState, Matrix, ParameterSet, Tape};
use crate::data::MultimodalDataset;
use crate::distributions::RngStream;
use crate::error::{Error, Result};

pub const LINEAR_STEPS: usize = 2000;
pub const LINEAR_LR: f64 = 0.1;
pub const MAX_PROBE_POINTS: usize = 10_000;
pub const COHERENCE_MIN_ACCURACY: f64 = 0.98;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len() as f64
}

fn check_labels(labels: &[usize], classes: usize, rows: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(Error::Contract(format!("{} labels for {rows} rows", labels.len())));
    }
    if let Some(i) = labels.iter().position(|&l| l >= classes) {
        return Err(Error::Validation(format!("row {i}: label {} outside [0, {classes})", labels[i])));
    }
    let first = labels.first().copied();
    if labels.iter().all(|&l| Some(l) == first) {
        return Err(Error::Validation("classifier needs at least two distinct labels".into()));
    }
    Ok(())
}

/// Per-column mean and population stddev (1 where a column is constant).
fn column_stats(x: &Matrix) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = x.shape();
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v / n as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in 0..n {
        for j in 0..d {
            var[j] += (x.get(r, j) - mean[j]).powi(2) / n as f64;
        }
    }
    let std = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
    (mean, std)
}

fn standardize(x: &Matrix, mean: &[f64], std: &[f64]) -> Matrix {
    let (n, d) = x.shape();
    let mut out = x.clone();
    for r in 0..n {
        for j in 0..d {
            out.set(r, j, (x.get(r, j) - mean[j]) / std[j]);
        }
    }
    out
}

/// Multinomial logistic regression on standardized features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `d × C`.
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub steps: usize,
    pub lr: f64,
}

impl LinearClassifier {
    pub fn classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, x: &Matrix) -> Matrix {
        let mut z = standardize(x, &self.feature_mean, &self.feature_std).matmul(&self.weights);
        let c = self.classes();
        for row in z.data_mut().chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        z
    }

    pub fn predict(&self, x: &Matrix) -> Vec<usize> {
        let z = self.logits(x);
        (0..z.rows()).map(|r| argmax(z.row(r))).collect()
    }

    pub fn accuracy(&self, x: &Matrix, labels: &[usize]) -> f64 {
        accuracy(&self.predict(x), labels)
    }
}

/// Full-batch gradient descent with the default budget (2000 steps, lr 0.1). More than
/// 10000 rows are subsampled without replacement using `seed`.
pub fn fit_linear_classifier(x: &Matrix, labels: &[usize], classes: usize, seed: u64) -> Result<LinearClassifier> {
    fit_linear_classifier_with(x, labels, classes, seed, LINEAR_STEPS, LINEAR_LR)
}

pub fn fit_linear_classifier_with(
    x: &Matrix,
    labels: &[usize],
    classes: usize,
    seed: u64,
    steps: usize,
    lr: f64,
) -> Result<LinearClassifier> {
    check_labels(labels, classes, x.rows())?;
    let (x, labels) = if x.rows() > MAX_PROBE_POINTS {
        let mut idx = RngStream::new(seed).split("probe-subsample").permutation(x.rows());
        idx.truncate(MAX_PROBE_POINTS);
        idx.sort_unstable();
        (x.select_rows(&idx), idx.iter().map(|&i| labels[i]).collect::<Vec<_>>())
    } else {
        (x.clone(), labels.to_vec())
    };
    let (n, d) = x.shape();
    let (mean, std) = column_stats(&x);
    let xs = standardize(&x, &mean, &std);
    let mut clf = LinearClassifier {
        weights: Matrix::zeros(d, classes),
        bias: vec![0.0; classes],
        feature_mean: mean,
        feature_std: std,
        steps,
        lr,
    };
    for _ in 0..steps {
        let mut z = xs.matmul(&clf.weights);
        for (r, row) in z.data_mut().chunks_mut(classes).enumerate() {
            for (v, b) in row.iter_mut().zip(&clf.bias) {
                *v += b;
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
            row[labels[r]] -= 1.0;
        }
        // z now holds softmax − onehot
        let gw = xs.t_matmul(&z);
        for (w, g) in clf.weights.data_mut().iter_mut().zip(gw.data()) {
            *w -= lr * g / n as f64;
        }
        for c in 0..classes {
            let g: f64 = (0..n).map(|r| z.get(r, c)).sum::<f64>() / n as f64;
            clf.bias[c] -= lr * g;
        }
    }
    Ok(clf)
}

/// Per-modality MLP classifiers on raw features, used to score generated samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherenceClassifier {
    pub params: ParameterSet,
    pub specs: Vec<LayerSpec>,
    pub feature_mean: Vec<Vec<f64>>,
    pub feature_std: Vec<Vec<f64>>,
    pub train_accuracy: Vec<f64>,
    /// Accuracy on held-out original samples, one per modality.
    pub test_accuracy: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CoherenceTraining {
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for CoherenceTraining {
    fn default() -> Self {
        Self { hidden: 128, epochs: 30, batch_size: 100, lr: 1e-3 }
    }
}

fn clf_prefix(m: usize) -> String {
    format!("clf{m}")
}

impl CoherenceClassifier {
    pub fn num_modalities(&self) -> usize {
        self.specs.len()
    }

    pub fn predict(&self, m: usize, x: &Matrix) -> Result<Vec<usize>> {
        if m >= self.num_modalities() {
            return Err(Error::Contract(format!("no classifier for modality {m}")));
        }
        let xs = standardize(x, &self.feature_mean[m], &self.feature_std[m]);
        let z = apply_mlp(&self.params, &clf_prefix(m), &xs, &self.specs[m])?;
        Ok((0..z.rows()).map(|r| argmax(z.row(r))).collect())
    }

    /// Refuses classifiers whose held-out accuracy on original data is below 98%.
    pub fn validate(&self) -> Result<()> {
        for (m, &acc) in self.test_accuracy.iter().enumerate() {
            if acc < COHERENCE_MIN_ACCURACY {
                return Err(Error::Validation(format!(
                    "coherence classifier for modality {m} reaches {acc:.4} on original test data, below {COHERENCE_MIN_ACCURACY}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_valid(&self) -> bool {
        self.validate().is_ok()
    }
}

/// Trains one two-hidden-layer ReLU MLP per modality with Adam and softmax cross-entropy.
pub fn fit_coherence_classifier(
    train: &MultimodalDataset,
    test: &MultimodalDataset,
    cfg: &CoherenceTraining,
    seed: u64,
) -> Result<CoherenceClassifier> {
    let labels = train.labels_usize();
    check_labels(&labels, train.classes, train.len())?;
    let rng = RngStream::new(seed).split("coherence-classifier");
    let c = train.classes;
    let mut params = ParameterSet::new();
    let mut specs = Vec::new();
    let (mut means, mut stds) = (Vec::new(), Vec::new());
    for m in 0..train.num_modalities() {
        let spec = LayerSpec::new(vec![train.dims[m], cfg.hidden, cfg.hidden, c], Activation::Relu);
        init_mlp(&mut params, &clf_prefix(m), &spec, &mut rng.split_idx("init", m))?;
        let (mean, std) = column_stats(&train.modality_matrix(m));
        specs.push(spec);
        means.push(mean);
        stds.push(std);
    }
    for m in 0..train.num_modalities() {
        let prefix = clf_prefix(m);
        let mut local = params.subset(&format!("{prefix}."));
        let mut adam = AdamState::new(&local, AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        let x = standardize(&train.modality_matrix(m), &means[m], &stds[m]);
        let mut order_rng = rng.split_idx("order", m);
        for _ in 0..cfg.epochs {
            let order = order_rng.permutation(train.len());
            for idx in order.chunks(cfg.batch_size) {
                let mut onehot = Matrix::zeros(idx.len(), c);
                for (r, &i) in idx.iter().enumerate() {
                    onehot.set(r, labels[i], 1.0);
                }
                let mut tape = Tape::new();
                let vars = tape.params(&local);
                let xb = tape.constant(x.select_rows(idx));
                let logits = forward_mlp(&mut tape, &vars, &prefix, xb, &specs[m])?;
                let lse = tape.logsumexp_rows(logits);
                let y = tape.constant(onehot);
                let picked = tape.mul(logits, y);
                let picked = tape.row_sum(picked);
                let nll = tape.sub(lse, picked);
                let loss = tape.mean(nll);
                let grads = tape.backward(loss)?;
                adam.step(&mut local, &grads.by_name())?;
            }
        }
        for (name, value) in local.iter() {
            params.set(name, value.clone())?;
        }
    }
    let mut clf = CoherenceClassifier {
        params,
        specs,
        feature_mean: means,
        feature_std: stds,
        train_accuracy: Vec::new(),
        test_accuracy: Vec::new(),
    };
    let test_labels = test.labels_usize();
    for m in 0..train.num_modalities() {
        let tr = accuracy(&clf.predict(m, &train.modality_matrix(m))?, &labels);
        let te = accuracy(&clf.predict(m, &test.modality_matrix(m))?, &test_labels);
        clf.train_accuracy.push(tr);
        clf.test_accuracy.push(te);
    }
    Ok(clf)
}
