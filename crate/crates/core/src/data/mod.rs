//! Synthetic multimodal data: a shared class factor seen by every modality plus an
//! independent per-modality style factor and isotropic noise.

mod format;

use serde::{Deserialize, Serialize};

pub use format::{export_csv, load_dataset, read_dataset, save_dataset, write_dataset, DatasetHeader, DATASET_MAGIC, DATASET_VERSION};

use crate::autodiff::Matrix;
use crate::distributions::RngStream;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub modalities: usize,
    pub classes: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Feature dimension per modality.
    pub dims: Vec<usize>,
    pub class_scale: f64,
    pub style_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            modalities: 3,
            classes: 5,
            n_train: 1000,
            n_test: 500,
            dims: vec![20; 3],
            class_scale: 3.0,
            style_scale: 1.0,
            noise_std: 0.5,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Validation(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.classes > u16::MAX as usize + 1 {
            return Err(Error::Validation(format!("too many classes for u16 labels: {}", self.classes)));
        }
        if self.modalities == 0 {
            return Err(Error::Validation("need at least one modality".into()));
        }
        if self.dims.len() != self.modalities {
            return Err(Error::Validation(format!("{} dims given for {} modalities", self.dims.len(), self.modalities)));
        }
        if self.dims.contains(&0) {
            return Err(Error::Validation("modality dimensions must be positive".into()));
        }
        if !(self.class_scale > 0.0 && self.class_scale.is_finite()) {
            return Err(Error::Validation(format!("class scale must be positive, got {}", self.class_scale)));
        }
        if !(self.style_scale >= 0.0 && self.style_scale.is_finite()) {
            return Err(Error::Validation(format!("style scale must be non-negative, got {}", self.style_scale)));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Validation(format!("noise stddev must be non-negative, got {}", self.noise_std)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// Complete multimodal samples. `features[m]` holds modality `m` row-major, `n × dims[m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalDataset {
    pub dims: Vec<usize>,
    pub classes: usize,
    pub seed: u64,
    pub split: Split,
    pub features: Vec<Vec<f32>>,
    pub labels: Vec<u16>,
}

impl MultimodalDataset {
    pub fn new(dims: Vec<usize>, classes: usize, seed: u64, split: Split, features: Vec<Vec<f32>>, labels: Vec<u16>) -> Result<Self> {
        let ds = Self { dims, classes, seed, split, features, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.features.len() != self.dims.len() {
            return Err(Error::Validation(format!(
                "{} feature blocks for {} modalities",
                self.features.len(),
                self.dims.len()
            )));
        }
        let n = self.labels.len();
        for (m, (block, &d)) in self.features.iter().zip(&self.dims).enumerate() {
            if block.len() != n * d {
                return Err(Error::Validation(format!("modality {m}: {} values, expected {n}×{d}", block.len())));
            }
        }
        if let Some(row) = self.labels.iter().position(|&l| l as usize >= self.classes) {
            return Err(Error::Validation(format!(
                "row {row}: label {} outside [0, {})",
                self.labels[row], self.classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_modalities(&self) -> usize {
        self.dims.len()
    }

    pub fn row(&self, m: usize, i: usize) -> &[f32] {
        let d = self.dims[m];
        &self.features[m][i * d..(i + 1) * d]
    }

    /// Rows `idx` of modality `m`, upcast to `f64`.
    pub fn modality_rows(&self, m: usize, idx: &[usize]) -> Matrix {
        let d = self.dims[m];
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend(self.row(m, i).iter().map(|&v| v as f64));
        }
        Matrix::from_vec(idx.len(), d, data)
    }

    pub fn modality_matrix(&self, m: usize) -> Matrix {
        let d = self.dims[m];
        Matrix::from_vec(self.len(), d, self.features[m].iter().map(|&v| v as f64).collect())
    }

    /// Every modality of rows `idx`.
    pub fn batch(&self, idx: &[usize]) -> Vec<Matrix> {
        (0..self.num_modalities()).map(|m| self.modality_rows(m, idx)).collect()
    }

    pub fn all(&self) -> Vec<Matrix> {
        (0..self.num_modalities()).map(|m| self.modality_matrix(m)).collect()
    }

    pub fn labels_usize(&self) -> Vec<usize> {
        self.labels.iter().map(|&l| l as usize).collect()
    }

    /// Dataset restricted to rows `idx`, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        let features = (0..self.num_modalities())
            .map(|m| idx.iter().flat_map(|&i| self.row(m, i).iter().copied()).collect())
            .collect();
        Self {
            dims: self.dims.clone(),
            classes: self.classes,
            seed: self.seed,
            split: self.split,
            features,
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Per-modality, per-feature mean and population stddev of a reference split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
}

impl FeatureStats {
    /// Statistics of `ds`; constant features get stddev 1.
    pub fn fit(ds: &MultimodalDataset) -> Self {
        let n = ds.len() as f64;
        let mut mean = Vec::with_capacity(ds.num_modalities());
        let mut std = Vec::with_capacity(ds.num_modalities());
        for (m, &d) in ds.dims.iter().enumerate() {
            let mut mu = vec![0.0; d];
            for i in 0..ds.len() {
                for (a, &v) in mu.iter_mut().zip(ds.row(m, i)) {
                    *a += v as f64 / n;
                }
            }
            let mut var = vec![0.0; d];
            for i in 0..ds.len() {
                for (j, &v) in ds.row(m, i).iter().enumerate() {
                    var[j] += (v as f64 - mu[j]).powi(2) / n;
                }
            }
            std.push(var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect());
            mean.push(mu);
        }
        Self { mean, std }
    }

    /// `ds` with every feature z-scored by these statistics.
    pub fn apply(&self, ds: &MultimodalDataset) -> Result<MultimodalDataset> {
        if self.mean.iter().map(Vec::len).collect::<Vec<_>>() != ds.dims {
            return Err(Error::Validation(format!(
                "feature statistics cover dims {:?}, dataset has {:?}",
                self.mean.iter().map(Vec::len).collect::<Vec<_>>(),
                ds.dims
            )));
        }
        let mut out = ds.clone();
        for (m, &d) in ds.dims.iter().enumerate() {
            for (k, v) in out.features[m].iter_mut().enumerate() {
                let j = k % d;
                *v = ((*v as f64 - self.mean[m][j]) / self.std[m][j]) as f32;
            }
        }
        Ok(out)
    }
}

/// Class means and style directions shared by both splits.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeFactors {
    /// `class_means[c][m]`, length `dims[m]`.
    pub class_means: Vec<Vec<Vec<f64>>>,
    /// Unit style direction per modality.
    pub style_dirs: Vec<Vec<f64>>,
}

pub fn generative_factors(cfg: &SyntheticConfig) -> Result<GenerativeFactors> {
    cfg.validate()?;
    let root = RngStream::new(cfg.seed);
    let means_rng = root.split("class-means");
    let class_means = (0..cfg.classes)
        .map(|c| {
            let rc = means_rng.split_idx("class", c);
            (0..cfg.modalities)
                .map(|m| rc.split_idx("modality", m).normal_vec(cfg.dims[m]).into_iter().map(|v| cfg.class_scale * v).collect())
                .collect()
        })
        .collect();
    let style_rng = root.split("style-directions");
    let style_dirs = (0..cfg.modalities)
        .map(|m| {
            let v = style_rng.split_idx("modality", m).normal_vec(cfg.dims[m]);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect();
    Ok(GenerativeFactors { class_means, style_dirs })
}

/// One sample drawn from its own counter-derived stream: label, per-modality style
/// coordinates `t_m`, and features.
pub fn generate_sample(cfg: &SyntheticConfig, factors: &GenerativeFactors, split: Split, index: usize) -> (u16, Vec<f64>, Vec<Vec<f64>>) {
    let mut rng = RngStream::new(cfg.seed).split(split.as_str()).split_idx("sample", index);
    let label = ((rng.uniform() * cfg.classes as f64) as usize).min(cfg.classes - 1);
    let mut styles = Vec::with_capacity(cfg.modalities);
    let mut xs = Vec::with_capacity(cfg.modalities);
    for m in 0..cfg.modalities {
        let t = rng.normal();
        let noise = rng.normal_vec(cfg.dims[m]);
        let x = (0..cfg.dims[m])
            .map(|j| factors.class_means[label][m][j] + cfg.style_scale * t * factors.style_dirs[m][j] + cfg.noise_std * noise[j])
            .collect();
        styles.push(t);
        xs.push(x);
    }
    (label as u16, styles, xs)
}

fn generate_split(cfg: &SyntheticConfig, factors: &GenerativeFactors, split: Split, n: usize) -> Result<MultimodalDataset> {
    let mut features: Vec<Vec<f32>> = cfg.dims.iter().map(|&d| Vec::with_capacity(n * d)).collect();
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let (label, _, xs) = generate_sample(cfg, factors, split, i);
        labels.push(label);
        for (block, x) in features.iter_mut().zip(xs) {
            block.extend(x.into_iter().map(|v| v as f32));
        }
    }
    MultimodalDataset::new(cfg.dims.clone(), cfg.classes, cfg.seed, split, features, labels)
}

/// Train and test splits; the two splits draw from disjoint streams.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(MultimodalDataset, MultimodalDataset)> {
    let factors = generative_factors(cfg)?;
    Ok((
        generate_split(cfg, &factors, Split::Train, cfg.n_train)?,
        generate_split(cfg, &factors, Split::Test, cfg.n_test)?,
    ))
}
