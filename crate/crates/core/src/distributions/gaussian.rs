use serde::{Deserialize, Serialize};

use super::rng::RngStream;
use crate::autodiff::logsumexp;
use crate::error::{contract, Result};

/// Smallest stddev used when sampling; keeps the degenerate limit well defined.
pub const MIN_STDDEV: f64 = 1e-12;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Factorized Gaussian `N(mean, diag(stddev²))`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalGaussian {
    mean: Vec<f64>,
    stddev: Vec<f64>,
}

impl DiagonalGaussian {
    pub fn new(mean: Vec<f64>, stddev: Vec<f64>) -> Result<Self> {
        if mean.len() != stddev.len() {
            return contract(format!("mean has length {}, stddev has length {}", mean.len(), stddev.len()));
        }
        if mean.is_empty() {
            return contract("gaussian dimension must be at least 1");
        }
        if let Some(s) = stddev.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return contract(format!("stddev must be positive and finite, got {s}"));
        }
        if mean.iter().any(|m| !m.is_finite()) {
            return contract("mean must be finite");
        }
        Ok(Self { mean, stddev })
    }

    pub fn standard(dim: usize) -> Self {
        Self { mean: vec![0.0; dim], stddev: vec![1.0; dim] }
    }

    /// Gaussian with isotropic stddev, convenient for tests and 1-D work.
    pub fn isotropic(mean: Vec<f64>, stddev: f64) -> Result<Self> {
        let d = mean.len();
        Self::new(mean, vec![stddev; d])
    }

    /// Builds from a log-variance, clamped to `[-10, 10]`.
    pub fn from_logvar(mean: Vec<f64>, logvar: &[f64]) -> Result<Self> {
        let stddev = logvar.iter().map(|&lv| (0.5 * lv.clamp(-10.0, 10.0)).exp()).collect();
        Self::new(mean, stddev)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn stddev(&self) -> &[f64] {
        &self.stddev
    }

    pub fn variance(&self) -> Vec<f64> {
        self.stddev.iter().map(|s| s * s).collect()
    }

    fn check_dim(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return contract(format!("dimension mismatch: gaussian has {}, argument has {n}", self.dim()));
        }
        Ok(())
    }

    /// Exact log density.
    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.stddev)
            .zip(z)
            .map(|((m, s), x)| {
                let u = (x - m) / s;
                -0.5 * LN_2PI - s.ln() - 0.5 * u * u
            })
            .sum())
    }

    /// Differential entropy `Σ_d ½·log(2πe·σ_d²)`.
    pub fn entropy(&self) -> f64 {
        self.stddev.iter().map(|s| 0.5 * (LN_2PI + 1.0) + s.ln()).sum()
    }

    /// `mean + max(stddev, MIN_STDDEV) ⊙ noise`.
    pub fn sample_with_noise(&self, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(noise.len())?;
        Ok(self
            .mean
            .iter()
            .zip(&self.stddev)
            .zip(noise)
            .map(|((m, s), e)| m + s.max(MIN_STDDEV) * e)
            .collect())
    }

    /// Reparameterized draw.
    pub fn sample_reparam(&self, rng: &mut RngStream) -> Vec<f64> {
        let noise = rng.normal_vec(self.dim());
        self.sample_with_noise(&noise).expect("noise has the right dimension")
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn kl_gaussian(q: &DiagonalGaussian, p: &DiagonalGaussian) -> Result<f64> {
    p.check_dim(q.dim())?;
    Ok(q.mean
        .iter()
        .zip(&q.stddev)
        .zip(p.mean.iter().zip(&p.stddev))
        .map(|((mq, sq), (mp, sp))| {
            let r = sq / sp;
            let u = (mq - mp) / sp;
            0.5 * (r * r + u * u - 1.0) - r.ln()
        })
        .sum())
}

/// Precision-weighted product of Gaussian experts, renormalized.
pub fn product_of_gaussians(components: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let Some(first) = components.first() else {
        return contract("product of an empty set of gaussians");
    };
    let d = first.dim();
    for c in components {
        c.check_dim(d)?;
    }
    let mut precision = vec![0.0; d];
    let mut weighted = vec![0.0; d];
    for c in components {
        for i in 0..d {
            let p = 1.0 / (c.stddev[i] * c.stddev[i]);
            precision[i] += p;
            weighted[i] += c.mean[i] * p;
        }
    }
    let mean = weighted.iter().zip(&precision).map(|(w, p)| w / p).collect();
    let stddev = precision.iter().map(|p| (1.0 / p).sqrt()).collect();
    DiagonalGaussian::new(mean, stddev)
}

/// Finite mixture of diagonal Gaussians of one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMixture {
    components: Vec<DiagonalGaussian>,
    weights: Vec<f64>,
}

impl GaussianMixture {
    pub fn new(components: Vec<DiagonalGaussian>, weights: Vec<f64>) -> Result<Self> {
        if components.is_empty() {
            return contract("mixture needs at least one component");
        }
        if components.len() != weights.len() {
            return contract(format!("{} components but {} weights", components.len(), weights.len()));
        }
        let d = components[0].dim();
        for c in &components {
            c.check_dim(d)?;
        }
        if weights.iter().any(|&w| !(w >= 0.0)) {
            return contract("mixture weights must be nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return contract(format!("mixture weights sum to {total}, expected 1"));
        }
        Ok(Self { components, weights })
    }

    pub fn uniform(components: Vec<DiagonalGaussian>) -> Result<Self> {
        let k = components.len().max(1);
        Self::new(components, vec![1.0 / k as f64; k])
    }

    pub fn components(&self) -> &[DiagonalGaussian] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    /// `log Σ_k w_k N_k(z)` via log-sum-exp.
    pub fn log_prob(&self, z: &[f64]) -> Result<f64> {
        let terms = self
            .components
            .iter()
            .zip(&self.weights)
            .map(|(c, &w)| Ok(w.ln() + c.log_prob(z)?))
            .collect::<Result<Vec<f64>>>()?;
        Ok(logsumexp(&terms))
    }
}

/// Fixed-scale Laplace likelihood.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LaplaceLikelihood {
    location: Vec<f64>,
    scale: f64,
}

impl LaplaceLikelihood {
    pub fn new(location: Vec<f64>, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return contract(format!("laplace scale must be positive, got {scale}"));
        }
        Ok(Self { location, scale })
    }

    /// `Σ_d [−log(2b) − |x_d − loc_d| / b]`.
    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.location.len() {
            return contract(format!(
                "dimension mismatch: location has {}, argument has {}",
                self.location.len(),
                x.len()
            ));
        }
        let b = self.scale;
        Ok(self.location.iter().zip(x).map(|(l, x)| -(2.0 * b).ln() - (x - l).abs() / b).sum())
    }
}

/// Fixed-scale Gaussian likelihood log density, `Σ_d log N(x_d; loc_d, s²)`.
pub fn gaussian_fixed_log_prob(location: &[f64], scale: f64, x: &[f64]) -> Result<f64> {
    if x.len() != location.len() {
        return contract(format!("dimension mismatch: location has {}, argument has {}", location.len(), x.len()));
    }
    Ok(location
        .iter()
        .zip(x)
        .map(|(l, x)| {
            let u = (x - l) / scale;
            -0.5 * LN_2PI - scale.ln() - 0.5 * u * u
        })
        .sum())
}
