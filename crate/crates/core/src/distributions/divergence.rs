//! Monte-Carlo divergences between Gaussians and Gaussian mixtures.
//!
//! `KL(q ‖ h)` for a mixture `h` has no closed form. Each draw `z ~ q` contributes
//! `log q(z) − log h(z)`; the first term has expectation `−H[q]`, so this is the
//! closed-form-entropy estimator with the entropy replaced by its own per-sample
//! value. The two agree in expectation, but the per-sample form is exactly zero
//! whenever `h = q` pointwise (one component, or all components identical).
//!
//! With enough draws the mean is adjusted with regression control variates on the
//! standard-normal noise itself (`ε_j` and `ε_j² − 1`, both with known mean zero).
//! The adjustment keeps the exact zero, since an all-zero log ratio fits zero
//! coefficients, and removes most of the variance when the components are close.

use super::gaussian::{DiagonalGaussian, GaussianMixture};
use super::rng::RngStream;
use crate::error::{contract, Result};

/// Estimate of `KL(q ‖ mix)` from explicit standard-normal noise vectors, one per draw.
pub fn kl_to_mixture_with_noise(q: &DiagonalGaussian, mix: &GaussianMixture, noise: &[Vec<f64>]) -> Result<f64> {
    if noise.is_empty() {
        return contract("kl_to_mixture needs at least one sample");
    }
    if mix.dim() != q.dim() {
        return contract(format!("dimension mismatch: q has {}, mixture has {}", q.dim(), mix.dim()));
    }
    let mut values = Vec::with_capacity(noise.len());
    for eps in noise {
        let z = q.sample_with_noise(eps)?;
        values.push(q.log_prob(&z)? - mix.log_prob(&z)?);
    }
    Ok(control_variate_mean(&values, noise))
}

/// Below this many draws per control the plain sample mean is used.
const MIN_DRAWS_PER_CONTROL: usize = 8;

/// Sample mean of `values` minus the fitted control-variate correction.
fn control_variate_mean(values: &[f64], noise: &[Vec<f64>]) -> f64 {
    let n = values.len();
    let plain = values.iter().sum::<f64>() / n as f64;
    let d = noise[0].len();
    let k = 2 * d;
    if k == 0 || n < MIN_DRAWS_PER_CONTROL * k {
        return plain;
    }
    let mut c_sum = vec![0.0; k];
    let mut cc = vec![vec![0.0; k]; k];
    let mut cr = vec![0.0; k];
    let mut c = vec![0.0; k];
    for (eps, &r) in noise.iter().zip(values) {
        for j in 0..d {
            c[j] = eps[j];
            c[d + j] = eps[j] * eps[j] - 1.0;
        }
        for a in 0..k {
            c_sum[a] += c[a];
            cr[a] += c[a] * (r - plain);
            for b in a..k {
                cc[a][b] += c[a] * c[b];
            }
        }
    }
    let c_mean: Vec<f64> = c_sum.iter().map(|s| s / n as f64).collect();
    for a in 0..k {
        for b in a..k {
            cc[a][b] -= n as f64 * c_mean[a] * c_mean[b];
            cc[b][a] = cc[a][b];
        }
    }
    match solve(cc, cr) {
        Some(coef) => plain - coef.iter().zip(&c_mean).map(|(b, m)| b * m).sum::<f64>(),
        None => plain,
    }
}

/// Gaussian elimination with partial pivoting; `None` for a (near-)singular system.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let k = b.len();
    let scale = a.iter().enumerate().map(|(i, row)| row[i].abs()).fold(0.0, f64::max);
    for col in 0..k {
        let pivot = (col..k).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if !(a[pivot][col].abs() > 1e-12 * scale) {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..k {
            let f = a[row][col] / a[col][col];
            if f != 0.0 {
                for j in col..k {
                    a[row][j] -= f * a[col][j];
                }
                b[row] -= f * b[col];
            }
        }
    }
    let mut x = vec![0.0; k];
    for row in (0..k).rev() {
        let s: f64 = (row + 1..k).map(|j| a[row][j] * x[j]).sum();
        x[row] = (b[row] - s) / a[row][row];
    }
    Some(x)
}

/// Monte-Carlo estimate of `KL(q ‖ mix)` from `n_samples` reparameterized draws.
pub fn kl_to_mixture(q: &DiagonalGaussian, mix: &GaussianMixture, n_samples: usize, rng: &mut RngStream) -> Result<f64> {
    if n_samples == 0 {
        return contract("kl_to_mixture needs n_samples >= 1");
    }
    let noise: Vec<Vec<f64>> = (0..n_samples).map(|_| rng.normal_vec(q.dim())).collect();
    kl_to_mixture_with_noise(q, mix, &noise)
}

fn check_bundle(components: &[DiagonalGaussian]) -> Result<()> {
    let Some(first) = components.first() else {
        return contract("divergence of an empty set of distributions");
    };
    if let Some(c) = components.iter().find(|c| c.dim() != first.dim()) {
        return contract(format!("dimension mismatch: {} vs {}", first.dim(), c.dim()));
    }
    Ok(())
}

/// Generalized Jensen–Shannon divergence with uniform weights, evaluated with
/// `noise[m]` as the draws for component `m`:
/// `(1/M) Σ_m KL(q_m ‖ (1/M) Σ_k q_k)`.
pub fn js_divergence_with_noise(components: &[DiagonalGaussian], noise: &[Vec<Vec<f64>>]) -> Result<f64> {
    check_bundle(components)?;
    if noise.len() != components.len() {
        return contract(format!("{} noise sets for {} components", noise.len(), components.len()));
    }
    let mix = GaussianMixture::uniform(components.to_vec())?;
    let mut total = 0.0;
    for (q, eps) in components.iter().zip(noise) {
        total += kl_to_mixture_with_noise(q, &mix, eps)?;
    }
    Ok(total / components.len() as f64)
}

/// Monte-Carlo generalized Jensen–Shannon divergence with `n_samples` draws per component.
pub fn js_divergence(components: &[DiagonalGaussian], n_samples: usize, rng: &mut RngStream) -> Result<f64> {
    check_bundle(components)?;
    if n_samples == 0 {
        return contract("js_divergence needs n_samples >= 1");
    }
    let noise = draw_bundle_noise(components, n_samples, rng);
    js_divergence_with_noise(components, &noise)
}

/// `n_samples` standard-normal vectors per component, drawn in component order.
pub fn draw_bundle_noise(components: &[DiagonalGaussian], n_samples: usize, rng: &mut RngStream) -> Vec<Vec<Vec<f64>>> {
    components
        .iter()
        .map(|c| (0..n_samples).map(|_| rng.normal_vec(c.dim())).collect())
        .collect()
}
