//! β-weighted training objectives. All values are in maximize form:
//! `total = Σ_m recon_m − β · rate`, averaged over the rows of a batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::aggregation::{JointVar, Strategy};
use crate::autodiff::{Matrix, ParamVars, Tape, Var};
use crate::distributions::batched::{self, GaussianVar};
use crate::distributions::{DiagonalGaussian, RngStream};
use crate::error::{contract, Error, Result};
use crate::model::{ForwardPass, MultimodalModel, Noise};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// Batch-mean reconstruction log-likelihood per modality.
    pub recon: Vec<f64>,
    /// Batch-mean rate (KL) term.
    pub rate: f64,
    pub total: f64,
    pub beta: f64,
}

impl ObjectiveBreakdown {
    pub fn recon_sum(&self) -> f64 {
        self.recon.iter().sum()
    }
}

/// Scalar tape nodes of one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveNodes {
    pub recon: Vec<Var>,
    pub rate: Var,
    pub total: Var,
    /// `−total`, the quantity an optimizer minimizes.
    pub loss: Var,
}

impl ObjectiveNodes {
    pub fn breakdown(&self, tape: &Tape, beta: f64) -> ObjectiveBreakdown {
        ObjectiveBreakdown {
            recon: self.recon.iter().map(|&r| tape.value(r).item()).collect(),
            rate: tape.value(self.rate).item(),
            total: tape.value(self.total).item(),
            beta,
        }
    }
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return contract(format!("beta must be finite and non-negative, got {beta}"));
    }
    Ok(())
}

/// Row-wise rate term (`n × 1`) of a forward pass.
pub fn rate_rows(model: &MultimodalModel, tape: &mut Tape, pass: &ForwardPass) -> Result<Var> {
    let cfg = &model.config;
    Ok(match (cfg.strategy, &pass.joint) {
        (Strategy::Independent, _) => {
            let kls: Vec<Var> = pass.unimodal.iter().map(|q| q.kl_standard_normal(tape)).collect();
            tape.add_all(&kls)
        }
        (Strategy::Mmvm, _) => {
            let (prior, own): (Vec<GaussianVar>, Vec<GaussianVar>) = if cfg.stop_prior_gradient {
                let detached: Vec<GaussianVar> = pass.unimodal.iter().map(|q| q.detach(tape)).collect();
                (detached.clone(), detached)
            } else {
                (pass.unimodal.clone(), pass.unimodal.clone())
            };
            let kls: Vec<Var> = own
                .iter()
                .zip(&pass.latents)
                .map(|(q, &z)| batched::kl_to_mixture(tape, q, &prior, z))
                .collect();
            tape.add_all(&kls)
        }
        (_, Some(JointVar::Gaussian(g))) => g.kl_standard_normal(tape),
        (_, Some(JointVar::Mixture(components))) => {
            let kls: Vec<Var> = components.iter().map(|c| c.kl_standard_normal(tape)).collect();
            let s = tape.add_all(&kls);
            tape.scale(s, 1.0 / components.len() as f64)
        }
        (_, None) => return contract("aggregating strategy produced no joint posterior"),
    })
}

/// Records the batch objective on `tape`.
pub fn objective_on_tape(
    model: &MultimodalModel,
    tape: &mut Tape,
    vars: &ParamVars,
    inputs: &[Var],
    noise: &Noise,
    beta: f64,
) -> Result<ObjectiveNodes> {
    check_beta(beta)?;
    let pass = model.forward(tape, vars, inputs, noise)?;
    let rate_rows = rate_rows(model, tape, &pass)?;
    let recon: Vec<Var> = pass.recon.iter().map(|&r| tape.mean(r)).collect();
    let rate = tape.mean(rate_rows);
    let recon_sum = tape.add_all(&recon);
    let penalty = tape.scale(rate, beta);
    let total = tape.sub(recon_sum, penalty);
    let loss = tape.neg(total);
    Ok(ObjectiveNodes { recon, rate, total, loss })
}

/// Objective value and parameter gradients of the loss (`−total`) for one batch.
pub fn objective_step(
    model: &MultimodalModel,
    inputs: &[Matrix],
    beta: f64,
    noise: &Noise,
) -> Result<(ObjectiveBreakdown, BTreeMap<String, Matrix>)> {
    let mut tape = Tape::new();
    let vars = tape.params(&model.params);
    let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let nodes = objective_on_tape(model, &mut tape, &vars, &xs, noise, beta)?;
    let breakdown = nodes.breakdown(&tape, beta);
    let grads = tape.backward(nodes.loss)?;
    Ok((breakdown, grads.by_name()))
}

/// Objective value without gradients.
pub fn evaluate_objective(model: &MultimodalModel, inputs: &[Matrix], beta: f64, noise: &Noise) -> Result<ObjectiveBreakdown> {
    let mut tape = Tape::new();
    let vars = tape.params(&model.params);
    let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let nodes = objective_on_tape(model, &mut tape, &vars, &xs, noise, beta)?;
    Ok(nodes.breakdown(&tape, beta))
}

/// Objective of one sample with freshly drawn noise.
pub fn objective_sample(model: &MultimodalModel, sample: &[Vec<f64>], beta: f64, rng: &mut RngStream) -> Result<ObjectiveBreakdown> {
    let inputs: Vec<Matrix> = sample.iter().map(|x| Matrix::row_vector(x.clone())).collect();
    let noise = Noise::sample(&model.config, 1, rng);
    evaluate_objective(model, &inputs, beta, &noise)
}

/// Batch mean of `Σ_m log p(x_m | decoder_m(mean of encoder_m(x_m)))`: the
/// deterministic-autoencoder log-likelihood, with no sampling and no rate.
pub fn mse_bound(model: &MultimodalModel, inputs: &[Matrix]) -> Result<f64> {
    if inputs.len() != model.num_modalities() {
        return contract(format!("expected {} modalities, got {}", model.num_modalities(), inputs.len()));
    }
    let mut total = 0.0;
    for (m, x) in inputs.iter().enumerate() {
        let loc = model.conditional_generate_batch(m, m, x, None)?;
        let mut s = 0.0;
        for r in 0..x.rows() {
            s += model.log_likelihood(m, loc.row(r), x.row(r))?;
        }
        total += s / x.rows() as f64;
    }
    Ok(total)
}

/// Regular 1-D lattice `lo, lo + h, …, hi` with `points` nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

pub const MIN_GRID_POINTS: usize = 200;

impl Grid {
    /// Grid spanning ±`width` stddevs around every component.
    pub fn covering(bundle: &[DiagonalGaussian], width: f64, points: usize) -> Self {
        let lo = bundle.iter().map(|g| g.mean()[0] - width * g.stddev()[0]).fold(f64::INFINITY, f64::min);
        let hi = bundle.iter().map(|g| g.mean()[0] + width * g.stddev()[0]).fold(f64::NEG_INFINITY, f64::max);
        Self { lo, hi, points }
    }

    pub fn nodes(&self) -> Vec<f64> {
        let h = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points).map(|i| self.lo + h * i as f64).collect()
    }

    fn check(&self, bundle: &[DiagonalGaussian]) -> Result<()> {
        if self.points < MIN_GRID_POINTS {
            return Err(Error::Validation(format!(
                "grid has {} points, at least {MIN_GRID_POINTS} are required",
                self.points
            )));
        }
        for (m, g) in bundle.iter().enumerate() {
            if g.dim() != 1 {
                return contract(format!("component {m} is {}-dimensional, expected 1", g.dim()));
            }
            let (mu, s) = (g.mean()[0], g.stddev()[0]);
            if self.lo > mu - 8.0 * s || self.hi < mu + 8.0 * s {
                return Err(Error::Validation(format!(
                    "grid [{}, {}] does not cover ±8σ of component {m} (mean {mu}, stddev {s})",
                    self.lo, self.hi
                )));
            }
        }
        Ok(())
    }
}

/// Probability masses of a 1-D Gaussian on the grid, normalized to sum to one.
pub fn discretize(g: &DiagonalGaussian, grid: &Grid) -> Vec<f64> {
    let (mu, s) = (g.mean()[0], g.stddev()[0]);
    let w: Vec<f64> = grid.nodes().iter().map(|x| (-0.5 * ((x - mu) / s).powi(2)).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// `F[h] = Σ_m Σ_i p_{m,i} log h_i` for discretized posteriors `p_m` and candidate masses `h`.
pub fn cross_entropy_functional(posteriors: &[Vec<f64>], candidate: &[f64]) -> f64 {
    let mut f = 0.0;
    for p in posteriors {
        for (&pi, &hi) in p.iter().zip(candidate) {
            if pi > 0.0 {
                f += pi * hi.ln();
            }
        }
    }
    f
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lemma1Report {
    pub mixture_value: f64,
    pub max_perturbed_value: f64,
    /// Smallest `mixture_value − perturbed_value` over all candidates.
    pub min_margin: f64,
    pub perturbations: usize,
    /// Smallest L1 distance between a candidate and the mixture.
    pub min_l1: f64,
}

/// Compares the cross-entropy functional at the uniform mixture of `bundle` with its
/// value at `perturbations` normalized multiplicative perturbations of the mixture,
/// each at L1 distance at least `min_l1` from it.
pub fn verify_lemma1(
    bundle: &[DiagonalGaussian],
    grid: &Grid,
    perturbations: usize,
    min_l1: f64,
    rng: &mut RngStream,
) -> Result<Lemma1Report> {
    if bundle.is_empty() {
        return contract("lemma check needs at least one component");
    }
    grid.check(bundle)?;
    let posteriors: Vec<Vec<f64>> = bundle.iter().map(|g| discretize(g, grid)).collect();
    let m = bundle.len() as f64;
    let mixture: Vec<f64> = (0..grid.points).map(|i| posteriors.iter().map(|p| p[i]).sum::<f64>() / m).collect();
    let mixture_value = cross_entropy_functional(&posteriors, &mixture);

    let mut max_perturbed_value = f64::NEG_INFINITY;
    let mut min_margin = f64::INFINITY;
    let mut min_seen_l1 = f64::INFINITY;
    for _ in 0..perturbations {
        let mut amplitude = 0.05 + 0.45 * rng.uniform();
        let u: Vec<f64> = (0..grid.points).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        let candidate = loop {
            let raw: Vec<f64> = mixture.iter().zip(&u).map(|(h, e)| h * (1.0 + amplitude * e)).collect();
            let z: f64 = raw.iter().sum();
            let c: Vec<f64> = raw.into_iter().map(|v| v / z).collect();
            let l1: f64 = c.iter().zip(&mixture).map(|(a, b)| (a - b).abs()).sum();
            if l1 >= min_l1 || amplitude >= 0.99 {
                min_seen_l1 = min_seen_l1.min(l1);
                break c;
            }
            amplitude = (amplitude * 1.5).min(0.99);
        };
        let value = cross_entropy_functional(&posteriors, &candidate);
        max_perturbed_value = max_perturbed_value.max(value);
        min_margin = min_margin.min(mixture_value - value);
    }
    Ok(Lemma1Report { mixture_value, max_perturbed_value, min_margin, perturbations, min_l1: min_seen_l1 })
}
