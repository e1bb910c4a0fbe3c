//! Differentiable, row-batched counterparts of the Gaussian algebra.
//!
//! Each row of a [`GaussianVar`] is one diagonal Gaussian; per-row results are
//! `n × 1` nodes.

use super::gaussian::{DiagonalGaussian, LN_2PI};
use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{contract, Result};

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Batch of diagonal Gaussians on a tape, `n × d` each.
#[derive(Debug, Clone, Copy)]
pub struct GaussianVar {
    pub mean: Var,
    pub stddev: Var,
    pub log_stddev: Var,
}

impl GaussianVar {
    /// Stddev `exp(½·clamp(logvar, −10, 10))`.
    pub fn from_mean_logvar(tape: &mut Tape, mean: Var, logvar: Var) -> Self {
        let lv = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        let log_stddev = tape.scale(lv, 0.5);
        let stddev = tape.exp(log_stddev);
        Self { mean, stddev, log_stddev }
    }

    pub fn from_mean_stddev(tape: &mut Tape, mean: Var, stddev: Var) -> Self {
        let log_stddev = tape.ln(stddev);
        Self { mean, stddev, log_stddev }
    }

    /// Non-differentiable batch, one row per Gaussian.
    pub fn constant(tape: &mut Tape, rows: &[DiagonalGaussian]) -> Self {
        let means: Vec<Vec<f64>> = rows.iter().map(|g| g.mean().to_vec()).collect();
        let stds: Vec<Vec<f64>> = rows.iter().map(|g| g.stddev().to_vec()).collect();
        let mean = tape.constant(Matrix::from_rows(&means));
        let stddev = tape.constant(Matrix::from_rows(&stds));
        let log_stddev = tape.ln(stddev);
        Self { mean, stddev, log_stddev }
    }

    pub fn detach(&self, tape: &mut Tape) -> Self {
        Self {
            mean: tape.detach(self.mean),
            stddev: tape.detach(self.stddev),
            log_stddev: tape.detach(self.log_stddev),
        }
    }

    pub fn shape(&self, tape: &Tape) -> (usize, usize) {
        tape.shape(self.mean)
    }

    /// Row-wise values as plain Gaussians.
    pub fn to_gaussians(&self, tape: &Tape) -> Result<Vec<DiagonalGaussian>> {
        let (m, s) = (tape.value(self.mean), tape.value(self.stddev));
        (0..m.rows()).map(|r| DiagonalGaussian::new(m.row(r).to_vec(), s.row(r).to_vec())).collect()
    }

    /// `mean + stddev ⊙ noise`.
    pub fn sample(&self, tape: &mut Tape, noise: &Matrix) -> Result<Var> {
        if noise.shape() != self.shape(tape) {
            return contract(format!("noise shape {:?} does not match {:?}", noise.shape(), self.shape(tape)));
        }
        let eps = tape.constant(noise.clone());
        let scaled = tape.mul(self.stddev, eps);
        Ok(tape.add(self.mean, scaled))
    }

    /// Row-wise `log N(z; mean, stddev²)`.
    pub fn log_prob(&self, tape: &mut Tape, z: Var) -> Var {
        let d = self.shape(tape).1 as f64;
        let diff = tape.sub(z, self.mean);
        let u = tape.div(diff, self.stddev);
        let u2 = tape.square(u);
        let half = tape.scale(u2, 0.5);
        let per_dim = tape.add(half, self.log_stddev);
        let s = tape.row_sum(per_dim);
        let s = tape.neg(s);
        tape.add_scalar(s, -0.5 * LN_2PI * d)
    }

    /// Row-wise closed-form `KL(self ‖ N(0, I))`.
    pub fn kl_standard_normal(&self, tape: &mut Tape) -> Var {
        // ½ Σ (μ² + σ² − 1) − Σ log σ
        let m2 = tape.square(self.mean);
        let s2 = tape.square(self.stddev);
        let t = tape.add(m2, s2);
        let t = tape.add_scalar(t, -1.0);
        let t = tape.scale(t, 0.5);
        let t = tape.sub(t, self.log_stddev);
        tape.row_sum(t)
    }
}

/// Row-wise `log((1/K) Σ_k N_k(z))` with log-sum-exp.
pub fn mixture_log_prob(tape: &mut Tape, components: &[GaussianVar], z: Var) -> Var {
    let k = components.len() as f64;
    let terms: Vec<Var> = components.iter().map(|c| c.log_prob(tape, z)).collect();
    let cat = tape.concat_cols(&terms);
    let lse = tape.logsumexp_rows(cat);
    tape.add_scalar(lse, -k.ln())
}

/// Row-wise single-draw estimate of `KL(q ‖ (1/K) Σ_k component_k)` at `z ~ q`.
pub fn kl_to_mixture(tape: &mut Tape, q: &GaussianVar, components: &[GaussianVar], z: Var) -> Var {
    let lq = q.log_prob(tape, z);
    let lm = mixture_log_prob(tape, components, z);
    tape.sub(lq, lm)
}

/// Precision-weighted product; with `prior_expert` an extra `N(0, I)` factor joins the product.
pub fn product(tape: &mut Tape, components: &[GaussianVar], prior_expert: bool) -> Result<GaussianVar> {
    if components.is_empty() {
        return contract("product of an empty set of gaussians");
    }
    let mut precisions = Vec::with_capacity(components.len());
    let mut weighted = Vec::with_capacity(components.len());
    for c in components {
        let m2 = tape.scale(c.log_stddev, -2.0);
        let p = tape.exp(m2);
        weighted.push(tape.mul(c.mean, p));
        precisions.push(p);
    }
    let mut total = tape.add_all(&precisions);
    if prior_expert {
        total = tape.add_scalar(total, 1.0);
    }
    let sum_w = tape.add_all(&weighted);
    let mean = tape.div(sum_w, total);
    let ln_p = tape.ln(total);
    let log_stddev = tape.scale(ln_p, -0.5);
    let stddev = tape.exp(log_stddev);
    Ok(GaussianVar { mean, stddev, log_stddev })
}

/// Elementwise arithmetic mean of means and of stddevs.
pub fn average(tape: &mut Tape, components: &[GaussianVar]) -> Result<GaussianVar> {
    if components.is_empty() {
        return contract("average of an empty set of gaussians");
    }
    let k = components.len() as f64;
    let means: Vec<Var> = components.iter().map(|c| c.mean).collect();
    let stds: Vec<Var> = components.iter().map(|c| c.stddev).collect();
    let m = tape.add_all(&means);
    let mean = tape.scale(m, 1.0 / k);
    let s = tape.add_all(&stds);
    let stddev = tape.scale(s, 1.0 / k);
    Ok(GaussianVar::from_mean_stddev(tape, mean, stddev))
}

/// Row-wise fixed-scale Gaussian log-likelihood of `x` given location `loc`.
pub fn gaussian_log_lik(tape: &mut Tape, loc: Var, x: Var, scale: f64) -> Var {
    let d = tape.shape(x).1 as f64;
    let diff = tape.sub(x, loc);
    let sq = tape.square(diff);
    let s = tape.row_sum(sq);
    let s = tape.scale(s, -0.5 / (scale * scale));
    tape.add_scalar(s, -d * (0.5 * LN_2PI + scale.ln()))
}

/// Row-wise fixed-scale Laplace log-likelihood of `x` given location `loc`.
pub fn laplace_log_lik(tape: &mut Tape, loc: Var, x: Var, scale: f64) -> Var {
    let d = tape.shape(x).1 as f64;
    let diff = tape.sub(x, loc);
    let a = tape.abs(diff);
    let s = tape.row_sum(a);
    let s = tape.scale(s, -1.0 / scale);
    tape.add_scalar(s, -d * (2.0 * scale).ln())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::{
        gaussian_fixed_log_prob, kl_gaussian, product_of_gaussians, GaussianMixture, LaplaceLikelihood, RngStream,
    };

    fn random_gaussians(rng: &mut RngStream, n: usize, d: usize) -> Vec<DiagonalGaussian> {
        (0..n)
            .map(|_| {
                let m = rng.normal_vec(d).iter().map(|v| 2.0 * v).collect();
                let s = (0..d).map(|_| 0.3 + rng.uniform() * 1.5).collect();
                DiagonalGaussian::new(m, s).unwrap()
            })
            .collect()
    }

    #[test]
    fn batched_matches_scalar_routes() {
        let mut rng = RngStream::new(21);
        let (n, d) = (4, 3);
        let a = random_gaussians(&mut rng, n, d);
        let b = random_gaussians(&mut rng, n, d);
        let c = random_gaussians(&mut rng, n, d);
        let zs = rng.normal_matrix(n, d);

        let mut t = Tape::new();
        let (ga, gb, gc) = (GaussianVar::constant(&mut t, &a), GaussianVar::constant(&mut t, &b), GaussianVar::constant(&mut t, &c));
        let z = t.constant(zs.clone());
        let lp = ga.log_prob(&mut t, z);
        let kl = ga.kl_standard_normal(&mut t);
        let mix = mixture_log_prob(&mut t, &[ga, gb, gc], z);
        let poe = product(&mut t, &[ga, gb], false).unwrap();
        let poe_p = product(&mut t, &[ga, gb], true).unwrap();

        for r in 0..n {
            let zr = zs.row(r);
            assert!((t.value(lp).data()[r] - a[r].log_prob(zr).unwrap()).abs() < 1e-12);
            let want = kl_gaussian(&a[r], &DiagonalGaussian::standard(d)).unwrap();
            assert!((t.value(kl).data()[r] - want).abs() < 1e-12);
            let m = GaussianMixture::uniform(vec![a[r].clone(), b[r].clone(), c[r].clone()]).unwrap();
            assert!((t.value(mix).data()[r] - m.log_prob(zr).unwrap()).abs() < 1e-12);
            let p = product_of_gaussians(&[a[r].clone(), b[r].clone()]).unwrap();
            let got = &poe.to_gaussians(&t).unwrap()[r];
            for i in 0..d {
                assert!((got.mean()[i] - p.mean()[i]).abs() < 1e-12);
                assert!((got.stddev()[i] - p.stddev()[i]).abs() < 1e-12);
            }
            let p = product_of_gaussians(&[a[r].clone(), b[r].clone(), DiagonalGaussian::standard(d)]).unwrap();
            let got = &poe_p.to_gaussians(&t).unwrap()[r];
            for i in 0..d {
                assert!((got.mean()[i] - p.mean()[i]).abs() < 1e-12);
                assert!((got.stddev()[i] - p.stddev()[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn likelihoods_match_scalar_routes() {
        let mut rng = RngStream::new(2);
        let loc = rng.normal_matrix(3, 5);
        let x = rng.normal_matrix(3, 5);
        let mut t = Tape::new();
        let (l, xv) = (t.constant(loc.clone()), t.constant(x.clone()));
        let g = gaussian_log_lik(&mut t, l, xv, 0.8);
        let lp = laplace_log_lik(&mut t, l, xv, 0.75);
        for r in 0..3 {
            let want = gaussian_fixed_log_prob(loc.row(r), 0.8, x.row(r)).unwrap();
            assert!((t.value(g).data()[r] - want).abs() < 1e-12);
            let want = LaplaceLikelihood::new(loc.row(r).to_vec(), 0.75).unwrap().log_prob(x.row(r)).unwrap();
            assert!((t.value(lp).data()[r] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn logvar_clamp_floor() {
        let mut t = Tape::new();
        let m = t.constant(Matrix::zeros(1, 2));
        let lv = t.constant(Matrix::row_vector(vec![-50.0, 0.0]));
        let g = GaussianVar::from_mean_logvar(&mut t, m, lv);
        let s = t.value(g.stddev).data().to_vec();
        assert_eq!(s[0], (-5.0f64).exp());
        assert_eq!(s[1], 1.0);
    }
}
