//! Strategies that combine per-modality posteriors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::distributions::batched::{self, GaussianVar};
use crate::distributions::{product_of_gaussians, DiagonalGaussian, GaussianMixture};
use crate::error::{contract, Error, Result};

/// Largest modality count for which MoPoE subsets are enumerated.
pub const MAX_MOPOE_MODALITIES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Independent,
    Avg,
    Moe,
    Poe,
    Mopoe,
    Mmvm,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Strategy::Independent, Strategy::Avg, Strategy::Moe, Strategy::Poe, Strategy::Mopoe, Strategy::Mmvm];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Independent => "independent",
            Strategy::Avg => "avg",
            Strategy::Moe => "moe",
            Strategy::Poe => "poe",
            Strategy::Mopoe => "mopoe",
            Strategy::Mmvm => "mmvm",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy '{s}' (expected independent|avg|moe|poe|mopoe|mmvm)")))
    }
}

/// Joint object produced by a strategy.
#[derive(Debug, Clone, PartialEq)]
pub enum Joint {
    Gaussian(DiagonalGaussian),
    Mixture(GaussianMixture),
}

/// Unimodal posteriors of one sample plus the strategy's joint object, if any.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorBundle {
    pub unimodal: Vec<DiagonalGaussian>,
    pub joint: Option<Joint>,
}

impl PosteriorBundle {
    pub fn new(strategy: Strategy, unimodal: Vec<DiagonalGaussian>, poe_prior_expert: bool) -> Result<Self> {
        check(&unimodal)?;
        let joint = match strategy {
            Strategy::Independent => None,
            Strategy::Avg => Some(Joint::Gaussian(aggregate_avg(&unimodal)?)),
            Strategy::Poe => Some(Joint::Gaussian(aggregate_poe(&unimodal, poe_prior_expert)?)),
            Strategy::Moe => Some(Joint::Mixture(aggregate_moe(&unimodal)?)),
            Strategy::Mopoe => Some(Joint::Mixture(aggregate_mopoe(&unimodal)?)),
            Strategy::Mmvm => Some(Joint::Mixture(mmvm_prior(&unimodal)?)),
        };
        Ok(Self { unimodal, joint })
    }
}

fn check(unimodal: &[DiagonalGaussian]) -> Result<usize> {
    let Some(first) = unimodal.first() else {
        return contract("aggregation needs at least one unimodal posterior");
    };
    let d = first.dim();
    if let Some(g) = unimodal.iter().find(|g| g.dim() != d) {
        return contract(format!("all posteriors must share one latent dimension: {d} vs {}", g.dim()));
    }
    Ok(d)
}

/// Arithmetic mean of the means and of the stddevs.
pub fn aggregate_avg(unimodal: &[DiagonalGaussian]) -> Result<DiagonalGaussian> {
    let d = check(unimodal)?;
    let m = unimodal.len() as f64;
    let mut mean = vec![0.0; d];
    let mut stddev = vec![0.0; d];
    for g in unimodal {
        for i in 0..d {
            mean[i] += g.mean()[i] / m;
            stddev[i] += g.stddev()[i] / m;
        }
    }
    DiagonalGaussian::new(mean, stddev)
}

/// Product of experts, optionally with a standard-normal prior expert.
pub fn aggregate_poe(unimodal: &[DiagonalGaussian], include_prior_expert: bool) -> Result<DiagonalGaussian> {
    let d = check(unimodal)?;
    if include_prior_expert {
        let mut experts = unimodal.to_vec();
        experts.push(DiagonalGaussian::standard(d));
        product_of_gaussians(&experts)
    } else {
        product_of_gaussians(unimodal)
    }
}

/// Uniform mixture of the unimodal posteriors.
pub fn aggregate_moe(unimodal: &[DiagonalGaussian]) -> Result<GaussianMixture> {
    check(unimodal)?;
    GaussianMixture::uniform(unimodal.to_vec())
}

/// Nonempty modality subsets as index lists, ordered by bitmask `1..2^M`.
pub fn nonempty_subsets(m: usize) -> Result<Vec<Vec<usize>>> {
    if m == 0 || m > MAX_MOPOE_MODALITIES {
        return contract(format!("subset enumeration supports 1..={MAX_MOPOE_MODALITIES} modalities, got {m}"));
    }
    Ok((1u32..(1 << m)).map(|mask| (0..m).filter(|&i| mask & (1 << i) != 0).collect()).collect())
}

/// Uniform mixture over the product of experts of every nonempty modality subset.
pub fn aggregate_mopoe(unimodal: &[DiagonalGaussian]) -> Result<GaussianMixture> {
    check(unimodal)?;
    let components = nonempty_subsets(unimodal.len())?
        .iter()
        .map(|s| {
            let experts: Vec<DiagonalGaussian> = s.iter().map(|&i| unimodal[i].clone()).collect();
            product_of_gaussians(&experts)
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::uniform(components)
}

/// The data-dependent prior shared by every modality: uniform mixture of all unimodal posteriors.
pub fn mmvm_prior(unimodal: &[DiagonalGaussian]) -> Result<GaussianMixture> {
    aggregate_moe(unimodal)
}

/// Batched joint object on a tape.
#[derive(Debug, Clone)]
pub enum JointVar {
    Gaussian(GaussianVar),
    Mixture(Vec<GaussianVar>),
}

/// Tape counterpart of [`PosteriorBundle::new`]'s joint, one sample per row.
pub fn joint_on_tape(
    tape: &mut Tape,
    strategy: Strategy,
    unimodal: &[GaussianVar],
    poe_prior_expert: bool,
) -> Result<Option<JointVar>> {
    if unimodal.is_empty() {
        return contract("aggregation needs at least one unimodal posterior");
    }
    Ok(match strategy {
        Strategy::Independent => None,
        Strategy::Avg => Some(JointVar::Gaussian(batched::average(tape, unimodal)?)),
        Strategy::Poe => Some(JointVar::Gaussian(batched::product(tape, unimodal, poe_prior_expert)?)),
        Strategy::Moe | Strategy::Mmvm => Some(JointVar::Mixture(unimodal.to_vec())),
        Strategy::Mopoe => {
            let mut comps = Vec::new();
            for s in nonempty_subsets(unimodal.len())? {
                if s.len() == 1 {
                    comps.push(unimodal[s[0]]);
                } else {
                    let experts: Vec<GaussianVar> = s.iter().map(|&i| unimodal[i]).collect();
                    comps.push(batched::product(tape, &experts, false)?);
                }
            }
            Some(JointVar::Mixture(comps))
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(m: f64, s: f64) -> DiagonalGaussian {
        DiagonalGaussian::new(vec![m], vec![s]).unwrap()
    }

    #[test]
    fn strategy_tags_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
            assert_eq!(serde_json::to_string(&s).unwrap(), format!("\"{s}\""));
        }
        assert!("vamp".parse::<Strategy>().is_err());
    }

    #[test]
    fn avg_follows_mean_of_stddevs() {
        let a = aggregate_avg(&[g1(0.0, 1.0), g1(2.0, 3.0)]).unwrap();
        assert_eq!(a.mean(), &[1.0]);
        assert_eq!(a.stddev(), &[2.0]);
        let one = DiagonalGaussian::new(vec![0.3, -1.0], vec![0.4, 1.7]).unwrap();
        assert_eq!(aggregate_avg(std::slice::from_ref(&one)).unwrap(), one);
        let b = aggregate_avg(&[g1(2.0, 3.0), g1(0.0, 1.0)]).unwrap();
        assert_eq!(a, b);
        assert!(aggregate_avg(&[]).is_err());
    }

    #[test]
    fn poe_cases() {
        let one = DiagonalGaussian::new(vec![0.3], vec![0.4]).unwrap();
        let p = aggregate_poe(std::slice::from_ref(&one), false).unwrap();
        assert!((p.mean()[0] - 0.3).abs() < 1e-15 && (p.stddev()[0] - 0.4).abs() < 1e-15);
        let p = aggregate_poe(&[g1(0.0, 1.0), g1(0.0, 1.0)], false).unwrap();
        assert!((p.variance()[0] - 0.5).abs() < 1e-15);
        let p = aggregate_poe(&[g1(0.0, 1.0), g1(0.0, 1.0)], true).unwrap();
        assert!((p.variance()[0] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn moe_is_uniform() {
        let comps = vec![g1(0.0, 1.0), g1(1.0, 0.5), g1(-1.0, 2.0)];
        let mix = aggregate_moe(&comps).unwrap();
        assert!(mix.weights().iter().all(|&w| w == 1.0 / 3.0));
        let z = [0.37];
        let direct =
            (comps.iter().map(|c| c.log_prob(&z).unwrap().exp()).sum::<f64>() / 3.0).ln();
        assert!((mix.log_prob(&z).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn mopoe_enumeration() {
        let q1 = g1(0.5, 1.0);
        let q2 = g1(-1.0, 0.5);
        let mix = aggregate_mopoe(&[q1.clone(), q2.clone()]).unwrap();
        assert_eq!(mix.components().len(), 3);
        assert_eq!(mix.components()[0], product_of_gaussians(&[q1.clone()]).unwrap());
        assert_eq!(mix.components()[1], product_of_gaussians(&[q2.clone()]).unwrap());
        assert_eq!(mix.components()[2], product_of_gaussians(&[q1.clone(), q2]).unwrap());
        let single = aggregate_mopoe(std::slice::from_ref(&q1)).unwrap();
        assert_eq!(single.components().len(), 1);
        for m in 1..=6 {
            let comps = vec![q1.clone(); m];
            assert_eq!(aggregate_mopoe(&comps).unwrap().components().len(), (1 << m) - 1);
        }
        assert!(aggregate_mopoe(&vec![q1; 11]).is_err());
    }

    #[test]
    fn mismatched_dims_rejected() {
        let r = aggregate_moe(&[g1(0.0, 1.0), DiagonalGaussian::standard(2)]);
        assert!(r.is_err());
    }
}
