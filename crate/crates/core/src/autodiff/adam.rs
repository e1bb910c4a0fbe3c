use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParameterSet;
use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam moment estimates mirroring a [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub config: AdamConfig,
    first: BTreeMap<String, Matrix>,
    second: BTreeMap<String, Matrix>,
    step: u64,
}

impl AdamState {
    pub fn new(params: &ParameterSet, config: AdamConfig) -> Self {
        let zeros = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        let first = params.iter().map(|(k, v)| (k.to_string(), zeros(v))).collect();
        let second = params.iter().map(|(k, v)| (k.to_string(), zeros(v))).collect();
        Self { config, first, second, step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One bias-corrected Adam update. `grads` must carry exactly the keys of `params`,
    /// each with the matching shape. Parameters move against the gradient.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &BTreeMap<String, Matrix>) -> Result<()> {
        for name in grads.keys() {
            if params.get(name).is_none() {
                return contract(format!("gradient for unknown parameter '{name}'"));
            }
        }
        for (name, value) in params.iter() {
            match grads.get(name) {
                None => return contract(format!("missing gradient for parameter '{name}'")),
                Some(g) if g.shape() != value.shape() => {
                    return contract(format!(
                        "gradient for '{name}' has shape {:?}, parameter has {:?}",
                        g.shape(),
                        value.shape()
                    ))
                }
                _ => {}
            }
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let g = &grads[&name];
            let m = self.first.get_mut(&name).expect("moment arrays mirror parameters");
            let v = self.second.get_mut(&name).expect("moment arrays mirror parameters");
            let p = params.get_mut(&name).expect("checked above");
            for (((p, m), v), &g) in p.data_mut().iter_mut().zip(m.data_mut()).zip(v.data_mut()).zip(g.data()) {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_set(w: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("w", Matrix::scalar(w)).unwrap();
        p
    }

    fn grad(g: f64) -> BTreeMap<String, Matrix> {
        BTreeMap::from([("w".to_string(), Matrix::scalar(g))])
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let mut p = scalar_set(1.5);
        let mut s = AdamState::new(&p, AdamConfig::default());
        s.step(&mut p, &grad(0.0)).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 1.5);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = scalar_set(0.0);
        let mut s = AdamState::new(&p, AdamConfig { lr: 0.1, ..Default::default() });
        s.step(&mut p, &grad(1.0)).unwrap();
        let w = p.get("w").unwrap().item();
        assert!(w < 0.0);
        // bias-corrected: m̂ = 1, v̂ = 1, so Δ = -lr / (1 + eps)
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn mismatched_keys_are_rejected() {
        let mut p = scalar_set(0.0);
        let mut s = AdamState::new(&p, AdamConfig::default());
        assert!(s.step(&mut p, &BTreeMap::new()).is_err());
        let mut extra = grad(1.0);
        extra.insert("b".into(), Matrix::scalar(0.0));
        assert!(s.step(&mut p, &extra).is_err());
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn converges_on_a_quadratic() {
        let mut p = scalar_set(0.0);
        let mut s = AdamState::new(&p, AdamConfig { lr: 0.1, ..Default::default() });
        let mut losses = Vec::new();
        for _ in 0..50 {
            let w = p.get("w").unwrap().item();
            losses.push((w - 3.0).powi(2));
            s.step(&mut p, &grad(2.0 * (w - 3.0))).unwrap();
        }
        let w = p.get("w").unwrap().item();
        assert!((w - 3.0).abs() < 0.5, "w = {w}");
        let windows: Vec<f64> = losses.chunks(10).map(|c| c.iter().sum::<f64>() / c.len() as f64).collect();
        assert!(windows.windows(2).all(|w| w[1] < w[0]), "{windows:?}");
    }
}
