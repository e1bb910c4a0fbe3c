//! Minibatch training with Adam.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Matrix};
use crate::data::MultimodalDataset;
use crate::distributions::RngStream;
use crate::error::{Error, Result};
use crate::model::{MultimodalModel, Noise};
use crate::objective::{check_beta, objective_step, ObjectiveBreakdown};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub beta: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Epochs between trace entries; the final epoch is always logged.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, batch_size: 100, beta: 1.0, adam: AdamConfig::default(), log_every: 10 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta).map_err(|e| Error::Config(e.to_string()))?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log interval must be positive".into()));
        }
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.adam.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub epoch: usize,
    pub step: u64,
    /// Mean of the per-step breakdowns over the epoch.
    pub objective: ObjectiveBreakdown,
}

/// Model plus optimizer state. Steps that produce a non-finite objective or gradient
/// leave the parameters untouched and report a numeric error.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: MultimodalModel,
    pub adam: AdamState,
    pub beta: f64,
}

impl Trainer {
    pub fn new(model: MultimodalModel, adam: AdamConfig, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let adam = AdamState::new(&model.params, adam);
        Ok(Self { model, adam, beta })
    }

    pub fn step_count(&self) -> u64 {
        self.adam.step_count()
    }

    /// One Adam step on a batch with explicit noise.
    pub fn step(&mut self, inputs: &[Matrix], noise: &Noise) -> Result<ObjectiveBreakdown> {
        let (breakdown, grads) = objective_step(&self.model, inputs, self.beta, noise)?;
        if !breakdown.total.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective at step {}", self.step_count() + 1)));
        }
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for '{name}' at step {}", self.step_count() + 1)));
        }
        self.adam.step(&mut self.model.params, &grads)?;
        Ok(breakdown)
    }

    /// One pass over `data` in a shuffled order; noise for step `t` comes from
    /// `rng.split_idx("step", t)`. Returns the mean breakdown.
    pub fn epoch(&mut self, data: &MultimodalDataset, batch_size: usize, rng: &mut RngStream) -> Result<ObjectiveBreakdown> {
        let order = rng.permutation(data.len());
        let mut acc: Option<ObjectiveBreakdown> = None;
        let mut batches = 0usize;
        for idx in order.chunks(batch_size) {
            let inputs = data.batch(idx);
            let noise_rng = rng.split_idx("step", self.step_count() as usize);
            let noise = Noise::draw(&self.model.config, idx.len(), &noise_rng);
            let b = self.step(&inputs, &noise)?;
            batches += 1;
            acc = Some(match acc {
                None => b,
                Some(mut a) => {
                    for (x, y) in a.recon.iter_mut().zip(&b.recon) {
                        *x += y;
                    }
                    a.rate += b.rate;
                    a.total += b.total;
                    a
                }
            });
        }
        let mut mean = acc.ok_or_else(|| Error::Contract("cannot train on an empty dataset".into()))?;
        let k = batches as f64;
        mean.recon.iter_mut().for_each(|x| *x /= k);
        mean.rate /= k;
        mean.total /= k;
        Ok(mean)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Last model with finite parameters.
    pub model: MultimodalModel,
    pub trace: Vec<TraceEntry>,
    pub epochs_completed: usize,
    pub rng: RngStream,
    /// Set when training stopped on a non-finite objective or gradient.
    pub diverged: Option<String>,
}

/// Runs `cfg.epochs` epochs. Divergence stops training early and is reported in
/// the outcome rather than as an error.
pub fn train(model: MultimodalModel, data: &MultimodalDataset, cfg: &TrainConfig, rng: RngStream) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.dims != model.config.input_dims {
        return Err(Error::Validation(format!(
            "dataset dims {:?} do not match model input dims {:?}",
            data.dims, model.config.input_dims
        )));
    }
    let mut rng = rng;
    let mut trainer = Trainer::new(model, cfg.adam, cfg.beta)?;
    let mut trace = Vec::new();
    let mut diverged = None;
    let mut epochs_completed = 0;
    for epoch in 1..=cfg.epochs {
        match trainer.epoch(data, cfg.batch_size, &mut rng) {
            Ok(b) => {
                epochs_completed = epoch;
                if epoch % cfg.log_every == 0 || epoch == cfg.epochs {
                    trace.push(TraceEntry { epoch, step: trainer.step_count(), objective: b });
                }
            }
            Err(Error::Numeric(msg)) => {
                diverged = Some(msg);
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(TrainOutcome { model: trainer.model, trace, epochs_completed, rng, diverged })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::Strategy;
    use crate::data::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelConfig;

    fn tiny_data() -> MultimodalDataset {
        let cfg = SyntheticConfig { n_train: 40, n_test: 10, dims: vec![4, 3], modalities: 2, ..SyntheticConfig::default() };
        generate_synthetic(&cfg).unwrap().0
    }

    fn tiny_model(strategy: Strategy) -> MultimodalModel {
        let mut c = ModelConfig::new(vec![4, 3], strategy);
        c.hidden = vec![8];
        MultimodalModel::init(c, &RngStream::new(0)).unwrap()
    }

    #[test]
    fn training_is_deterministic_and_improves() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 30, batch_size: 10, beta: 0.1, adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() }, log_every: 5 };
        let a = train(tiny_model(Strategy::Mmvm), &data, &cfg, RngStream::new(3)).unwrap();
        let b = train(tiny_model(Strategy::Mmvm), &data, &cfg, RngStream::new(3)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.trace.len(), 6);
        assert_eq!(a.trace[0].step, 20);
        assert!(a.trace.last().unwrap().objective.total > a.trace[0].objective.total);
        assert!(a.diverged.is_none());
    }

    #[test]
    fn beta_zero_trace_has_rate_but_total_is_reconstruction() {
        let data = tiny_data();
        let cfg = TrainConfig { epochs: 3, batch_size: 20, beta: 0.0, log_every: 1, ..TrainConfig::default() };
        let out = train(tiny_model(Strategy::Poe), &data, &cfg, RngStream::new(1)).unwrap();
        for e in &out.trace {
            assert!((e.objective.total - e.objective.recon_sum()).abs() < 1e-9);
        }
    }

    #[test]
    fn divergence_keeps_last_finite_model() {
        let data = tiny_data();
        let model = tiny_model(Strategy::Independent);
        let mut trainer = Trainer::new(model.clone(), AdamConfig::default(), 1.0).unwrap();
        let mut inputs = data.batch(&[0, 1]);
        inputs[0].set(0, 0, f64::NAN);
        let noise = Noise::zeros(&model.config, 2);
        assert!(matches!(trainer.step(&inputs, &noise), Err(Error::Numeric(_))));
        assert_eq!(trainer.model, model);
        assert_eq!(trainer.step_count(), 0);
    }

    #[test]
    fn mismatched_dataset_rejected() {
        let data = tiny_data();
        let mut c = ModelConfig::new(vec![4, 5], Strategy::Mmvm);
        c.hidden = vec![8];
        let model = MultimodalModel::init(c, &RngStream::new(0)).unwrap();
        assert!(matches!(train(model, &data, &TrainConfig::default(), RngStream::new(0)), Err(Error::Validation(_))));
    }
}
