//! The multimodal VAE: one MLP encoder and one MLP decoder per modality.

mod checkpoint;

use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint, CheckpointHeader};

use crate::aggregation::{joint_on_tape, nonempty_subsets, JointVar, Strategy};
use crate::autodiff::mlp::weight_name;
use crate::autodiff::{apply_mlp, forward_mlp, init_mlp, Activation, LayerSpec, Matrix, ParamVars, ParameterSet, Tape, Var};
use crate::distributions::batched::{gaussian_log_lik, laplace_log_lik, GaussianVar, LOGVAR_MAX, LOGVAR_MIN};
use crate::distributions::{gaussian_fixed_log_prob, DiagonalGaussian, LaplaceLikelihood, RngStream};
use crate::error::{contract, Error, Result};

/// Describes how weights are initialized; echoed into checkpoint headers.
pub const INIT_SCHEME: &str = "kaiming-uniform(fan_in) weights, zero biases, encoder output-layer weights scaled by 0.1";

const ENCODER_HEAD_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LikelihoodFamily {
    #[serde(rename = "gaussian-fixed-scale")]
    GaussianFixedScale,
    #[serde(rename = "laplace-fixed-scale")]
    LaplaceFixedScale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature dimension of each modality; its length is the modality count.
    pub input_dims: Vec<usize>,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub likelihood: Vec<LikelihoodFamily>,
    pub likelihood_scale: f64,
    pub strategy: Strategy,
    #[serde(default = "default_true")]
    pub poe_prior_expert: bool,
    #[serde(default)]
    pub stop_prior_gradient: bool,
}

fn default_true() -> bool {
    true
}

impl ModelConfig {
    /// Defaults: latent dim 2, two ReLU hidden layers of width 64, Gaussian likelihood with scale 1.
    pub fn new(input_dims: Vec<usize>, strategy: Strategy) -> Self {
        let m = input_dims.len();
        Self {
            input_dims,
            latent_dim: 2,
            hidden: vec![64, 64],
            activation: Activation::Relu,
            likelihood: vec![LikelihoodFamily::GaussianFixedScale; m],
            likelihood_scale: 1.0,
            strategy,
            poe_prior_expert: true,
            stop_prior_gradient: false,
        }
    }

    pub fn num_modalities(&self) -> usize {
        self.input_dims.len()
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_modalities();
        if m == 0 {
            return Err(Error::Config("model needs at least one modality".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be at least 1".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::Config("hidden widths must be nonempty and positive".into()));
        }
        if self.input_dims.contains(&0) {
            return Err(Error::Config("modality dimensions must be positive".into()));
        }
        if self.likelihood.len() != m {
            return Err(Error::Config(format!("{} likelihood families for {m} modalities", self.likelihood.len())));
        }
        if !(self.likelihood_scale > 0.0 && self.likelihood_scale.is_finite()) {
            return Err(Error::Config(format!("likelihood scale must be positive, got {}", self.likelihood_scale)));
        }
        if self.strategy == Strategy::Mopoe {
            nonempty_subsets(m).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    pub fn encoder_spec(&self, m: usize) -> LayerSpec {
        let mut w = vec![self.input_dims[m]];
        w.extend(&self.hidden);
        w.push(2 * self.latent_dim);
        LayerSpec::new(w, self.activation)
    }

    pub fn decoder_spec(&self, m: usize) -> LayerSpec {
        let mut w = vec![self.latent_dim];
        w.extend(&self.hidden);
        w.push(self.input_dims[m]);
        LayerSpec::new(w, self.activation)
    }
}

pub fn encoder_prefix(m: usize) -> String {
    format!("enc{m}")
}

pub fn decoder_prefix(m: usize) -> String {
    format!("dec{m}")
}

/// Number of noise matrices one forward pass consumes.
pub fn noise_slot_count(strategy: Strategy, modalities: usize) -> usize {
    match strategy {
        Strategy::Independent | Strategy::Mmvm | Strategy::Moe => modalities,
        Strategy::Avg | Strategy::Poe => 1,
        Strategy::Mopoe => (1usize << modalities.min(usize::BITS as usize - 1)) - 1,
    }
}

/// Standard-normal noise driving the reparameterized samples of one forward pass:
/// one `n × d` matrix per modality (independent, mmvm), per mixture component (moe, mopoe),
/// or a single one for the joint Gaussian (avg, poe).
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub slots: Vec<Matrix>,
}

impl Noise {
    /// Slot `k` comes from `rng.split_idx("slot", k)`.
    pub fn draw(config: &ModelConfig, rows: usize, rng: &RngStream) -> Self {
        let k = noise_slot_count(config.strategy, config.num_modalities());
        let slots = (0..k).map(|i| rng.split_idx("slot", i).normal_matrix(rows, config.latent_dim)).collect();
        Self { slots }
    }

    /// Slots drawn one after another from `rng`.
    pub fn sample(config: &ModelConfig, rows: usize, rng: &mut RngStream) -> Self {
        let k = noise_slot_count(config.strategy, config.num_modalities());
        Self { slots: (0..k).map(|_| rng.normal_matrix(rows, config.latent_dim)).collect() }
    }

    /// All-zero noise: every sample sits at its distribution's mean.
    pub fn zeros(config: &ModelConfig, rows: usize) -> Self {
        let k = noise_slot_count(config.strategy, config.num_modalities());
        Self { slots: vec![Matrix::zeros(rows, config.latent_dim); k] }
    }
}

/// Tape nodes of one batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub unimodal: Vec<GaussianVar>,
    pub joint: Option<JointVar>,
    /// One latent sample per noise slot.
    pub latents: Vec<Var>,
    /// Per-modality reconstruction log-likelihood, `n × 1`, averaged over mixture components.
    pub recon: Vec<Var>,
    /// Per-modality decoded locations, one per latent sample that reaches that decoder.
    pub locations: Vec<Vec<Var>>,
}

/// Plain-value result of [`MultimodalModel::reconstruct_batch`].
#[derive(Debug, Clone, PartialEq)]
pub struct Reconstruction {
    /// `locations[m][k]`: decoded location of modality `m` from latent sample `k`.
    pub locations: Vec<Vec<Matrix>>,
    /// `log_lik[m][i]`: reconstruction log-likelihood of modality `m` for row `i`.
    pub log_lik: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

impl MultimodalModel {
    pub fn init(config: ModelConfig, rng: &RngStream) -> Result<Self> {
        config.validate()?;
        let mut params = ParameterSet::new();
        for m in 0..config.num_modalities() {
            let enc = config.encoder_spec(m);
            init_mlp(&mut params, &encoder_prefix(m), &enc, &mut rng.split_idx("encoder", m))?;
            let last = weight_name(&encoder_prefix(m), enc.num_layers() - 1);
            let w = params.get(&last).expect("just created").map(|v| v * ENCODER_HEAD_SCALE);
            params.set(&last, w)?;
            init_mlp(&mut params, &decoder_prefix(m), &config.decoder_spec(m), &mut rng.split_idx("decoder", m))?;
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters after checking names and shapes against `config`.
    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let reference = Self::init(config.clone(), &RngStream::new(0))?;
        if reference.params.specs() != params.specs() {
            return Err(Error::Validation("parameter names/shapes do not match the model config".into()));
        }
        Ok(Self { config, params })
    }

    pub fn num_modalities(&self) -> usize {
        self.config.num_modalities()
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn check_modality(&self, m: usize) -> Result<()> {
        if m >= self.num_modalities() {
            return contract(format!("modality index {m} out of range (model has {})", self.num_modalities()));
        }
        Ok(())
    }

    /// M=1 model holding modality `m`'s encoder and decoder, renamed to index 0.
    pub fn select_modality(&self, m: usize) -> Result<Self> {
        self.check_modality(m)?;
        let mut config = self.config.clone();
        config.input_dims = vec![self.config.input_dims[m]];
        config.likelihood = vec![self.config.likelihood[m]];
        let mut params = ParameterSet::new();
        for (from, to) in [(encoder_prefix(m), encoder_prefix(0)), (decoder_prefix(m), decoder_prefix(0))] {
            for (name, value) in self.params.subset(&format!("{from}.")).iter() {
                params.insert(name.replacen(&from, &to, 1), value.clone())?;
            }
        }
        Self::from_parts(config, params)
    }

    /// Encoder `m` on a tape.
    pub fn encode_on_tape(&self, tape: &mut Tape, vars: &ParamVars, m: usize, x: Var) -> Result<GaussianVar> {
        self.check_modality(m)?;
        let d = self.latent_dim();
        let h = forward_mlp(tape, vars, &encoder_prefix(m), x, &self.config.encoder_spec(m))?;
        let mean = tape.slice_cols(h, 0, d);
        let logvar = tape.slice_cols(h, d, 2 * d);
        Ok(GaussianVar::from_mean_logvar(tape, mean, logvar))
    }

    /// Decoder `m` on a tape.
    pub fn decode_on_tape(&self, tape: &mut Tape, vars: &ParamVars, m: usize, z: Var) -> Result<Var> {
        self.check_modality(m)?;
        forward_mlp(tape, vars, &decoder_prefix(m), z, &self.config.decoder_spec(m))
    }

    /// Row-wise reconstruction log-likelihood of `x` under modality `m`'s likelihood at `loc`.
    pub fn log_lik_on_tape(&self, tape: &mut Tape, m: usize, loc: Var, x: Var) -> Var {
        let s = self.config.likelihood_scale;
        match self.config.likelihood[m] {
            LikelihoodFamily::GaussianFixedScale => gaussian_log_lik(tape, loc, x, s),
            LikelihoodFamily::LaplaceFixedScale => laplace_log_lik(tape, loc, x, s),
        }
    }

    /// Strategy-routed forward pass. `inputs[m]` is the `n × D_m` batch of modality `m`.
    ///
    /// independent, mmvm: each modality decodes its own posterior sample.
    /// avg, poe: every modality decodes one sample of the joint Gaussian.
    /// moe, mopoe: one sample per mixture component, each decoded into every modality,
    /// log-likelihoods averaged over components.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, inputs: &[Var], noise: &Noise) -> Result<ForwardPass> {
        let m_count = self.num_modalities();
        if inputs.len() != m_count {
            return contract(format!("expected {m_count} modalities, got {}", inputs.len()));
        }
        let rows = tape.shape(inputs[0]).0;
        for (m, &x) in inputs.iter().enumerate() {
            let (r, c) = tape.shape(x);
            if r != rows || c != self.config.input_dims[m] {
                return contract(format!(
                    "modality {m}: batch is {r}x{c}, expected {rows}x{}",
                    self.config.input_dims[m]
                ));
            }
        }
        let want_slots = noise_slot_count(self.config.strategy, m_count);
        if noise.slots.len() != want_slots {
            return contract(format!("expected {want_slots} noise slots, got {}", noise.slots.len()));
        }

        let unimodal = (0..m_count)
            .map(|m| self.encode_on_tape(tape, vars, m, inputs[m]))
            .collect::<Result<Vec<_>>>()?;
        let joint = joint_on_tape(tape, self.config.strategy, &unimodal, self.config.poe_prior_expert)?;

        let mut latents = Vec::new();
        let mut locations = vec![Vec::new(); m_count];
        let mut recon = Vec::with_capacity(m_count);
        match (self.config.strategy, &joint) {
            (Strategy::Independent | Strategy::Mmvm, _) => {
                for m in 0..m_count {
                    let z = unimodal[m].sample(tape, &noise.slots[m])?;
                    let loc = self.decode_on_tape(tape, vars, m, z)?;
                    recon.push(self.log_lik_on_tape(tape, m, loc, inputs[m]));
                    latents.push(z);
                    locations[m].push(loc);
                }
            }
            (_, Some(JointVar::Gaussian(g))) => {
                let z = g.sample(tape, &noise.slots[0])?;
                for m in 0..m_count {
                    let loc = self.decode_on_tape(tape, vars, m, z)?;
                    recon.push(self.log_lik_on_tape(tape, m, loc, inputs[m]));
                    locations[m].push(loc);
                }
                latents.push(z);
            }
            (_, Some(JointVar::Mixture(components))) => {
                let k = components.len();
                let mut per_modality: Vec<Vec<Var>> = vec![Vec::with_capacity(k); m_count];
                for (c, comp) in components.iter().enumerate() {
                    let z = comp.sample(tape, &noise.slots[c])?;
                    for m in 0..m_count {
                        let loc = self.decode_on_tape(tape, vars, m, z)?;
                        per_modality[m].push(self.log_lik_on_tape(tape, m, loc, inputs[m]));
                        locations[m].push(loc);
                    }
                    latents.push(z);
                }
                for lls in per_modality {
                    let s = tape.add_all(&lls);
                    recon.push(tape.scale(s, 1.0 / k as f64));
                }
            }
            (_, None) => unreachable!("every aggregating strategy builds a joint object"),
        }
        Ok(ForwardPass { unimodal, joint, latents, recon, locations })
    }

    /// Encoder `m` on a single feature vector.
    pub fn encode(&self, m: usize, x: &[f64]) -> Result<DiagonalGaussian> {
        let (mean, std) = self.encode_batch(m, &Matrix::row_vector(x.to_vec()))?;
        DiagonalGaussian::new(mean.into_vec(), std.into_vec())
    }

    /// Encoder `m` over rows of `x`: posterior means and stddevs, `n × d` each.
    pub fn encode_batch(&self, m: usize, x: &Matrix) -> Result<(Matrix, Matrix)> {
        self.check_modality(m)?;
        if x.cols() != self.config.input_dims[m] {
            return contract(format!(
                "modality {m} expects {} features, got {}",
                self.config.input_dims[m],
                x.cols()
            ));
        }
        let d = self.latent_dim();
        let h = apply_mlp(&self.params, &encoder_prefix(m), x, &self.config.encoder_spec(m))?;
        let mean = h.slice_cols(0, d);
        let std = h.slice_cols(d, 2 * d).map(|lv| (0.5 * lv.clamp(LOGVAR_MIN, LOGVAR_MAX)).exp());
        Ok((mean, std))
    }

    /// Decoder `m` location for one latent vector.
    pub fn decode(&self, m: usize, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.decode_batch(m, &Matrix::row_vector(z.to_vec()))?.into_vec())
    }

    pub fn decode_batch(&self, m: usize, z: &Matrix) -> Result<Matrix> {
        self.check_modality(m)?;
        if z.cols() != self.latent_dim() {
            return contract(format!("latent has {} dims, model expects {}", z.cols(), self.latent_dim()));
        }
        apply_mlp(&self.params, &decoder_prefix(m), z, &self.config.decoder_spec(m))
    }

    /// Plain log-likelihood of `x` under modality `m`'s likelihood at `loc`.
    pub fn log_likelihood(&self, m: usize, loc: &[f64], x: &[f64]) -> Result<f64> {
        self.check_modality(m)?;
        let s = self.config.likelihood_scale;
        match self.config.likelihood[m] {
            LikelihoodFamily::GaussianFixedScale => gaussian_fixed_log_prob(loc, s, x),
            LikelihoodFamily::LaplaceFixedScale => LaplaceLikelihood::new(loc.to_vec(), s)?.log_prob(x),
        }
    }

    /// Batched reconstruction with explicit noise, returning plain values.
    pub fn reconstruct_batch(&self, inputs: &[Matrix], noise: &Noise) -> Result<Reconstruction> {
        let mut tape = Tape::new();
        let vars = tape.params(&self.params);
        let xs: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let pass = self.forward(&mut tape, &vars, &xs, noise)?;
        Ok(Reconstruction {
            locations: pass
                .locations
                .iter()
                .map(|locs| locs.iter().map(|&l| tape.value(l).clone()).collect())
                .collect(),
            log_lik: pass.recon.iter().map(|&r| tape.value(r).data().to_vec()).collect(),
        })
    }

    /// Reconstructs one complete multimodal sample. Returns, per modality, the decoded
    /// location (averaged over mixture components for moe/mopoe) and the reconstruction
    /// log-likelihood.
    pub fn reconstruct(&self, sample: &[Vec<f64>], rng: &mut RngStream) -> Result<Vec<(Vec<f64>, f64)>> {
        if sample.len() != self.num_modalities() {
            return contract(format!(
                "sample has {} modalities, model needs all {}",
                sample.len(),
                self.num_modalities()
            ));
        }
        let inputs: Vec<Matrix> = sample.iter().map(|x| Matrix::row_vector(x.clone())).collect();
        let noise = Noise::sample(&self.config, 1, rng);
        let rec = self.reconstruct_batch(&inputs, &noise)?;
        Ok(rec
            .locations
            .iter()
            .zip(&rec.log_lik)
            .map(|(locs, ll)| {
                let k = locs.len() as f64;
                let mut mean = vec![0.0; locs[0].cols()];
                for l in locs {
                    for (a, b) in mean.iter_mut().zip(l.data()) {
                        *a += b / k;
                    }
                }
                (mean, ll[0])
            })
            .collect())
    }

    /// Encode with encoder `from`, sample (or take the mean when `noise` is `None`),
    /// decode with decoder `to`. Rows of `x` are independent samples.
    pub fn conditional_generate_batch(&self, from: usize, to: usize, x: &Matrix, noise: Option<&Matrix>) -> Result<Matrix> {
        self.check_modality(to)?;
        let (mean, std) = self.encode_batch(from, x)?;
        let z = match noise {
            None => mean,
            Some(eps) => {
                if eps.shape() != mean.shape() {
                    return contract(format!("noise shape {:?} does not match {:?}", eps.shape(), mean.shape()));
                }
                let scaled = std.zip_map(eps, |s, e| s * e);
                mean.zip_map(&scaled, |m, s| m + s)
            }
        };
        self.decode_batch(to, &z)
    }

    /// Single-sample conditional generation; `deterministic` uses the posterior mean.
    pub fn conditional_generate(
        &self,
        from: usize,
        to: usize,
        x: &[f64],
        deterministic: bool,
        rng: &mut RngStream,
    ) -> Result<Vec<f64>> {
        let xm = Matrix::row_vector(x.to_vec());
        let out = if deterministic {
            self.conditional_generate_batch(from, to, &xm, None)?
        } else {
            let eps = rng.normal_matrix(1, self.latent_dim());
            self.conditional_generate_batch(from, to, &xm, Some(&eps))?
        };
        Ok(out.into_vec())
    }
}

#[cfg(test)]
mod tests;
