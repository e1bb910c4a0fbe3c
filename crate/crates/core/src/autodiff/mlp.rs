use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::matrix::Matrix;
use super::params::ParameterSet;
use super::tape::{ParamVars, Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Self::Relu),
            "tanh" => Ok(Self::Tanh),
            "identity" => Ok(Self::Identity),
            other => Err(Error::Config(format!("unknown activation '{other}'"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Relu => "relu",
            Self::Tanh => "tanh",
            Self::Identity => "identity",
        })
    }
}

/// Layer widths from input to output, the hidden activation, and the output activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: Activation,
}

impl LayerSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation) -> Self {
        Self { widths, hidden, output: Activation::Identity }
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len().saturating_sub(1)
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("nonempty widths")
    }
}

pub fn weight_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}.l{layer}.weight")
}

pub fn bias_name(prefix: &str, layer: usize) -> String {
    format!("{prefix}.l{layer}.bias")
}

/// Adds Kaiming-uniform weights (`U(-√(6/fan_in), √(6/fan_in))`) and zero biases
/// for every layer of `spec` under `prefix`.
pub fn init_mlp(params: &mut ParameterSet, prefix: &str, spec: &LayerSpec, rng: &mut impl Rng) -> Result<()> {
    for l in 0..spec.num_layers() {
        let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
        let bound = (6.0 / fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        params.insert(weight_name(prefix, l), Matrix::from_vec(fan_in, fan_out, w))?;
        params.insert(bias_name(prefix, l), Matrix::zeros(1, fan_out))?;
    }
    Ok(())
}

fn activate(tape: &mut Tape, x: Var, act: Activation) -> Var {
    match act {
        Activation::Relu => tape.relu(x),
        Activation::Tanh => tape.tanh(x),
        Activation::Identity => x,
    }
}

/// Records an MLP forward pass over a batch (`n × widths[0]`), returning `n × widths.last()`.
pub fn forward_mlp(tape: &mut Tape, params: &ParamVars, prefix: &str, input: Var, spec: &LayerSpec) -> Result<Var> {
    if spec.widths.len() < 2 {
        return Err(Error::Config(format!("mlp '{prefix}' needs at least an input and an output width")));
    }
    let (_, in_cols) = tape.shape(input);
    if in_cols != spec.widths[0] {
        return Err(Error::Config(format!(
            "mlp '{prefix}' layer 0: input width {in_cols} does not match declared width {}",
            spec.widths[0]
        )));
    }
    let mut h = input;
    for l in 0..spec.num_layers() {
        let (wn, bn) = (weight_name(prefix, l), bias_name(prefix, l));
        let (Some(&w), Some(&b)) = (params.get(&wn), params.get(&bn)) else {
            return Err(Error::Config(format!("mlp '{prefix}' layer {l}: missing parameters '{wn}'/'{bn}'")));
        };
        let want = (spec.widths[l], spec.widths[l + 1]);
        if tape.shape(w) != want || tape.shape(b) != (1, want.1) {
            return Err(Error::Config(format!(
                "mlp '{prefix}' layer {l}: weight {:?} / bias {:?} do not match declared {}→{}",
                tape.shape(w),
                tape.shape(b),
                want.0,
                want.1
            )));
        }
        let z = tape.matmul(h, w);
        let z = tape.add_row(z, b);
        let act = if l + 1 == spec.num_layers() { spec.output } else { spec.hidden };
        h = activate(tape, z, act);
    }
    Ok(h)
}

/// Tape-free forward pass with the same arithmetic as [`forward_mlp`], for inference.
pub fn apply_mlp(params: &ParameterSet, prefix: &str, input: &Matrix, spec: &LayerSpec) -> Result<Matrix> {
    if input.cols() != spec.input_width() {
        return Err(Error::Config(format!(
            "mlp '{prefix}' layer 0: input width {} does not match declared width {}",
            input.cols(),
            spec.input_width()
        )));
    }
    let mut h = input.clone();
    for l in 0..spec.num_layers() {
        let (wn, bn) = (weight_name(prefix, l), bias_name(prefix, l));
        let (Some(w), Some(b)) = (params.get(&wn), params.get(&bn)) else {
            return Err(Error::Config(format!("mlp '{prefix}' layer {l}: missing parameters '{wn}'/'{bn}'")));
        };
        let mut z = h.matmul(w);
        let m = z.cols();
        for row in z.data_mut().chunks_mut(m) {
            for (o, b) in row.iter_mut().zip(b.data()) {
                *o += b;
            }
        }
        let act = if l + 1 == spec.num_layers() { spec.output } else { spec.hidden };
        h = match act {
            Activation::Relu => z.map(|x| x.max(0.0)),
            Activation::Tanh => z.map(f64::tanh),
            Activation::Identity => z,
        };
    }
    Ok(h)
}
