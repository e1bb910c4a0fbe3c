//! Reverse-mode differentiation over dense matrices, MLP layers, and Adam.

mod adam;
mod gradcheck;
mod matrix;
pub mod mlp;
mod params;
mod tape;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::finite_diff_check;
pub use matrix::Matrix;
pub use mlp::{apply_mlp, forward_mlp, init_mlp, Activation, LayerSpec};
pub use params::{ArraySpec, ParameterSet};
pub use tape::{logsumexp, Gradients, ParamVars, Tape, Var};
