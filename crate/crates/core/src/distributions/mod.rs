//! Diagonal Gaussians, Gaussian mixtures, Laplace likelihoods, and the divergences between them.

pub mod batched;
mod divergence;
mod gaussian;
mod rng;

pub use divergence::{
    draw_bundle_noise, js_divergence, js_divergence_with_noise, kl_to_mixture, kl_to_mixture_with_noise,
};
pub use gaussian::{
    gaussian_fixed_log_prob, kl_gaussian, product_of_gaussians, DiagonalGaussian, GaussianMixture,
    LaplaceLikelihood, MIN_STDDEV,
};
pub use rng::{RngState, RngStream};
