//! Diffusion-based text prior enhancement.

pub mod denoiser;
pub mod loss;
pub mod sampler;
pub mod schedule;

pub use denoiser::{timestep_encoding, BoundDenoiser, Denoiser, DenoiserMlp};
pub use loss::{diffusion_loss, diffusion_terms, DiffusionTerms};
pub use sampler::{ddim_from, ddim_last_state, ddim_sample, ddpm_sample, ddpm_sample_with, initial_noise};
pub use schedule::{DiffusionConfig, NoiseSchedule};

use crate::nn::{Real, Var};

/// Row-softmax of `x̂0 / τ`. The denoiser regresses `P^h` in probability
/// space, so a plain softmax would flatten it; `τ` restores the sharpness of
/// the recognizer priors.
pub fn enhanced_prior<'g, T: Real>(x0: Var<'g, T>, temperature: f64) -> Var<'g, T> {
    x0.scale(1.0 / temperature).softmax()
}
