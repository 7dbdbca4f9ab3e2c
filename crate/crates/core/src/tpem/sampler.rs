//! Ancestral (DDPM) and deterministic (DDIM, η = 0) samplers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::denoiser::Denoiser;
use super::schedule::{gaussian, NoiseSchedule};
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};
use crate::seed::derive_seed;

/// Terminal noise `x_T ~ N(0, I)`, drawn per batch item from `(seed, item)`.
pub fn initial_noise<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
    let per: usize = shape[1..].iter().product();
    let mut data = Vec::with_capacity(shape[0] * per);
    for i in 0..shape[0] {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x5eed, i as u64));
        data.extend(gaussian::<T, _>(&shape[1..], &mut rng).into_data());
    }
    Tensor::new(shape, data).expect("shape")
}

fn affine<T: Real>(a: f64, x: &Tensor<T>, b: f64, y: &Tensor<T>) -> Tensor<T> {
    let (a, b) = (T::of(a), T::of(b));
    x.zip_map(y, |u, v| a * u + b * v)
}

/// Ancestral sampling over all `T` steps using the posterior built from `x̂0`.
/// `posterior_noise = false` replaces every posterior draw with its mean.
pub fn ddpm_sample_with<T: Real, D: Denoiser<T> + ?Sized>(
    f: &D,
    p_l: &Tensor<T>,
    sched: &NoiseSchedule,
    seed: u64,
    posterior_noise: bool,
) -> Result<Tensor<T>> {
    let mut x = initial_noise::<T>(p_l.shape(), seed);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xdd, 0));
    for t in (1..=sched.steps).rev() {
        let x0 = f.denoise(&x, p_l, t)?;
        let (c0, ct, var) = sched.posterior(t);
        x = affine(c0, &x0, ct, &x);
        if t > 1 && posterior_noise {
            let z = gaussian::<T, _>(p_l.shape(), &mut rng);
            x = affine(1.0, &x, var.sqrt(), &z);
        }
    }
    finite(x)
}

pub fn ddpm_sample<T: Real, D: Denoiser<T> + ?Sized>(f: &D, p_l: &Tensor<T>, sched: &NoiseSchedule, seed: u64) -> Result<Tensor<T>> {
    ddpm_sample_with(f, p_l, sched, seed, true)
}

/// Deterministic DDIM over `s` steps; for `s = 1` this is exactly `f(x_T, P^l, T)`.
pub fn ddim_sample<T: Real, D: Denoiser<T> + ?Sized>(
    f: &D,
    p_l: &Tensor<T>,
    sched: &NoiseSchedule,
    s: usize,
    seed: u64,
) -> Result<Tensor<T>> {
    let x_t = initial_noise::<T>(p_l.shape(), seed);
    ddim_from(f, x_t, p_l, sched, s)
}

/// DDIM starting from a given `x_T`.
pub fn ddim_from<T: Real, D: Denoiser<T> + ?Sized>(
    f: &D,
    mut x: Tensor<T>,
    p_l: &Tensor<T>,
    sched: &NoiseSchedule,
    s: usize,
) -> Result<Tensor<T>> {
    let steps = sched.ddim_steps(s)?;
    for (i, &t) in steps.iter().enumerate() {
        let x0 = f.denoise(&x, p_l, t)?;
        match steps.get(i + 1) {
            None => return finite(x0),
            Some(&prev) => {
                let ab = sched.alpha_bar_at(t);
                let eps = affine(1.0 / (1.0 - ab).sqrt(), &x, -(ab.sqrt()) / (1.0 - ab).sqrt(), &x0);
                let ab_prev = sched.alpha_bar_at(prev);
                x = affine(ab_prev.sqrt(), &x0, (1.0 - ab_prev).sqrt(), &eps);
            }
        }
    }
    unreachable!("ddim_steps is never empty")
}

/// Runs the first `s - 1` DDIM steps and returns the state and timestep at
/// which the final `x̂0` prediction is made.
pub fn ddim_last_state<T: Real, D: Denoiser<T> + ?Sized>(
    f: &D,
    mut x: Tensor<T>,
    p_l: &Tensor<T>,
    sched: &NoiseSchedule,
    s: usize,
) -> Result<(Tensor<T>, usize)> {
    let steps = sched.ddim_steps(s)?;
    for w in steps.windows(2) {
        let (t, prev) = (w[0], w[1]);
        let x0 = f.denoise(&x, p_l, t)?;
        let ab = sched.alpha_bar_at(t);
        let eps = affine(1.0 / (1.0 - ab).sqrt(), &x, -(ab.sqrt()) / (1.0 - ab).sqrt(), &x0);
        let ab_prev = sched.alpha_bar_at(prev);
        x = affine(ab_prev.sqrt(), &x0, (1.0 - ab_prev).sqrt(), &eps);
    }
    Ok((x, *steps.last().expect("non-empty")))
}

fn finite<T: Real>(x: Tensor<T>) -> Result<Tensor<T>> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite("diffusion sample".into()))
    }
}
