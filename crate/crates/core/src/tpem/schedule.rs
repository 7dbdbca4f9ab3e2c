use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Training schedule and inference step count of the prior enhancer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    /// Training timesteps `T`.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    /// DDIM steps `S` at inference (and for the prior used in training).
    pub sampling_steps: usize,
    /// Softmax temperature turning `x̂0` into the prior handed to FAM.
    pub temperature: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
            sampling_steps: 1,
            temperature: 0.1,
        }
    }
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let s = NoiseSchedule::new(self.steps, self.beta_min, self.beta_max)?;
        s.ddim_steps(self.sampling_steps)?;
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::InvalidArgument(format!("prior temperature must be > 0, got {}", self.temperature)));
        }
        Ok(s)
    }
}

/// Linear-β diffusion schedule. Arrays are indexed by `t - 1` for `t ∈ 1..=T`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if steps == 0 || !(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs T >= 1 and 0 < beta_min <= beta_max < 1, got T={steps}, [{beta_min}, {beta_max}]"
            )));
        }
        let beta: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let alpha_bar = alpha
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            steps,
            beta_min,
            beta_max,
            beta,
            alpha,
            alpha_bar,
        })
    }

    fn check_t(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::InvalidArgument(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }

    pub fn beta_at(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// `ᾱ_t`, with `ᾱ_0 = 1`.
    pub fn alpha_bar_at(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    /// Posterior `q(x_{t-1} | x_t, x_0)` as `(coef_x0, coef_xt, variance)`.
    pub fn posterior(&self, t: usize) -> (f64, f64, f64) {
        let (ab, ab_prev, b) = (self.alpha_bar_at(t), self.alpha_bar_at(t - 1), self.beta_at(t));
        let c0 = b * ab_prev.sqrt() / (1.0 - ab);
        let ct = (1.0 - ab_prev) * self.alpha_at(t).sqrt() / (1.0 - ab);
        let var = (1.0 - ab_prev) / (1.0 - ab) * b;
        (c0, ct, var)
    }

    /// Descending, evenly spaced timesteps for `s`-step DDIM, always starting at `T`.
    pub fn ddim_steps(&self, s: usize) -> Result<Vec<usize>> {
        if s == 0 || s > self.steps {
            return Err(Error::InvalidArgument(format!("DDIM steps {s} outside 1..={}", self.steps)));
        }
        Ok((1..=s).rev().map(|k| (k * self.steps).div_ceil(s)).collect())
    }

    /// `x_t = sqrt(ᾱ_t) x0 + sqrt(1 - ᾱ_t) eps`.
    pub fn q_sample<T: Real>(&self, x0: &Tensor<T>, t: usize, eps: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if x0.shape() != eps.shape() {
            return Err(Error::shape("q_sample", format!("{:?} vs {:?}", x0.shape(), eps.shape())));
        }
        let ab = self.alpha_bar_at(t);
        let (a, b) = (T::of(ab.sqrt()), T::of((1.0 - ab).sqrt()));
        Ok(x0.zip_map(eps, |x, e| a * x + b * e))
    }
}

pub fn gaussian<T: Real, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    let n = crate::nn::tensor::numel(shape);
    let data = (0..n).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect();
    Tensor::new(shape, data).expect("shape")
}
