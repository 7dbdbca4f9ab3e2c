use crate::error::Result;
use crate::nn::{Real, Var};

/// Raw terms of the diffusion objective.
pub struct DiffusionTerms<'g, T: Real> {
    /// Mean absolute error between `x̂0` and `P^h`.
    pub mae: Var<'g, T>,
    /// CTC of `log_softmax(x̂0)` against the label.
    pub ctc: Var<'g, T>,
}

pub fn diffusion_terms<'g, T: Real>(x0_hat: Var<'g, T>, p_h: Var<'g, T>, labels: &[Vec<usize>]) -> Result<DiffusionTerms<'g, T>> {
    let mae = x0_hat.sub(p_h)?.abs().mean();
    let ctc = x0_hat.log_softmax().ctc_loss(labels)?;
    Ok(DiffusionTerms { mae, ctc })
}

/// `λ₁·MAE + λ₂·CTC`.
pub fn diffusion_loss<'g, T: Real>(
    x0_hat: Var<'g, T>,
    p_h: Var<'g, T>,
    labels: &[Vec<usize>],
    lambda1: f64,
    lambda2: f64,
) -> Result<Var<'g, T>> {
    let d = diffusion_terms(x0_hat, p_h, labels)?;
    d.mae.scale(lambda1).add(d.ctc.scale(lambda2))
}
