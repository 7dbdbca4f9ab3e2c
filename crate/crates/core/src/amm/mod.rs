//! Feature alignment and the stacked local/global attention modulation.

pub mod common;
pub mod fam;
pub mod gam;
pub mod lam;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use common::{FuseFfn, Qkvo};
pub use fam::{alignment_bias, Fam, ALIGN_SIGMA};
pub use gam::{merged_col_attention, merged_row_attention, Gam};
pub use lam::{col_attention, row_attention, Lam};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore, Real, Var};

#[derive(Clone, Debug)]
pub struct AmmBlock {
    pub proj: Conv2d,
    pub lam: Lam,
    pub gam: Gam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AmmConfig {
    pub blocks: usize,
    pub channels: usize,
    pub gam_qk_dim: usize,
    pub ffn_mult: usize,
}

impl AmmBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        h: usize,
        w: usize,
        c: usize,
        qk_dim: usize,
        ffn_mult: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Conv2d::new(ps, &format!("{name}.proj"), 2 * c, c, 1, true, rng),
            lam: Lam::new(ps, &format!("{name}.lam"), c, ffn_mult, rng),
            gam: Gam::new(ps, &format!("{name}.gam"), h, w, c, qk_dim, ffn_mult, rng),
        }
    }

    /// Returns `(post-LAM, post-GAM)`.
    pub fn forward<'g, T: Real>(&self, prev: Var<'g, T>, f_a: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let loc = self.proj.forward(Var::concat(&[prev, f_a], 3)?)?;
        let l = self.lam.forward(loc)?;
        let o = self.gam.forward(l)?;
        Ok((l, o))
    }
}

/// Runs the block stack from `F^a`; returns the final output and two taps per
/// block (post-LAM, post-GAM).
pub fn amm_forward<'g, T: Real>(f_a: Var<'g, T>, blocks: &[AmmBlock], expected: usize) -> Result<(Var<'g, T>, Vec<Var<'g, T>>)> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("the AMM stack needs at least one block".into()));
    }
    if blocks.len() != expected {
        return Err(Error::InvalidArgument(format!(
            "{} AMM blocks, configuration expects {expected}",
            blocks.len()
        )));
    }
    let mut prev = f_a;
    let mut taps = Vec::with_capacity(2 * blocks.len());
    for b in blocks {
        let (l, o) = b.forward(prev, f_a)?;
        taps.push(l);
        taps.push(o);
        prev = o;
    }
    Ok((prev, taps))
}
