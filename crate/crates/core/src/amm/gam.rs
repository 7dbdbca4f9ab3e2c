//! Global attention over dimension-merged strips.

use rand::Rng;

use super::common::{FuseFfn, Qkvo};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, ParamStore, Real, Var};

#[derive(Clone, Debug)]
pub struct Gam {
    pub norm: LayerNorm,
    /// Rows as tokens of dimension `W·C`.
    pub horizontal: Qkvo,
    /// Columns as tokens of dimension `H·C`.
    pub vertical: Qkvo,
    pub tail: FuseFfn,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

/// Each of the `H` rows becomes one token of dimension `W·C`; queries and
/// keys are projected from the merged token, values per pixel.
pub fn merged_row_attention<'g, T: Real>(x: Var<'g, T>, p: &Qkvo) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
    let tokens = x.reshape(&[b, h, w * c])?;
    let q = p.q.forward(tokens)?;
    let k = p.k.forward(tokens)?;
    let v = p.v.forward(x)?.reshape(&[b, h, w * c])?;
    let a = Var::attention(q, k, v)?.reshape(&[b, h, w, c])?;
    p.o.forward(a)
}

pub fn merged_col_attention<'g, T: Real>(x: Var<'g, T>, p: &Qkvo) -> Result<Var<'g, T>> {
    merged_row_attention(x.permute(&[0, 2, 1, 3])?, p)?.permute(&[0, 2, 1, 3])
}

impl Gam {
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
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c),
            horizontal: Qkvo::new(ps, &format!("{name}.h"), w * c, qk_dim, c, rng),
            vertical: Qkvo::new(ps, &format!("{name}.v"), h * c, qk_dim, c, rng),
            tail: FuseFfn::new(ps, name, c, ffn_mult, rng),
            h,
            w,
            c,
        }
    }

    pub fn branches<'g, T: Real>(&self, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != [self.h, self.w, self.c] {
            return Err(Error::shape("gam", format!("{s:?}, expected [B,{},{},{}]", self.h, self.w, self.c)));
        }
        let n = self.norm.forward(x)?;
        Ok((merged_row_attention(n, &self.horizontal)?, merged_col_attention(n, &self.vertical)?))
    }

    /// Branches are un-merged before fusion and FFN.
    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (h, v) = self.branches(x)?;
        self.tail.forward(x, h, v)
    }
}
