//! Local attention: row strips and column strips.

use rand::Rng;

use super::common::{FuseFfn, Qkvo};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, ParamStore, Real, Var};

#[derive(Clone, Debug)]
pub struct Lam {
    pub norm: LayerNorm,
    pub horizontal: Qkvo,
    pub vertical: Qkvo,
    pub tail: FuseFfn,
    pub c: usize,
}

/// Attention within each row of `[B,H,W,C]`: every row is an independent
/// sequence of `W` tokens.
pub fn row_attention<'g, T: Real>(x: Var<'g, T>, p: &Qkvo) -> Result<Var<'g, T>> {
    let s = x.shape();
    let (b, h, w) = (s[0], s[1], s[2]);
    let q = p.q.forward(x)?.reshape(&[b * h, w, p.q.out_dim])?;
    let k = p.k.forward(x)?.reshape(&[b * h, w, p.k.out_dim])?;
    let v = p.v.forward(x)?.reshape(&[b * h, w, p.v.out_dim])?;
    let a = Var::attention(q, k, v)?.reshape(&[b, h, w, p.v.out_dim])?;
    p.o.forward(a)
}

/// Attention within each column: every column is a sequence of `H` tokens.
pub fn col_attention<'g, T: Real>(x: Var<'g, T>, p: &Qkvo) -> Result<Var<'g, T>> {
    row_attention(x.permute(&[0, 2, 1, 3])?, p)?.permute(&[0, 2, 1, 3])
}

impl Lam {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, c: usize, ffn_mult: usize, rng: &mut R) -> Self {
        Self {
            norm: LayerNorm::new(ps, &format!("{name}.norm"), c),
            horizontal: Qkvo::new(ps, &format!("{name}.h"), c, c, c, rng),
            vertical: Qkvo::new(ps, &format!("{name}.v"), c, c, c, rng),
            tail: FuseFfn::new(ps, name, c, ffn_mult, rng),
            c,
        }
    }

    /// Horizontal and vertical branch outputs for `[B,H,W,C]`.
    pub fn branches<'g, T: Real>(&self, x: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.c {
            return Err(Error::shape("lam", format!("{s:?} with {} channels", self.c)));
        }
        let n = self.norm.forward(x)?;
        Ok((row_attention(n, &self.horizontal)?, col_attention(n, &self.vertical)?))
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let (h, v) = self.branches(x)?;
        self.tail.forward(x, h, v)
    }
}
