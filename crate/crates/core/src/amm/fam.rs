//! Feature alignment: spatial positions attend to the prior sequence.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct Fam {
    pub row_pos: ParamId,
    pub col_pos: ParamId,
    pub seq_pos: ParamId,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Fam {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        h: usize,
        w: usize,
        c: usize,
        seq_len: usize,
        classes: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let emb = |ps: &mut ParamStore<T>, n: &str, shape: &[usize], rng: &mut R| {
            ps.add(&format!("{name}.{n}"), Tensor::randn(shape, rng).scale(T::of(0.02)))
        };
        let row_pos = emb(ps, "row_pos", &[h, 1, c], rng);
        let col_pos = emb(ps, "col_pos", &[1, w, c], rng);
        let seq_pos = emb(ps, "seq_pos", &[seq_len, dim], rng);
        let o = Linear::new(ps, &format!("{name}.o"), dim, c, false, rng);
        o.zero_init(ps);
        Self {
            row_pos,
            col_pos,
            seq_pos,
            q: Linear::new(ps, &format!("{name}.q"), c, dim, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), classes, dim, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), classes, dim, true, rng),
            o,
            h,
            w,
            c,
        }
    }

    /// `f_s`: `[B,H,W,C]`, `prior`: row-stochastic `[B,L,A]` → `[B,H,W,C]`.
    /// The attention logits carry [`alignment_bias`].
    pub fn forward<'g, T: Real>(&self, f_s: Var<'g, T>, prior: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = f_s.graph();
        let s = f_s.shape();
        let ps = prior.shape();
        if s != [s[0], self.h, self.w, self.c] || ps.len() != 3 || ps[0] != s[0] {
            return Err(Error::shape("fam", format!("features {s:?}, prior {ps:?}")));
        }
        let b = s[0];
        let pos = f_s.add(g.param(self.row_pos)?)?.add(g.param(self.col_pos)?)?;
        let q = self.q.forward(pos)?.reshape(&[b, self.h * self.w, self.q.out_dim])?;
        let k = self.k.forward(prior)?.add(g.param(self.seq_pos)?)?;
        let v = self.v.forward(prior)?;
        let scores = q.matmul_t(k, false, true)?.scale(1.0 / (self.q.out_dim as f64).sqrt());
        let bias = g.constant(alignment_bias::<T>(self.h, self.w, ps[1]));
        let a = scores.add(bias)?.softmax().matmul(v)?.reshape(&[b, self.h, self.w, self.q.out_dim])?;
        f_s.add(self.o.forward(a)?)
    }
}

/// Width of the alignment window, in prior frames.
pub const ALIGN_SIGMA: f64 = 1.0;

/// Fixed logit bias `[1, H·W, L]` favouring the prior frames under each
/// pixel column: `-(i + ½ - (x + ½)·L/W)² / 2σ²`. Recognizer frames tile the
/// text line left to right, so this starts the attention roughly aligned.
pub fn alignment_bias<T: Real>(h: usize, w: usize, frames: usize) -> Tensor<T> {
    let scale = frames as f64 / w as f64;
    let mut data = Vec::with_capacity(h * w * frames);
    for _ in 0..h {
        for x in 0..w {
            let centre = (x as f64 + 0.5) * scale;
            for i in 0..frames {
                let d = i as f64 + 0.5 - centre;
                data.push(T::of(-d * d / (2.0 * ALIGN_SIGMA * ALIGN_SIGMA)));
            }
        }
    }
    Tensor::new(&[1, h * w, frames], data).expect("shape matches data")
}
