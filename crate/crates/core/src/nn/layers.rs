//! Parameterised layers. Each layer only holds [`ParamId`]s; values live in a
//! [`ParamStore`] so the same layer definition runs at f32 or f64.

use rand::Rng;

use super::graph::{Mode, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let w = ps.add_fan_in(&format!("{name}.weight"), &[in_dim, out_dim], in_dim, rng);
        let b = bias.then(|| ps.add_fan_in(&format!("{name}.bias"), &[out_dim], in_dim, rng));
        Self {
            w,
            b,
            in_dim,
            out_dim,
        }
    }

    /// Zeroes weight and bias (identity-at-init residual branches).
    pub fn zero_init<T: Real>(&self, ps: &mut ParamStore<T>) {
        zero_param(ps, self.w);
        if let Some(b) = self.b {
            zero_param(ps, b);
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let b = self.b.map(|b| g.param(b)).transpose()?;
        x.linear(g.param(self.w)?, b)
    }
}

pub(crate) fn zero_param<T: Real>(ps: &mut ParamStore<T>, id: ParamId) {
    ps.get_mut(id)
        .value
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = T::zero());
}

/// Stride-1 "same" 2-D convolution over `[B,H,W,C]`.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv2d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = kernel * kernel * in_ch;
        let w = ps.add_fan_in(&format!("{name}.weight"), &[fan_in, out_ch], fan_in, rng);
        let b = bias.then(|| ps.add_fan_in(&format!("{name}.bias"), &[out_ch], fan_in, rng));
        Self {
            w,
            b,
            kernel,
            in_ch,
            out_ch,
        }
    }

    pub fn zero_init<T: Real>(&self, ps: &mut ParamStore<T>) {
        zero_param(ps, self.w);
        if let Some(b) = self.b {
            zero_param(ps, b);
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let b = self.b.map(|b| g.param(b)).transpose()?;
        x.conv2d(g.param(self.w)?, b, self.kernel)
    }
}

/// 1-D convolution along the sequence axis of `[B,L,C]`, zero "same" padding.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub kernel: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1d {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        assert!(kernel % 2 == 1, "kernel must be odd");
        let fan_in = kernel * in_ch;
        let w = ps.add_fan_in(&format!("{name}.weight"), &[fan_in, out_ch], fan_in, rng);
        let b = bias.then(|| ps.add_fan_in(&format!("{name}.bias"), &[out_ch], fan_in, rng));
        Self {
            w,
            b,
            kernel,
            in_ch,
            out_ch,
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let s = x.shape();
        if s.len() != 3 || s[2] != self.in_ch {
            return Err(Error::shape("conv1d", format!("input {s:?}, in_ch {}", self.in_ch)));
        }
        let cols = if self.kernel == 1 {
            x
        } else {
            let p = self.kernel / 2;
            let pad = g.constant(Tensor::zeros(&[s[0], p, s[2]]));
            let padded = Var::concat(&[pad, x, pad], 1)?;
            let taps = (0..self.kernel)
                .map(|d| padded.narrow(1, d, s[1]))
                .collect::<Result<Vec<_>>>()?;
            Var::concat(&taps, 2)?
        };
        let b = self.b.map(|b| g.param(b)).transpose()?;
        cols.linear(g.param(self.w)?, b)
    }
}

/// Batch normalisation over the channel (last) axis.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, ch: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), Tensor::ones(&[ch])),
            beta: ps.add(&format!("{name}.beta"), Tensor::zeros(&[ch])),
            running_mean: ps.add_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[ch])),
            running_var: ps.add_buffer(&format!("{name}.running_var"), Tensor::ones(&[ch])),
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let gamma = g.param(self.gamma)?;
        let beta = g.param(self.beta)?;
        match g.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm_train(gamma, beta, self.eps)?;
                let m = T::of(self.momentum);
                let blend = |old: Tensor<T>, new: &Tensor<T>| {
                    old.zip_map(new, |o, n| (T::one() - m) * o + m * n)
                };
                let rm = blend(g.buffer(self.running_mean)?, &stats.mean);
                let rv = blend(g.buffer(self.running_var)?, &stats.var_unbiased);
                g.update_buffer(self.running_mean, rm);
                g.update_buffer(self.running_var, rv);
                Ok(y)
            }
            Mode::Eval => {
                let rm = g.buffer(self.running_mean)?;
                let rv = g.buffer(self.running_var)?;
                let inv = g.constant(rv.map(|v| T::one() / (v + T::of(self.eps)).sqrt()));
                let scale = gamma.mul(inv)?;
                let shift = beta.sub(g.constant(rm).mul(scale)?)?;
                x.mul(scale)?.add(shift)
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Real>(ps: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gamma: ps.add(&format!("{name}.gamma"), Tensor::ones(&[dim])),
            beta: ps.add(&format!("{name}.beta"), Tensor::zeros(&[dim])),
            eps: 1e-5,
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        x.layer_norm(g.param(self.gamma)?, g.param(self.beta)?, self.eps)
    }
}

/// Single-direction LSTM layer over `[B,L,in] -> [B,L,hidden]`, gate order i,f,g,o.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub wx: ParamId,
    pub wh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
    pub reverse: bool,
}

impl Lstm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        reverse: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            wx: ps.add_fan_in(&format!("{name}.wx"), &[in_dim, 4 * hidden], hidden, rng),
            wh: ps.add_fan_in(&format!("{name}.wh"), &[hidden, 4 * hidden], hidden, rng),
            b: ps.add_fan_in(&format!("{name}.bias"), &[4 * hidden], hidden, rng),
            hidden,
            reverse,
        }
    }

    pub fn forward<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let g = x.graph();
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape("lstm", format!("expected [B,L,C], got {s:?}")));
        }
        let (b, len, hd) = (s[0], s[1], self.hidden);
        let xw = x.linear(g.param(self.wx)?, Some(g.param(self.b)?))?;
        let wh = g.param(self.wh)?;
        let mut h = g.constant(Tensor::zeros(&[b, hd]));
        let mut c = g.constant(Tensor::zeros(&[b, hd]));
        let mut outs = vec![None; len];
        let order: Vec<usize> = if self.reverse {
            (0..len).rev().collect()
        } else {
            (0..len).collect()
        };
        for t in order {
            let gates = xw.narrow(1, t, 1)?.reshape(&[b, 4 * hd])?.add(h.matmul(wh)?)?;
            let i = gates.narrow(1, 0, hd)?.sigmoid();
            let f = gates.narrow(1, hd, hd)?.sigmoid();
            let gg = gates.narrow(1, 2 * hd, hd)?.tanh();
            let o = gates.narrow(1, 3 * hd, hd)?.sigmoid();
            c = f.mul(c)?.add(i.mul(gg)?)?;
            h = o.mul(c.tanh())?;
            outs[t] = Some(h.reshape(&[b, 1, hd])?);
        }
        let outs: Vec<Var<'g, T>> = outs.into_iter().map(|o| o.expect("every step")).collect();
        Var::concat(&outs, 1)
    }
}

/// Stack of bidirectional LSTM layers; each layer concatenates both directions.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub layers: Vec<(Lstm, Lstm)>,
}

impl BiLstm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        ps: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        hidden: usize,
        num_layers: usize,
        rng: &mut R,
    ) -> Self {
        let layers = (0..num_layers)
            .map(|l| {
                let d = if l == 0 { in_dim } else { 2 * hidden };
                (
                    Lstm::new(ps, &format!("{name}.l{l}.fwd"), d, hidden, false, rng),
                    Lstm::new(ps, &format!("{name}.l{l}.bwd"), d, hidden, true, rng),
                )
            })
            .collect();
        Self { layers }
    }

    pub fn forward<'g, T: Real>(&self, mut x: Var<'g, T>) -> Result<Var<'g, T>> {
        for (f, b) in &self.layers {
            x = Var::concat(&[f.forward(x)?, b.forward(x)?], 2)?;
        }
        Ok(x)
    }
}
