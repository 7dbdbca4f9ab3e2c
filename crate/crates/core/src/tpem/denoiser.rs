//! MLP denoiser predicting `x̂0` from `(x_t, P^l, t)` as a correction to `P^l`.

use rand::Rng;

use crate::charset::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Graph, Linear, ParamStore, Real, Tensor, Var};
use crate::SEQ_LEN;

pub const TIME_DIM: usize = SEQ_LEN;
/// Feature widths through the four blocks.
pub const WIDTHS: [usize; 5] = [NUM_CLASSES, 4 * NUM_CLASSES, 8 * NUM_CLASSES, 4 * NUM_CLASSES, NUM_CLASSES];

#[derive(Clone, Debug)]
struct Block {
    bn: BatchNorm,
    fc: Linear,
    time: Linear,
}

#[derive(Clone, Debug)]
pub struct DenoiserMlp {
    /// Kernel-1 convolution mixing the 52 stacked rows down to 26.
    fuse: Linear,
    blocks: Vec<Block>,
}

/// Sinusoidal encoding of an integer timestep: `[sin(t ω_i)..., cos(t ω_i)...]`.
pub fn timestep_encoding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let w = 1.0 / 10000f64.powf(i as f64 / half as f64);
        out[i] = (t as f64 * w).sin();
        out[half + i] = (t as f64 * w).cos();
    }
    out
}

impl DenoiserMlp {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, rng: &mut R) -> Self {
        let fuse = Linear::new(ps, &format!("{name}.fuse"), 2 * SEQ_LEN, SEQ_LEN, true, rng);
        let blocks = WIDTHS
            .windows(2)
            .enumerate()
            .map(|(i, w)| Block {
                bn: BatchNorm::new(ps, &format!("{name}.block{i}.bn"), SEQ_LEN),
                fc: Linear::new(ps, &format!("{name}.block{i}.fc"), w[0], w[1], true, rng),
                time: Linear::new(ps, &format!("{name}.block{i}.time"), TIME_DIM, SEQ_LEN, true, rng),
            })
            .collect::<Vec<Block>>();
        // the last block starts at zero so x̂0 starts out as P^l
        let last = blocks.last().expect("four blocks");
        last.fc.zero_init(ps);
        last.time.zero_init(ps);
        Self { fuse, blocks }
    }

    /// `x_t`, `p_l`: `[B, L, A]`; one timestep per batch item. Returns `x̂0`.
    pub fn forward<'g, T: Real>(&self, x_t: Var<'g, T>, p_l: Var<'g, T>, t: &[usize]) -> Result<Var<'g, T>> {
        let g = x_t.graph();
        let s = x_t.shape();
        if s.len() != 3 || s[1] != SEQ_LEN || s[2] != NUM_CLASSES || p_l.shape() != s || t.len() != s[0] {
            return Err(Error::shape(
                "denoiser",
                format!("x_t {s:?}, P^l {:?}, {} timesteps", p_l.shape(), t.len()),
            ));
        }
        let b = s[0];
        // [B,52,A] -> rows act as channels of a kernel-1 conv along the class axis
        let stacked = Var::concat(&[x_t, p_l], 1)?.permute(&[0, 2, 1])?;
        let mut h = self.fuse.forward(stacked)?.permute(&[0, 2, 1])?; // [B,L,A]
        let te: Vec<f64> = t.iter().flat_map(|&t| timestep_encoding(t, TIME_DIM)).collect();
        let te = g.constant(Tensor::from_f64(&[b, TIME_DIM], &te)?);
        for blk in &self.blocks {
            // sequence positions are the normalised channels
            let n = blk.bn.forward(h.permute(&[0, 2, 1])?)?.permute(&[0, 2, 1])?;
            let y = blk.fc.forward(n)?.swish();
            let emb = blk.time.forward(te)?.reshape(&[b, SEQ_LEN, 1])?;
            h = y.add(emb)?;
        }
        h.add(p_l)
    }
}

/// Anything that maps `(x_t, P^l, t)` to an `x̂0` estimate.
pub trait Denoiser<T: Real> {
    fn denoise(&self, x_t: &Tensor<T>, p_l: &Tensor<T>, t: usize) -> Result<Tensor<T>>;
}

/// A denoiser network bound to its weights, evaluated with frozen statistics.
pub struct BoundDenoiser<'a, T: Real> {
    pub net: &'a DenoiserMlp,
    pub store: &'a ParamStore<T>,
}

impl<T: Real> Denoiser<T> for BoundDenoiser<'_, T> {
    fn denoise(&self, x_t: &Tensor<T>, p_l: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        let g = Graph::eval(self.store);
        let ts = vec![t; x_t.dim(0)];
        let out = self.net.forward(g.constant(x_t.clone()), g.constant(p_l.clone()), &ts)?;
        Ok((*out.value()).clone())
    }
}

impl<T: Real, F> Denoiser<T> for F
where
    F: Fn(&Tensor<T>, &Tensor<T>, usize) -> Result<Tensor<T>>,
{
    fn denoise(&self, x_t: &Tensor<T>, p_l: &Tensor<T>, t: usize) -> Result<Tensor<T>> {
        self(x_t, p_l, t)
    }
}
