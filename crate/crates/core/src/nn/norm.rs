//! Fused normalisation ops over the last (channel) axis.

use super::graph::Var;
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Per-channel batch statistics returned alongside a training-mode batch norm.
pub struct BatchStats<T> {
    pub mean: Tensor<T>,
    /// Unbiased variance, as used for running-average updates.
    pub var_unbiased: Tensor<T>,
}

impl<'g, T: Real> Var<'g, T> {
    /// Batch normalisation with statistics over every axis but the last.
    pub fn batch_norm_train(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        eps: f64,
    ) -> Result<(Var<'g, T>, BatchStats<T>)> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&0);
        if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "batch_norm",
                format!("input {:?}, gamma {:?}", x.shape(), gamma.shape()),
            ));
        }
        let m = x.numel() / c;
        if m < 2 {
            return Err(Error::shape("batch_norm", "need at least 2 values per channel"));
        }
        let xd = x.data();
        let mut mean = vec![0.0f64; c];
        for row in xd.chunks(c) {
            for (a, &v) in mean.iter_mut().zip(row) {
                *a += v.to_f64c();
            }
        }
        mean.iter_mut().for_each(|a| *a /= m as f64);
        let mut var = vec![0.0f64; c];
        for row in xd.chunks(c) {
            for ((a, &v), &mu) in var.iter_mut().zip(row).zip(&mean) {
                let d = v.to_f64c() - mu;
                *a += d * d;
            }
        }
        let var_b: Vec<f64> = var.iter().map(|v| v / m as f64).collect();
        let inv_std: Vec<T> = var_b.iter().map(|v| T::of(1.0 / (v + eps).sqrt())).collect();
        let mean_t: Vec<T> = mean.iter().map(|&v| T::of(v)).collect();
        let mut xhat = vec![T::zero(); x.numel()];
        for (xr, hr) in xd.chunks(c).zip(xhat.chunks_mut(c)) {
            for j in 0..c {
                hr[j] = (xr[j] - mean_t[j]) * inv_std[j];
            }
        }
        let gv = gamma.value();
        let bv = beta.value();
        let mut y = vec![T::zero(); x.numel()];
        for (yr, hr) in y.chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                yr[j] = hr[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let stats = BatchStats {
            mean: Tensor::new(&[c], mean_t)?,
            var_unbiased: Tensor::new(
                &[c],
                var.iter().map(|v| T::of(v / (m - 1) as f64)).collect(),
            )?,
        };
        let shape = x.shape().to_vec();
        let y = Tensor::new(&shape, y)?;
        let out = self.g.record(y, &[self, gamma, beta], move |go, needs| {
            let gd = go.data();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gh = vec![T::zero(); c];
            for (gr, hr) in gd.chunks(c).zip(xhat.chunks(c)) {
                for j in 0..c {
                    sum_g[j] += gr[j];
                    sum_gh[j] += gr[j] * hr[j];
                }
            }
            let gx = needs[0].then(|| {
                let mf = T::of(m as f64);
                let mut gx = vec![T::zero(); gd.len()];
                for ((xr, gr), hr) in gx.chunks_mut(c).zip(gd.chunks(c)).zip(xhat.chunks(c)) {
                    for j in 0..c {
                        xr[j] = gv.data()[j] * inv_std[j] / mf
                            * (mf * gr[j] - sum_g[j] - hr[j] * sum_gh[j]);
                    }
                }
                Tensor::new(&shape, gx).expect("shape")
            });
            vec![
                gx,
                needs[1].then(|| Tensor::new(&[c], sum_gh.clone()).expect("shape")),
                needs[2].then(|| Tensor::new(&[c], sum_g.clone()).expect("shape")),
            ]
        });
        Ok((out, stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(self, gamma: Var<'g, T>, beta: Var<'g, T>, eps: f64) -> Result<Var<'g, T>> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&0);
        if c == 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(
                "layer_norm",
                format!("input {:?}, gamma {:?}", x.shape(), gamma.shape()),
            ));
        }
        let rows = x.numel() / c;
        let mut xhat = vec![T::zero(); x.numel()];
        let mut inv_std = vec![T::zero(); rows];
        for (r, (xr, hr)) in x.data().chunks(c).zip(xhat.chunks_mut(c)).enumerate() {
            let mu = xr.iter().map(|v| v.to_f64c()).sum::<f64>() / c as f64;
            let var = xr.iter().map(|v| (v.to_f64c() - mu).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = T::of(is);
            for (h, &v) in hr.iter_mut().zip(xr) {
                *h = T::of((v.to_f64c() - mu) * is);
            }
        }
        let gv = gamma.value();
        let bv = beta.value();
        let mut y = vec![T::zero(); x.numel()];
        for (yr, hr) in y.chunks_mut(c).zip(xhat.chunks(c)) {
            for j in 0..c {
                yr[j] = hr[j] * gv.data()[j] + bv.data()[j];
            }
        }
        let shape = x.shape().to_vec();
        Ok(self.g.record(Tensor::new(&shape, y)?, &[self, gamma, beta], move |go, needs| {
            let gd = go.data();
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            let mut gx = vec![T::zero(); gd.len()];
            let cf = T::of(c as f64);
            for (r, ((gr, hr), xr)) in gd
                .chunks(c)
                .zip(xhat.chunks(c))
                .zip(gx.chunks_mut(c))
                .enumerate()
            {
                let mut s1 = T::zero();
                let mut s2 = T::zero();
                for j in 0..c {
                    gg[j] += gr[j] * hr[j];
                    gb[j] += gr[j];
                    let dh = gr[j] * gv.data()[j];
                    s1 += dh;
                    s2 += dh * hr[j];
                }
                if needs[0] {
                    for j in 0..c {
                        let dh = gr[j] * gv.data()[j];
                        xr[j] = inv_std[r] * (dh - s1 / cf - hr[j] * s2 / cf);
                    }
                }
            }
            vec![
                needs[0].then(|| Tensor::new(&shape, gx).expect("shape")),
                needs[1].then(|| Tensor::new(&[c], gg).expect("shape")),
                needs[2].then(|| Tensor::new(&[c], gb).expect("shape")),
            ]
        }))
    }
}
