//! Convolution, pooling and depth-to-space ops on channel-last tensors.

use super::graph::Var;
use super::tensor::{matmul_into, Real, Tensor};
use crate::error::{Error, Result};

fn dims4(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, h, w, c] => Ok((b, h, w, c)),
        _ => Err(Error::shape(op, format!("expected [B,H,W,C], got {shape:?}"))),
    }
}

fn im2col<T: Real>(x: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let row = k * k * c;
    let mut col = vec![T::zero(); b * h * w * row];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let dst = ((bi * h + y) * w + xx) * row;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - p as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let src = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let d = dst + (dy * k + dx) * c;
                        col[d..d + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    col
}

fn col2im<T: Real>(col: &[T], b: usize, h: usize, w: usize, c: usize, k: usize) -> Vec<T> {
    let p = k / 2;
    let row = k * k * c;
    let mut x = vec![T::zero(); b * h * w * c];
    for bi in 0..b {
        for y in 0..h {
            for xx in 0..w {
                let src = ((bi * h + y) * w + xx) * row;
                for dy in 0..k {
                    let sy = y as isize + dy as isize - p as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let sx = xx as isize + dx as isize - p as isize;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let d = ((bi * h + sy as usize) * w + sx as usize) * c;
                        let s = src + (dy * k + dx) * c;
                        for j in 0..c {
                            x[d + j] += col[s + j];
                        }
                    }
                }
            }
        }
    }
    x
}

impl<'g, T: Real> Var<'g, T> {
    /// Stride-1 2-D convolution with "same" zero padding.
    ///
    /// `self`: `[B,H,W,Cin]`, `weight`: `[k*k*Cin, Cout]` laid out as
    /// `(dy, dx, cin)` rows, `bias`: `[Cout]`. `k` must be odd.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, k: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, h, w, c) = dims4(x.shape(), "conv2d")?;
        let wt = weight.value();
        if k % 2 == 0 || wt.rank() != 2 || wt.shape()[0] != k * k * c {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}, kernel {k}", x.shape(), wt.shape()),
            ));
        }
        let cout = wt.shape()[1];
        let y = if k == 1 {
            self.matmul(weight)?
        } else {
            let rows = b * h * w;
            let kk = k * k * c;
            let col = im2col(x.data(), b, h, w, c, k);
            let mut out = vec![T::zero(); rows * cout];
            matmul_into(&col, wt.data(), &mut out, rows, kk, cout, false, false, false);
            let y = Tensor::new(&[b, h, w, cout], out)?;
            let need_w = self.g.grad_enabled() && weight.requires_grad();
            let col = need_w.then_some(col);
            self.g.record(y, &[self, weight], move |go, needs| {
                let gd = go.data();
                let gx = needs[0].then(|| {
                    let mut gcol = vec![T::zero(); rows * kk];
                    matmul_into(gd, wt.data(), &mut gcol, rows, cout, kk, false, true, false);
                    Tensor::new(&[b, h, w, c], col2im(&gcol, b, h, w, c, k)).expect("shape")
                });
                let gw = needs[1].then(|| {
                    let col = col.as_ref().expect("im2col kept for weight grad");
                    let mut gw = vec![T::zero(); kk * cout];
                    matmul_into(col, gd, &mut gw, kk, rows, cout, true, false, false);
                    Tensor::new(&[kk, cout], gw).expect("shape")
                });
                vec![gx, gw]
            })
        };
        match bias {
            Some(bb) => y.add(bb),
            None => Ok(y),
        }
    }

    /// Non-overlapping max pooling with window `(kh, kw)`; trailing rows or
    /// columns that do not fill a window are dropped.
    pub fn max_pool2d(self, kh: usize, kw: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, h, w, c) = dims4(x.shape(), "max_pool2d")?;
        if kh == 0 || kw == 0 || h < kh || w < kw {
            return Err(Error::shape("max_pool2d", format!("{:?} / ({kh},{kw})", x.shape())));
        }
        let (oh, ow) = (h / kh, w / kw);
        let xd = x.data();
        let mut out = vec![T::zero(); b * oh * ow * c];
        let mut arg = vec![0usize; out.len()];
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut best = T::neg_infinity();
                        let mut bi_ = 0;
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let i = ((bi * h + oy * kh + dy) * w + ox * kw + dx) * c + ch;
                                if xd[i] > best {
                                    best = xd[i];
                                    bi_ = i;
                                }
                            }
                        }
                        let o = ((bi * oh + oy) * ow + ox) * c + ch;
                        out[o] = best;
                        arg[o] = bi_;
                    }
                }
            }
        }
        let n_in = x.numel();
        let in_shape = x.shape().to_vec();
        Ok(self.g.record(Tensor::new(&[b, oh, ow, c], out)?, &[self], move |go, _| {
            let mut gx = vec![T::zero(); n_in];
            for (&a, &g) in arg.iter().zip(go.data()) {
                gx[a] += g;
            }
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        }))
    }

    /// Adaptive average pooling of `axis` down to `out_len` bins
    /// (bin `i` covers `floor(i*n/L) .. ceil((i+1)*n/L)`).
    pub fn adaptive_avg_pool(self, axis: usize, out_len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() || out_len == 0 {
            return Err(Error::shape("adaptive_avg_pool", format!("{:?} axis {axis}", x.shape())));
        }
        let n = x.shape()[axis];
        let outer: usize = x.shape()[..axis].iter().product();
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let bins: Vec<(usize, usize)> = (0..out_len)
            .map(|i| ((i * n) / out_len, ((i + 1) * n).div_ceil(out_len)))
            .collect();
        let xd = x.data();
        let mut out = vec![T::zero(); outer * out_len * inner];
        for o in 0..outer {
            for (i, &(s, e)) in bins.iter().enumerate() {
                let inv = T::one() / T::of((e - s) as f64);
                let dst = (o * out_len + i) * inner;
                for j in s..e {
                    let src = (o * n + j) * inner;
                    for q in 0..inner {
                        out[dst + q] += xd[src + q] * inv;
                    }
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape[axis] = out_len;
        let in_shape = x.shape().to_vec();
        Ok(self.g.record(Tensor::new(&shape, out)?, &[self], move |go, _| {
            let gd = go.data();
            let mut gx = vec![T::zero(); outer * n * inner];
            for o in 0..outer {
                for (i, &(s, e)) in bins.iter().enumerate() {
                    let inv = T::one() / T::of((e - s) as f64);
                    let src = (o * out_len + i) * inner;
                    for j in s..e {
                        let dst = (o * n + j) * inner;
                        for q in 0..inner {
                            gx[dst + q] += gd[src + q] * inv;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        }))
    }

    /// Depth-to-space: `[B,H,W,C*r*r] -> [B,H*r,W*r,C]` with
    /// `out[y*r+dy, x*r+dx, c] = in[y, x, c*r*r + dy*r + dx]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, h, w, c) = dims4(x.shape(), "pixel_shuffle")?;
        let perm = shuffle_index(b, h, w, c, r)?;
        let out: Vec<T> = perm.iter().map(|&i| x.data()[i]).collect();
        let y = Tensor::new(&[b, h * r, w * r, c / (r * r)], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.g.record(y, &[self], move |go, _| {
            let mut gx = vec![T::zero(); perm.len()];
            for (&i, &g) in perm.iter().zip(go.data()) {
                gx[i] = g;
            }
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        }))
    }

    /// Space-to-depth, the exact inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let (b, h, w, c) = dims4(x.shape(), "pixel_unshuffle")?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::shape("pixel_unshuffle", format!("{:?} with r={r}", x.shape())));
        }
        let perm = shuffle_index(b, h / r, w / r, c * r * r, r)?;
        let mut out = vec![T::zero(); perm.len()];
        for (o, &i) in perm.iter().enumerate() {
            out[i] = x.data()[o];
        }
        let y = Tensor::new(&[b, h / r, w / r, c * r * r], out)?;
        let in_shape = x.shape().to_vec();
        Ok(self.g.record(y, &[self], move |go, _| {
            let gx: Vec<T> = perm.iter().map(|&i| go.data()[i]).collect();
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        }))
    }
}

/// For each output position of a pixel shuffle, the flat input index it reads.
fn shuffle_index(b: usize, h: usize, w: usize, c: usize, r: usize) -> Result<Vec<usize>> {
    if r == 0 || c % (r * r) != 0 {
        return Err(Error::shape(
            "pixel_shuffle",
            format!("channels {c} not divisible by r^2 = {}", r * r),
        ));
    }
    let co = c / (r * r);
    let (oh, ow) = (h * r, w * r);
    let mut idx = Vec::with_capacity(b * oh * ow * co);
    for bi in 0..b {
        for oy in 0..oh {
            for ox in 0..ow {
                let (y, dy, x, dx) = (oy / r, oy % r, ox / r, ox % r);
                for ch in 0..co {
                    idx.push(((bi * h + y) * w + x) * c + ch * r * r + dy * r + dx);
                }
            }
        }
    }
    Ok(idx)
}

/// Tensor-level pixel shuffle (no graph).
pub fn pixel_shuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let g = super::graph::Graph::<T>::detached(false);
    let v = g.constant(x.clone()).pixel_shuffle(r)?;
    Ok((*v.value()).clone())
}

/// Tensor-level pixel unshuffle (no graph).
pub fn pixel_unshuffle<T: Real>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let g = super::graph::Graph::<T>::detached(false);
    let v = g.constant(x.clone()).pixel_unshuffle(r)?;
    Ok((*v.value()).clone())
}
