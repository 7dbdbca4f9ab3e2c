//! Differentiable operations on [`Var`]s.
//!
//! Every op computes its forward value eagerly and, when the graph records
//! gradients, registers a closure that maps the output gradient back to its
//! inputs. Elementwise binary ops follow numpy broadcasting.

use super::graph::Var;
use super::tensor::{matmul_into, numel, strides, Real, Tensor};
use crate::error::{Error, Result};

/// `max(x, 0) + log1p(exp(-|x|))`, stable for large |x|.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `tanh(softplus(x))` as `n / (n + 2)` with `n = eˣ(eˣ + 2)`: one exp.
fn tanh_softplus<T: Real>(x: T) -> T {
    if x > T::from(20.0).unwrap() {
        return T::one();
    }
    let e = x.exp();
    let n = e * (e + T::from(2.0).unwrap());
    n / (n + T::from(2.0).unwrap())
}

pub fn mish<T: Real>(x: T) -> T {
    x * tanh_softplus(x)
}

pub fn swish<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

fn mish_grad<T: Real>(x: T) -> T {
    let t = tanh_softplus(x);
    t + x * (T::one() - t * t) * sigmoid(x)
}

fn swish_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s + x * s * (T::one() - s)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` aligned to `out` with zeros on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

enum Layout {
    Same,
    /// input repeats with period `n` over the output (trailing broadcast)
    Trailing(usize),
    General(Vec<usize>),
}

fn layout(input: &[usize], out: &[usize]) -> Layout {
    if input == out {
        return Layout::Same;
    }
    let n = numel(input);
    let off = out.len() - input.len();
    let trailing = input
        .iter()
        .enumerate()
        .skip_while(|(_, &d)| d == 1)
        .all(|(i, &d)| d == out[i + off]);
    if trailing {
        return Layout::Trailing(n);
    }
    Layout::General(aligned_strides(input, out))
}

/// Offsets into the input for each output element (row-major).
fn for_each_offset(out: &[usize], lay: &Layout, mut f: impl FnMut(usize, usize)) {
    let total = numel(out);
    match lay {
        Layout::Same => (0..total).for_each(|i| f(i, i)),
        Layout::Trailing(n) => (0..total).for_each(|i| f(i, i % n)),
        Layout::General(st) => {
            let r = out.len();
            let mut idx = vec![0usize; r];
            let mut off = 0usize;
            for i in 0..total {
                f(i, off);
                for ax in (0..r).rev() {
                    idx[ax] += 1;
                    off += st[ax];
                    if idx[ax] < out[ax] {
                        break;
                    }
                    off -= st[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
        }
    }
}

/// Sums `g` (shaped like the broadcast output) down to `shape`.
fn reduce_to<T: Real>(g: &Tensor<T>, shape: &[usize]) -> Tensor<T> {
    if g.shape() == shape {
        return g.clone();
    }
    let lay = layout(shape, g.shape());
    let mut acc = Tensor::zeros(shape);
    let d = acc.data_mut();
    let gd = g.data();
    for_each_offset(g.shape(), &lay, |i, o| d[o] += gd[i]);
    acc
}

#[derive(Clone, Copy)]
enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl<'g, T: Real> Var<'g, T> {
    fn needs_grad(&self) -> bool {
        self.g.grad_enabled() && self.requires_grad()
    }

    fn unary(self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T) -> Var<'g, T> {
        let x = self.value();
        let y = x.map(f);
        if !self.needs_grad() {
            return self.g.record(y, &[self], |_, _| vec![None]);
        }
        let d = x.zip_map(&y, df);
        self.g
            .record(y, &[self], move |go, _| vec![Some(go.zip_map(&d, |a, b| a * b))])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.unary(|x| -x, |_, _| -T::one())
    }

    pub fn scale(self, s: f64) -> Var<'g, T> {
        let s = T::of(s);
        self.unary(move |x| x * s, move |_, _| s)
    }

    pub fn add_scalar(self, c: f64) -> Var<'g, T> {
        let c = T::of(c);
        self.unary(move |x| x + c, |_, _| T::one())
    }

    pub fn exp(self) -> Var<'g, T> {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.unary(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.unary(|x| x * x, |x, _| x + x)
    }

    /// |x| with subgradient 0 at 0.
    pub fn abs(self) -> Var<'g, T> {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.unary(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.unary(sigmoid, |_, y| y * (T::one() - y))
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn softplus(self) -> Var<'g, T> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    pub fn mish(self) -> Var<'g, T> {
        self.unary(mish, |x, _| mish_grad(x))
    }

    pub fn swish(self) -> Var<'g, T> {
        self.unary(swish, |x, _| swish_grad(x))
    }

    fn binary(self, rhs: Var<'g, T>, op: BinOp) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| {
            Error::shape(
                "broadcast",
                format!("{:?} vs {:?}", a.shape(), b.shape()),
            )
        })?;
        let la = layout(a.shape(), &out_shape);
        let lb = layout(b.shape(), &out_shape);
        let n = numel(&out_shape);
        let f = |x: T, y: T| match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => x / y,
        };
        let mut out = vec![T::zero(); n];
        {
            let (ad, bd) = (a.data(), b.data());
            let mut ai = vec![0usize; n];
            for_each_offset(&out_shape, &la, |i, o| ai[i] = o);
            for_each_offset(&out_shape, &lb, |i, o| out[i] = f(ad[ai[i]], bd[o]));
        }
        let y = Tensor::new(&out_shape, out)?;
        if !(self.needs_grad() || rhs.needs_grad()) {
            return Ok(self.g.record(y, &[self, rhs], |_, _| vec![None, None]));
        }
        let a_shape = a.shape().to_vec();
        let b_shape = b.shape().to_vec();
        Ok(self.g.record(y, &[self, rhs], move |go, needs| {
            let expand = |t: &Tensor<T>, lay: &Layout| -> Vec<T> {
                let mut v = vec![T::zero(); go.numel()];
                let d = t.data();
                for_each_offset(go.shape(), lay, |i, o| v[i] = d[o]);
                v
            };
            let gd = go.data();
            let mk = |v: Vec<T>| Tensor::new(go.shape(), v).expect("shape");
            let (ga, gb) = match op {
                BinOp::Add => (go.clone(), go.clone()),
                BinOp::Sub => (go.clone(), go.map(|x| -x)),
                BinOp::Mul => {
                    let ga = if needs[0] {
                        let bv = expand(&b, &lb);
                        mk(gd.iter().zip(bv).map(|(&g, y)| g * y).collect())
                    } else {
                        go.clone()
                    };
                    let gb = if needs[1] {
                        let av = expand(&a, &la);
                        mk(gd.iter().zip(av).map(|(&g, x)| g * x).collect())
                    } else {
                        go.clone()
                    };
                    (ga, gb)
                }
                BinOp::Div => {
                    let av = expand(&a, &la);
                    let bv = expand(&b, &lb);
                    let ga = mk(gd.iter().zip(&bv).map(|(&g, &y)| g / y).collect());
                    let gb = mk(gd
                        .iter()
                        .zip(av.iter().zip(&bv))
                        .map(|(&g, (&x, &y))| -g * x / (y * y))
                        .collect());
                    (ga, gb)
                }
            };
            vec![
                needs[0].then(|| reduce_to(&ga, &a_shape)),
                needs[1].then(|| reduce_to(&gb, &b_shape)),
            ]
        }))
    }

    pub fn add(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Add)
    }

    pub fn sub(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Sub)
    }

    pub fn mul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Mul)
    }

    pub fn div(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.binary(rhs, BinOp::Div)
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let y = Tensor::scalar(x.sum());
        self.g.record(y, &[self], move |go, _| {
            vec![Some(Tensor::full(&shape, go.item()))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel().max(1);
        self.sum().scale(1.0 / n as f64)
    }

    /// Sum over one axis; the axis is kept with extent 1 when `keepdim`.
    pub fn sum_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let x = self.value();
        if axis >= x.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} of {:?}", x.shape())));
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let d = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut out = vec![T::zero(); outer * inner];
        let xd = x.data();
        for o in 0..outer {
            for j in 0..d {
                let base = (o * d + j) * inner;
                for i in 0..inner {
                    out[o * inner + i] += xd[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        let in_shape = x.shape().to_vec();
        Ok(self.g.record(Tensor::new(&shape, out)?, &[self], move |go, _| {
            let gd = go.data();
            let mut gx = vec![T::zero(); outer * d * inner];
            for o in 0..outer {
                for j in 0..d {
                    let base = (o * d + j) * inner;
                    gx[base..base + inner].copy_from_slice(&gd[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        }))
    }

    pub fn mean_axis(self, axis: usize, keepdim: bool) -> Result<Var<'g, T>> {
        let d = self.shape().get(axis).copied().unwrap_or(1).max(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / d as f64))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'g, T>> {
        let x = self.value();
        let in_shape = x.shape().to_vec();
        let y = (*x).clone().reshape(shape)?;
        Ok(self.g.record(y, &[self], move |go, _| {
            vec![Some(go.clone().reshape(&in_shape).expect("shape"))]
        }))
    }

    pub fn permute(self, axes: &[usize]) -> Result<Var<'g, T>> {
        let y = self.value().permute(axes)?;
        let mut inv = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inv[a] = i;
        }
        Ok(self.g.record(y, &[self], move |go, _| {
            vec![Some(go.permute(&inv).expect("permute"))]
        }))
    }

    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'g, T>> {
        let x = self.value();
        let y = x.narrow(axis, start, len)?;
        let in_shape = x.shape().to_vec();
        Ok(self.g.record(y, &[self], move |go, _| {
            let outer: usize = in_shape[..axis].iter().product();
            let inner: usize = in_shape[axis + 1..].iter().product();
            let d = in_shape[axis];
            let mut gx = vec![T::zero(); numel(&in_shape)];
            let gd = go.data();
            for o in 0..outer {
                let dst = o * d * inner + start * inner;
                let src = o * len * inner;
                gx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
            }
            vec![Some(Tensor::new(&in_shape, gx).expect("shape"))]
        }))
    }

    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Result<Var<'g, T>> {
        let g = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?
            .g;
        let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
        let y = Tensor::concat(&refs, axis)?;
        let sizes: Vec<usize> = vals.iter().map(|v| v.shape()[axis]).collect();
        Ok(g.record(y, parts, move |go, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&s, &need)| {
                    let r = need.then(|| go.narrow(axis, start, s).expect("narrow"));
                    start += s;
                    r
                })
                .collect()
        }))
    }

    /// `op(self) @ op(rhs)` over the last two axes.
    ///
    /// `rhs` may be 2-D (shared across the batch) or carry the same leading
    /// batch axes as `self`.
    pub fn matmul_t(self, rhs: Var<'g, T>, trans_a: bool, trans_b: bool) -> Result<Var<'g, T>> {
        let a = self.value();
        let b = rhs.value();
        let (ar, br) = (a.rank(), b.rank());
        let bad = || {
            Error::shape(
                "matmul",
                format!(
                    "{:?}{} x {:?}{}",
                    a.shape(),
                    if trans_a { "ᵀ" } else { "" },
                    b.shape(),
                    if trans_b { "ᵀ" } else { "" }
                ),
            )
        };
        if ar < 2 || br < 2 {
            return Err(bad());
        }
        let (am, ak) = if trans_a {
            (a.shape()[ar - 1], a.shape()[ar - 2])
        } else {
            (a.shape()[ar - 2], a.shape()[ar - 1])
        };
        let (bk, bn) = if trans_b {
            (b.shape()[br - 1], b.shape()[br - 2])
        } else {
            (b.shape()[br - 2], b.shape()[br - 1])
        };
        if ak != bk {
            return Err(bad());
        }
        let batch_shape = &a.shape()[..ar - 2];
        let batch: usize = batch_shape.iter().product();
        let shared_rhs = br == 2;
        if !shared_rhs && &b.shape()[..br - 2] != batch_shape {
            return Err(bad());
        }
        if shared_rhs && trans_a && batch > 1 {
            return Err(bad());
        }
        let (m, k, n) = (am, ak, bn);
        let mut out = vec![T::zero(); batch * m * n];
        if shared_rhs {
            // rows of all batch items stacked into one product
            matmul_into(a.data(), b.data(), &mut out, batch * m, k, n, trans_a, trans_b, false);
        } else {
            for i in 0..batch {
                matmul_into(
                    &a.data()[i * m * k..(i + 1) * m * k],
                    &b.data()[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    trans_a,
                    trans_b,
                    false,
                );
            }
        }
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        let y = Tensor::new(&shape, out)?;
        Ok(self.g.record(y, &[self, rhs], move |go, needs| {
            let gd = go.data();
            let mut ga = needs[0].then(|| vec![T::zero(); a.numel()]);
            let mut gb = needs[1].then(|| vec![T::zero(); b.numel()]);
            let (reps, mm) = if shared_rhs { (1, batch * m) } else { (batch, m) };
            for i in 0..reps {
                let gi = &gd[i * mm * n..(i + 1) * mm * n];
                let ai = &a.data()[i * mm * k..(i + 1) * mm * k];
                let bi = if shared_rhs {
                    b.data()
                } else {
                    &b.data()[i * k * n..(i + 1) * k * n]
                };
                if let Some(ga) = ga.as_mut() {
                    let dst = &mut ga[i * mm * k..(i + 1) * mm * k];
                    match (trans_a, trans_b) {
                        (false, false) => matmul_into(gi, bi, dst, mm, n, k, false, true, false),
                        (false, true) => matmul_into(gi, bi, dst, mm, n, k, false, false, false),
                        (true, false) => matmul_into(bi, gi, dst, k, n, mm, false, true, false),
                        (true, true) => matmul_into(bi, gi, dst, k, n, mm, true, true, false),
                    }
                }
                if let Some(gb) = gb.as_mut() {
                    let acc = shared_rhs && i > 0;
                    let dst = if shared_rhs {
                        &mut gb[..]
                    } else {
                        &mut gb[i * k * n..(i + 1) * k * n]
                    };
                    match (trans_a, trans_b) {
                        (false, false) => matmul_into(ai, gi, dst, k, mm, n, true, false, acc),
                        (false, true) => matmul_into(gi, ai, dst, n, mm, k, true, false, acc),
                        (true, false) => matmul_into(ai, gi, dst, k, mm, n, false, false, acc),
                        (true, true) => matmul_into(gi, ai, dst, n, mm, k, true, true, acc),
                    }
                }
            }
            vec![
                ga.map(|v| Tensor::new(a.shape(), v).expect("shape")),
                gb.map(|v| Tensor::new(b.shape(), v).expect("shape")),
            ]
        }))
    }

    pub fn matmul(self, rhs: Var<'g, T>) -> Result<Var<'g, T>> {
        self.matmul_t(rhs, false, false)
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'g, T> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            softmax_row(row);
        }
        if !self.needs_grad() {
            return self.g.record(y, &[self], |_, _| vec![None]);
        }
        let yc = y.clone();
        self.g.record(y, &[self], move |go, _| {
            let mut gx = go.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(c).zip(yc.data().chunks(c)) {
                let dot: T = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                for (g, &p) in gr.iter_mut().zip(yr) {
                    *g = p * (*g - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(self) -> Var<'g, T> {
        let x = self.value();
        let c = *x.shape().last().unwrap_or(&1);
        let mut y = (*x).clone();
        for row in y.data_mut().chunks_mut(c.max(1)) {
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        if !self.needs_grad() {
            return self.g.record(y, &[self], |_, _| vec![None]);
        }
        let yc = y.clone();
        self.g.record(y, &[self], move |go, _| {
            let mut gx = go.clone();
            for (gr, yr) in gx.data_mut().chunks_mut(c).zip(yc.data().chunks(c)) {
                let s: T = gr.iter().copied().sum();
                for (g, &ly) in gr.iter_mut().zip(yr) {
                    *g = *g - ly.exp() * s;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Fused affine map over the last axis: `x @ w + b`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Result<Var<'g, T>> {
        let y = self.matmul(w)?;
        match b {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    /// Scaled dot-product attention `softmax(q kᵀ / sqrt(d)) v` over the last
    /// two axes; leading axes are batch axes.
    pub fn attention(q: Var<'g, T>, k: Var<'g, T>, v: Var<'g, T>) -> Result<Var<'g, T>> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        let r = qs.len();
        if r < 2
            || ks.len() != r
            || vs.len() != r
            || qs[r - 1] != ks[r - 1]
            || ks[r - 2] != vs[r - 2]
            || qs[..r - 2] != ks[..r - 2]
            || ks[..r - 2] != vs[..r - 2]
        {
            return Err(Error::shape(
                "attention",
                format!("q {qs:?}, k {ks:?}, v {vs:?}"),
            ));
        }
        let d = qs[r - 1];
        let scores = q.matmul_t(k, false, true)?.scale(1.0 / (d as f64).sqrt());
        scores.softmax().matmul(v)
    }
}

pub(crate) fn softmax_row<T: Real>(row: &mut [T]) {
    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}
