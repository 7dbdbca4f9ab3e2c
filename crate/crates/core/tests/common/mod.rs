//! Independent reference implementations shared by the integration tests
//! and the acceptance harness. Everything here is plain loops in f64.
#![allow(dead_code)]

use pean::amm::Qkvo;
use pean::nn::{Linear, ParamStore, Tensor};

/// Negative log-likelihood of `label` by enumerating every frame path,
/// collapsing repeats and dropping blanks (class 0).
pub fn ctc_brute_force(probs: &[f64], frames: usize, classes: usize, label: &[usize]) -> f64 {
    let mut total = 0.0;
    let mut path = vec![0usize; frames];
    loop {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &c in &path {
            if c != prev && c != 0 {
                out.push(c);
            }
            prev = c;
        }
        if out == label {
            total += path.iter().enumerate().map(|(t, &c)| probs[t * classes + c]).product::<f64>();
        }
        // odometer increment
        let mut i = 0;
        while i < frames {
            path[i] += 1;
            if path[i] < classes {
                break;
            }
            path[i] = 0;
            i += 1;
        }
        if i == frames {
            break;
        }
    }
    -total.ln()
}

pub fn weights(ps: &ParamStore<f64>, l: &Linear) -> (Vec<f64>, Vec<f64>) {
    let w = ps.get(l.w).value.data().to_vec();
    let b = l.b.map_or_else(|| vec![0.0; l.out_dim], |b| ps.get(b).value.data().to_vec());
    (w, b)
}

/// `x W + b` with `W` stored `[in, out]` row-major.
pub fn affine(x: &[f64], w: &(Vec<f64>, Vec<f64>)) -> Vec<f64> {
    let out = w.1.len();
    let mut y = w.1.clone();
    for (i, xi) in x.iter().enumerate() {
        for j in 0..out {
            y[j] += xi * w.0[i * out + j];
        }
    }
    y
}

/// Softmax attention of query `i` over the keys for which `allowed(i, j)`.
pub fn masked_attention(q: &[Vec<f64>], k: &[Vec<f64>], v: &[Vec<f64>], allowed: impl Fn(usize, usize) -> bool) -> Vec<Vec<f64>> {
    let d = q[0].len() as f64;
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let scores: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kj)| {
                    if allowed(i, j) {
                        qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / d.sqrt()
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            let mut out = vec![0.0; v[0].len()];
            for (j, ej) in e.iter().enumerate() {
                for (o, vj) in out.iter_mut().zip(&v[j]) {
                    *o += ej / z * vj;
                }
            }
            out
        })
        .collect()
}

/// Pixel-token strip attention over one `[H,W,C]` map treated as `H·W`
/// tokens; `rows` selects same-row (else same-column) masking.
pub fn strip_oracle(ps: &ParamStore<f64>, p: &Qkvo, x: &[f64], h: usize, w: usize, c: usize, rows: bool) -> Vec<f64> {
    let tokens: Vec<&[f64]> = x.chunks(c).collect();
    let (wq, wk, wv, wo) = (weights(ps, &p.q), weights(ps, &p.k), weights(ps, &p.v), weights(ps, &p.o));
    let q: Vec<_> = tokens.iter().map(|t| affine(t, &wq)).collect();
    let k: Vec<_> = tokens.iter().map(|t| affine(t, &wk)).collect();
    let v: Vec<_> = tokens.iter().map(|t| affine(t, &wv)).collect();
    let a = masked_attention(&q, &k, &v, |i, j| if rows { i / w == j / w } else { i % w == j % w });
    let _ = h;
    a.iter().flat_map(|t| affine(t, &wo)).collect()
}

/// Dimension-merged attention: each row (or column) becomes one token of
/// size `W·C` (or `H·C`); values are projected per pixel.
pub fn merged_oracle(ps: &ParamStore<f64>, p: &Qkvo, x: &[f64], h: usize, w: usize, c: usize, rows: bool) -> Vec<f64> {
    let at = |y: usize, xx: usize| &x[(y * w + xx) * c..(y * w + xx + 1) * c];
    let (n, len) = if rows { (h, w) } else { (w, h) };
    let pix = |s: usize, i: usize| if rows { at(s, i) } else { at(i, s) };
    let (wq, wk, wv, wo) = (weights(ps, &p.q), weights(ps, &p.k), weights(ps, &p.v), weights(ps, &p.o));
    let token = |s: usize| -> Vec<f64> { (0..len).flat_map(|i| pix(s, i).to_vec()).collect() };
    let q: Vec<_> = (0..n).map(|s| affine(&token(s), &wq)).collect();
    let k: Vec<_> = (0..n).map(|s| affine(&token(s), &wk)).collect();
    let v: Vec<_> = (0..n).map(|s| (0..len).flat_map(|i| affine(pix(s, i), &wv)).collect()).collect();
    let a = masked_attention(&q, &k, &v, |_, _| true);
    let mut out = vec![0.0; h * w * c];
    for s in 0..n {
        for i in 0..len {
            let y = affine(&a[s][i * c..(i + 1) * c], &wo);
            let (py, px) = if rows { (s, i) } else { (i, s) };
            out[(py * w + px) * c..(py * w + px + 1) * c].copy_from_slice(&y);
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn naive_psnr(a: &[f32], b: &[f32]) -> f64 {
    let mut se = 0.0;
    for i in 0..a.len() {
        let d = a[i] as f64 - b[i] as f64;
        se += d * d;
    }
    let mse = se / a.len() as f64;
    10.0 * (1.0 / mse).log10()
}

fn luma(img: &[f32], i: usize) -> f64 {
    0.299 * img[3 * i] as f64 + 0.587 * img[3 * i + 1] as f64 + 0.114 * img[3 * i + 2] as f64
}

/// SSIM with an explicit 2-D 11×11 Gaussian window evaluated per position.
pub fn naive_ssim(a: &[f32], b: &[f32], h: usize, w: usize) -> f64 {
    let k = 11usize;
    let mut win = [[0.0f64; 11]; 11];
    let mut z = 0.0;
    for (i, row) in win.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *cell = (-(di * di + dj * dj) / (2.0 * 1.5 * 1.5)).exp();
            z += *cell;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for oy in 0..=h - k {
        for ox in 0..=w - k {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (oy + i) * w + ox + j;
                    mx += win[i][j] / z * luma(a, p);
                    my += win[i][j] / z * luma(b, p);
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let p = (oy + i) * w + ox + j;
                    let (dx, dy) = (luma(a, p) - mx, luma(b, p) - my);
                    vx += win[i][j] / z * dx * dx;
                    vy += win[i][j] / z * dy * dy;
                    cxy += win[i][j] / z * dx * dy;
                }
            }
            total += (2.0 * mx * my + c1) * (2.0 * cxy + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Linear CKA in feature space: `‖YcᵀXc‖²_F / (‖XcᵀXc‖_F ‖YcᵀYc‖_F)`.
pub fn naive_cka_features(x: &[f64], y: &[f64], n: usize, px: usize, py: usize) -> f64 {
    let center = |m: &[f64], p: usize| -> Vec<f64> {
        let mut c = m.to_vec();
        for j in 0..p {
            let mean = (0..n).map(|i| m[i * p + j]).sum::<f64>() / n as f64;
            for i in 0..n {
                c[i * p + j] -= mean;
            }
        }
        c
    };
    let (xc, yc) = (center(x, px), center(y, py));
    let cross = |a: &[f64], pa: usize, b: &[f64], pb: usize| -> f64 {
        let mut s = 0.0;
        for i in 0..pa {
            for j in 0..pb {
                let d: f64 = (0..n).map(|r| a[r * pa + i] * b[r * pb + j]).sum();
                s += d * d;
            }
        }
        s
    };
    cross(&yc, py, &xc, px) / (cross(&xc, px, &xc, px).sqrt() * cross(&yc, py, &yc, py).sqrt())
}

/// HSIC form: `tr(K H L H) / sqrt(tr(K H K H) tr(L H L H))` with an explicit
/// centering matrix and uncentered linear kernels.
pub fn naive_cka_hsic(x: &[f64], y: &[f64], n: usize, px: usize, py: usize) -> f64 {
    let gram = |m: &[f64], p: usize| -> Vec<f64> {
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = (0..p).map(|f| m[i * p + f] * m[j * p + f]).sum();
            }
        }
        k
    };
    let hmat: Vec<f64> = (0..n * n)
        .map(|ij| if ij / n == ij % n { 1.0 } else { 0.0 } - 1.0 / n as f64)
        .collect();
    let mm = |a: &[f64], b: &[f64]| -> Vec<f64> {
        let mut c = vec![0.0; n * n];
        for i in 0..n {
            for k in 0..n {
                for j in 0..n {
                    c[i * n + j] += a[i * n + k] * b[k * n + j];
                }
            }
        }
        c
    };
    let tr = |a: &[f64]| (0..n).map(|i| a[i * n + i]).sum::<f64>();
    let (k, l) = (gram(x, px), gram(y, py));
    let (kh, lh) = (mm(&k, &hmat), mm(&l, &hmat));
    let hsic = |a: &[f64], b: &[f64]| tr(&mm(a, b));
    hsic(&kh, &lh) / (hsic(&kh, &kh) * hsic(&lh, &lh)).sqrt()
}

pub fn tensor_f64(t: &Tensor<f64>) -> Vec<f64> {
    t.data().to_vec()
}
