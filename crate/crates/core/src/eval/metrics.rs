//! Full-reference image metrics.

use crate::data::Image;
use crate::error::{Error, Result};

fn same_shape(a: &Image, b: &Image, what: &'static str) -> Result<()> {
    if (a.h, a.w) != (b.h, b.w) {
        return Err(Error::shape(what, format!("{}x{} vs {}x{}", a.h, a.w, b.h, b.w)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels; identical images give
/// `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, max_val: f64) -> Result<f64> {
    same_shape(a, b, "psnr")?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - r).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h × w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..k).map(|i| g[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..k).map(|i| g[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity of the luma planes over all valid 11×11
/// Gaussian windows (σ = 1.5, dynamic range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    same_shape(a, b, "ssim")?;
    if a.h < SSIM_WINDOW || a.w < SSIM_WINDOW {
        return Err(Error::shape("ssim", format!("{}x{} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window", a.h, a.w)));
    }
    let (x, y) = (a.gray(), b.gray());
    let (h, w) = (a.h, a.w);
    let g = gaussian_window();
    let prod = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(&x, h, w, &g);
    let my = filter_valid(&y, h, w, &g);
    let mxx = filter_valid(&prod(&x, &x), h, w, &g);
    let myy = filter_valid(&prod(&y, &y), h, w, &g);
    let mxy = filter_valid(&prod(&x, &y), h, w, &g);
    let (c1, c2) = (K1 * K1, K2 * K2);
    let n = mx.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (ux, uy) = (mx[i], my[i]);
            let vx = mxx[i] - ux * ux;
            let vy = myy[i] - uy * uy;
            let cxy = mxy[i] - ux * uy;
            ((2.0 * ux * uy + c1) * (2.0 * cxy + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_is_normalised() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn psnr_unit_difference_is_zero_db() {
        let a = Image::filled(4, 4, [0.0; 3]);
        let b = Image::filled(4, 4, [1.0; 3]);
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }
}
