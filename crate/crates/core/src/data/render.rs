//! Synthetic text rendering and the LR degradation pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::font::{ink, GLYPH_H, GLYPH_W};
use super::image::Image;
use crate::charset::Charset;
use crate::error::Result;

pub const HR_H: usize = 32;
pub const HR_W: usize = 128;
pub const LR_H: usize = 16;
pub const LR_W: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    /// Gaussian blur sigma (HR pixels) applied before downsampling.
    pub fn blur_sigma(self) -> f64 {
        match self {
            Difficulty::Easy => 0.5,
            Difficulty::Medium => 1.0,
            Difficulty::Hard => 1.8,
        }
    }

    pub fn noise_std(self) -> f64 {
        match self {
            Difficulty::Easy => 0.01,
            Difficulty::Medium => 0.02,
            Difficulty::Hard => 0.04,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

/// Appearance and degradation parameters for one rendered pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderStyle {
    /// Glyph size as a fraction of the largest size that fits the canvas.
    pub font_scale: f64,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
    pub blur_sigma: f64,
    pub noise_std: f64,
    /// Horizontal shear (x offset per unit of height, from the baseline).
    pub shear: f64,
    pub difficulty: Difficulty,
}

impl RenderStyle {
    /// Degradation fixed by `difficulty`; colours and geometry defaults.
    pub fn for_difficulty(difficulty: Difficulty) -> Self {
        Self {
            font_scale: 0.9,
            fg: [0.1, 0.1, 0.1],
            bg: [0.9, 0.9, 0.9],
            blur_sigma: difficulty.blur_sigma(),
            noise_std: difficulty.noise_std(),
            shear: 0.0,
            difficulty,
        }
    }

    /// Random colours (with a minimum luminance contrast), scale and mild shear.
    pub fn sample<R: Rng + ?Sized>(difficulty: Difficulty, rng: &mut R) -> Self {
        let lum = |c: &[f32; 3]| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        let (fg, bg) = loop {
            let fg: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
            let bg: [f32; 3] = std::array::from_fn(|_| rng.random::<f32>());
            if (lum(&fg) - lum(&bg)).abs() >= 0.4 {
                break (fg, bg);
            }
        };
        Self {
            font_scale: rng.random_range(0.75..=1.0),
            fg,
            bg,
            shear: rng.random_range(-0.15..=0.15),
            ..Self::for_difficulty(difficulty)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextImagePair {
    pub lr: Image,
    pub hr: Image,
    pub text: String,
    pub difficulty: Difficulty,
}

const SUPERSAMPLE: usize = 4;

/// Renders `text` crisply at HR size and derives the LR image.
///
/// Deterministic in `(text, style, seed)`; the seed drives the placement
/// jitter and the sensor noise.
pub fn render_pair(text: &str, style: &RenderStyle, seed: u64) -> Result<TextImagePair> {
    Charset::default().encode(text)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hr = render_hr(text, style, &mut rng);
    let lr = degrade(&hr, style.blur_sigma, style.noise_std, &mut rng);
    Ok(TextImagePair {
        lr,
        hr,
        text: text.to_string(),
        difficulty: style.difficulty,
    })
}

fn render_hr<R: Rng + ?Sized>(text: &str, style: &RenderStyle, rng: &mut R) -> Image {
    let chars: Vec<char> = text.chars().collect();
    // advance of 6 cells per glyph, no trailing gap
    let cells_w = (chars.len() * (GLYPH_W + 1) - 1) as f64;
    let margin = 4.0;
    let fit = ((HR_W as f64 - 2.0 * margin) / cells_w).min((HR_H as f64 - 2.0 * margin) / GLYPH_H as f64);
    let cell = fit * style.font_scale.clamp(0.1, 1.0);
    let (tw, th) = (cells_w * cell, GLYPH_H as f64 * cell);
    let slack_x = (HR_W as f64 - tw - 2.0 * margin).max(0.0);
    let slack_y = (HR_H as f64 - th - 2.0 * margin).max(0.0);
    let x0 = margin + rng.random::<f64>() * slack_x;
    let y0 = margin + rng.random::<f64>() * slack_y;

    let mut img = Image::filled(HR_H, HR_W, style.bg);
    let step = 1.0 / SUPERSAMPLE as f64;
    for y in 0..HR_H {
        for x in 0..HR_W {
            let mut hits = 0usize;
            for sy in 0..SUPERSAMPLE {
                for sx in 0..SUPERSAMPLE {
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    let gy = (py - y0) / cell;
                    // shear around the baseline
                    let gx = (px - x0 + style.shear * (py - y0 - th)) / cell;
                    if gy < 0.0 || gx < 0.0 {
                        continue;
                    }
                    let (row, colf) = (gy as usize, gx as usize);
                    let slot = colf / (GLYPH_W + 1);
                    let col = colf % (GLYPH_W + 1);
                    if slot < chars.len() && ink(chars[slot], row, col) {
                        hits += 1;
                    }
                }
            }
            if hits > 0 {
                let a = hits as f32 / (SUPERSAMPLE * SUPERSAMPLE) as f32;
                for c in 0..3 {
                    *img.at_mut(y, x, c) = style.bg[c] * (1.0 - a) + style.fg[c] * a;
                }
            }
        }
    }
    img
}

/// Gaussian blur (HR pixels) → 2× box downsampling → additive Gaussian noise → clamp.
pub fn degrade<R: Rng + ?Sized>(hr: &Image, sigma: f64, noise_std: f64, rng: &mut R) -> Image {
    let blurred = if sigma > 0.0 {
        gaussian_blur(hr, sigma)
    } else {
        hr.clone()
    };
    let mut lr = blurred.box_downsample(2);
    if noise_std > 0.0 {
        let n = Normal::new(0.0, noise_std).expect("positive std");
        for v in lr.data.iter_mut() {
            *v += n.sample(rng) as f32;
        }
    }
    lr.clamp01();
    lr
}

/// Separable Gaussian blur with radius `ceil(3σ)` and edge replication.
pub fn gaussian_blur(img: &Image, sigma: f64) -> Image {
    let r = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let pass = |src: &Image, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..src.h {
            for x in 0..src.w {
                for c in 0..3 {
                    let mut acc = 0.0;
                    for (j, &kw) in k.iter().enumerate() {
                        let d = j as isize - r;
                        let (yy, xx) = if horizontal {
                            (y, (x as isize + d).clamp(0, src.w as isize - 1) as usize)
                        } else {
                            ((y as isize + d).clamp(0, src.h as isize - 1) as usize, x)
                        };
                        acc += kw * src.at(yy, xx, c) as f64;
                    }
                    *out.at_mut(y, x, c) = acc as f32;
                }
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes_and_range() {
        let p = render_pair("abc123", &RenderStyle::for_difficulty(Difficulty::Hard), 1).unwrap();
        assert_eq!((p.hr.h, p.hr.w, p.lr.h, p.lr.w), (HR_H, HR_W, LR_H, LR_W));
        assert!(p.lr.data.iter().chain(&p.hr.data).all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn text_is_inked() {
        let st = RenderStyle::for_difficulty(Difficulty::Easy);
        let p = render_pair("w", &st, 0).unwrap();
        let dark = p.hr.data.chunks(3).filter(|px| px[0] < 0.5).count();
        assert!(dark > 20, "{dark}");
    }

    #[test]
    fn rejects_bad_text() {
        let st = RenderStyle::for_difficulty(Difficulty::Easy);
        assert!(render_pair("A", &st, 0).is_err());
        assert!(render_pair(&"a".repeat(26), &st, 0).is_err());
    }
}
