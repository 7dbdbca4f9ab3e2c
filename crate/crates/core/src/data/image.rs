//! RGB float images in `[0,1]`, PNG I/O and resampling.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Channel-last RGB image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != h * w * 3 {
            return Err(Error::shape("image", format!("{h}x{w}x3 vs {} values", data.len())));
        }
        Ok(Self { h, w, data })
    }

    pub fn filled(h: usize, w: usize, rgb: [f32; 3]) -> Self {
        let data = (0..h * w).flat_map(|_| rgb).collect();
        Self { h, w, data }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.w + x) * 3 + c]
    }

    #[inline]
    pub fn at_mut(&mut self, y: usize, x: usize, c: usize) -> &mut f32 {
        &mut self.data[(y * self.w + x) * 3 + c]
    }

    pub fn clamp01(&mut self) {
        self.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    }

    /// ITU-R 601 luma.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks(3)
            .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
            .collect()
    }

    /// Stacks images of identical size into a `[B,H,W,3]` tensor.
    pub fn batch<T: Real>(images: &[&Image]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
        let (h, w) = (first.h, first.w);
        let mut data = Vec::with_capacity(images.len() * h * w * 3);
        for im in images {
            if im.h != h || im.w != w {
                return Err(Error::shape("batch", format!("{}x{} vs {h}x{w}", im.h, im.w)));
            }
            data.extend(im.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::new(&[images.len(), h, w, 3], data)
    }

    /// Splits a `[B,H,W,3]` tensor into images.
    pub fn unbatch<T: Real>(t: &Tensor<T>) -> Result<Vec<Image>> {
        let &[b, h, w, 3] = t.shape() else {
            return Err(Error::shape("unbatch", format!("{:?}", t.shape())));
        };
        Ok(t.data()
            .chunks(h * w * 3)
            .take(b)
            .map(|c| Image {
                h,
                w,
                data: c.iter().map(|v| v.to_f64c() as f32).collect(),
            })
            .collect())
    }

    /// Quantizes to 8-bit RGB (round to nearest).
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn from_rgb8(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(h, w, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.w as u32, self.h as u32, &self.to_rgb8())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut dec = png::Decoder::new(BufReader::new(file));
        dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        let mut reader = dec.read_info().map_err(|e| fmt(e.to_string()))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| fmt("image too large".into()))?;
        let mut buf = vec![0u8; size];
        let info = reader.next_frame(&mut buf).map_err(|e| fmt(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        let px = &buf[..info.buffer_size()];
        let rgb: Vec<u8> = match info.color_type {
            png::ColorType::Rgb => px.to_vec(),
            png::ColorType::Rgba => px.chunks(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
            png::ColorType::Grayscale => px.iter().flat_map(|&g| [g, g, g]).collect(),
            png::ColorType::GrayscaleAlpha => px.chunks(2).flat_map(|p| [p[0], p[0], p[0]]).collect(),
            other => return Err(fmt(format!("unsupported color type {other:?}"))),
        };
        Self::from_rgb8(h, w, &rgb)
    }

    /// Bicubic resampling (Keys kernel, a = -0.5, half-pixel centres, edge clamp).
    pub fn resize_bicubic(&self, oh: usize, ow: usize) -> Image {
        let mut out = Image::filled(oh, ow, [0.0; 3]);
        let sy = self.h as f64 / oh as f64;
        let sx = self.w as f64 / ow as f64;
        let taps = |pos: f64, n: usize| -> [(usize, f64); 4] {
            let f = pos.floor();
            let t = pos - f;
            let mut r = [(0usize, 0.0); 4];
            for (k, slot) in r.iter_mut().enumerate() {
                let i = (f as isize + k as isize - 1).clamp(0, n as isize - 1) as usize;
                *slot = (i, cubic(t - (k as f64 - 1.0)));
            }
            r
        };
        for y in 0..oh {
            let ty = taps((y as f64 + 0.5) * sy - 0.5, self.h);
            for x in 0..ow {
                let tx = taps((x as f64 + 0.5) * sx - 0.5, self.w);
                for c in 0..3 {
                    let mut acc = 0.0;
                    for &(iy, wy) in &ty {
                        for &(ix, wx) in &tx {
                            acc += wy * wx * self.at(iy, ix, c) as f64;
                        }
                    }
                    *out.at_mut(y, x, c) = acc.clamp(0.0, 1.0) as f32;
                }
            }
        }
        out
    }

    /// Averages non-overlapping `f`×`f` blocks.
    pub fn box_downsample(&self, f: usize) -> Image {
        let (oh, ow) = (self.h / f, self.w / f);
        let mut out = Image::filled(oh, ow, [0.0; 3]);
        let inv = 1.0 / (f * f) as f32;
        for y in 0..oh {
            for x in 0..ow {
                for c in 0..3 {
                    let mut s = 0.0;
                    for dy in 0..f {
                        for dx in 0..f {
                            s += self.at(y * f + dy, x * f + dx, c);
                        }
                    }
                    *out.at_mut(y, x, c) = s * inv;
                }
            }
        }
        out
    }

    /// Concatenates images left to right on a white background, top-aligned.
    pub fn hstack(images: &[&Image], gap: usize) -> Image {
        let h = images.iter().map(|i| i.h).max().unwrap_or(0);
        let w = images.iter().map(|i| i.w).sum::<usize>() + gap * images.len().saturating_sub(1);
        let mut out = Image::filled(h, w, [1.0; 3]);
        let mut x0 = 0;
        for im in images {
            for y in 0..im.h {
                for x in 0..im.w {
                    for c in 0..3 {
                        *out.at_mut(y, x0 + x, c) = im.at(y, x, c);
                    }
                }
            }
            x0 += im.w + gap;
        }
        out
    }

    /// Stacks images top to bottom on a white background, left-aligned.
    pub fn vstack(images: &[&Image], gap: usize) -> Image {
        let w = images.iter().map(|i| i.w).max().unwrap_or(0);
        let h = images.iter().map(|i| i.h).sum::<usize>() + gap * images.len().saturating_sub(1);
        let mut out = Image::filled(h, w, [1.0; 3]);
        let mut y0 = 0;
        for im in images {
            for y in 0..im.h {
                let dst = ((y0 + y) * w) * 3;
                out.data[dst..dst + im.w * 3].copy_from_slice(&im.data[y * im.w * 3..(y + 1) * im.w * 3]);
            }
            y0 += im.h + gap;
        }
        out
    }
}

fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

pub(crate) fn write_png(path: &Path, w: u32, h: u32, rgb: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w, h);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let fmt = |e: png::EncodingError| Error::Format {
        path: path.to_path_buf(),
        msg: e.to_string(),
    };
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(rgb).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bicubic_preserves_constant() {
        let im = Image::filled(4, 8, [0.25, 0.5, 0.75]);
        let up = im.resize_bicubic(8, 16);
        assert!(up.data.chunks(3).all(|p| (p[0] - 0.25).abs() < 1e-6 && (p[2] - 0.75).abs() < 1e-6));
    }

    #[test]
    fn box_downsample_averages() {
        let im = Image::new(2, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.5, 0.5, 0.5, 0.5, 0.5, 0.5]).unwrap();
        assert_eq!(im.box_downsample(2).data, vec![0.5, 0.5, 0.5]);
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let im = Image::new(1, 2, vec![0.1, 0.2, 0.3, 0.9, 0.8, 0.7]).unwrap();
        im.save_png(&p).unwrap();
        let back = Image::load_png(&p).unwrap();
        assert!(im.data.iter().zip(&back.data).all(|(a, b)| (a - b).abs() <= 0.5 / 255.0 + 1e-6));
    }
}
