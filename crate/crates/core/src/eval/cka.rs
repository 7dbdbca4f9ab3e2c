//! Linear centered kernel alignment between layer activations.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::image::write_png;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Above this many features a 4-D activation is mean-pooled over its
/// spatial axes before comparison.
pub const MAX_FEATURES: usize = 8192;

/// An `n × p` activation matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Activations {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Activations {
    pub fn new(n: usize, p: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * p {
            return Err(Error::shape("activations", format!("{} values for {n}x{p}", data.len())));
        }
        Ok(Self { n, p, data })
    }

    /// Flattens a `[N, ...]` tap; `[N,H,W,C]` taps wider than
    /// [`MAX_FEATURES`] are reduced to their per-channel spatial mean.
    pub fn from_tap<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let s = t.shape();
        if s.is_empty() {
            return Err(Error::shape("activations", "scalar tap"));
        }
        let n = s[0];
        let p: usize = s[1..].iter().product();
        let d = t.to_f64_vec();
        if p <= MAX_FEATURES || s.len() != 4 {
            return Self::new(n, p, d);
        }
        let c = s[3];
        let hw = s[1] * s[2];
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            for px in 0..hw {
                let row = &d[(i * hw + px) * c..(i * hw + px + 1) * c];
                for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v /= hw as f64);
        Self::new(n, c, out)
    }

    /// Appends the rows of `other` (same feature count).
    pub fn extend(&mut self, other: &Activations) -> Result<()> {
        if other.p != self.p {
            return Err(Error::shape("activations", format!("{} vs {} features", self.p, other.p)));
        }
        self.data.extend_from_slice(&other.data);
        self.n += other.n;
        Ok(())
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let data = rows
            .iter()
            .flat_map(|&r| self.data[r * self.p..(r + 1) * self.p].iter().copied())
            .collect();
        Self { n: rows.len(), p: self.p, data }
    }
}

/// `X_c X_cᵀ` for column-centered X.
fn centered_gram(x: &Activations) -> Vec<f64> {
    let (n, p) = (x.n, x.p);
    let mut c = x.data.clone();
    for j in 0..p {
        let mean = (0..n).map(|i| x.data[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            c[i * p + j] -= mean;
        }
    }
    let mut k = vec![0.0; n * n];
    // SAFETY: the slices hold n*p and n*n elements with the strides below.
    unsafe {
        matrixmultiply::dgemm(
            n, p, n, 1.0,
            c.as_ptr(), p as isize, 1,
            c.as_ptr(), 1, p as isize,
            0.0,
            k.as_mut_ptr(), n as isize, 1,
        );
    }
    k
}

fn frob_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Prepared {
    gram: Vec<f64>,
    norm: f64,
}

fn prepare(x: &Activations, what: &str) -> Result<Prepared> {
    if x.n < 2 {
        return Err(Error::InvalidArgument(format!("{what}: CKA needs at least 2 samples, got {}", x.n)));
    }
    let gram = centered_gram(x);
    let norm = frob_dot(&gram, &gram).sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidArgument(format!("{what}: zero-variance activations, CKA undefined")));
    }
    Ok(Prepared { gram, norm })
}

fn cka_prepared(a: &Prepared, b: &Prepared) -> f64 {
    frob_dot(&a.gram, &b.gram) / (a.norm * b.norm)
}

/// `‖Y_cᵀ X_c‖²_F / (‖X_cᵀ X_c‖_F ‖Y_cᵀ Y_c‖_F)`, evaluated through the
/// `n × n` Gram matrices (`‖Y_cᵀ X_c‖²_F = ⟨X_c X_cᵀ, Y_c Y_cᵀ⟩_F`).
pub fn linear_cka(x: &Activations, y: &Activations) -> Result<f64> {
    if x.n != y.n {
        return Err(Error::shape("linear_cka", format!("{} vs {} samples", x.n, y.n)));
    }
    Ok(cka_prepared(&prepare(x, "x")?, &prepare(y, "y")?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CkaMatrix {
    /// `values[i][j]` = CKA(layer i of A, layer j of B).
    pub values: Vec<Vec<f64>>,
    pub n: usize,
    /// Taps `0..amm_layers` form the AMM group, the rest the SRM group.
    pub amm_layers: usize,
    pub diag_mean: f64,
    pub amm_diag_mean: f64,
    pub srm_diag_mean: f64,
}

impl CkaMatrix {
    pub fn diag(&self) -> Vec<f64> {
        (0..self.values.len()).map(|i| self.values[i][i]).collect()
    }

    /// Writes a heatmap with `cell`-pixel squares; dark is 0, bright is 1.
    pub fn save_heatmap(&self, path: &Path, cell: usize) -> Result<()> {
        let k = self.values.len();
        let side = k * cell;
        let mut rgb = vec![0u8; side * side * 3];
        for (i, row) in self.values.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let c = colormap(v);
                for y in i * cell..(i + 1) * cell {
                    for x in j * cell..(j + 1) * cell {
                        rgb[(y * side + x) * 3..(y * side + x) * 3 + 3].copy_from_slice(&c);
                    }
                }
            }
        }
        write_png(path, side as u32, side as u32, &rgb)
    }
}

fn colormap(v: f64) -> [u8; 3] {
    let t = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    [lerp(20.0, 250.0), lerp(20.0, 230.0), lerp(90.0, 40.0)]
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// All pairwise layer similarities between two tap sets of equal length.
pub fn cka_matrix(a: &[Activations], b: &[Activations], amm_layers: usize) -> Result<CkaMatrix> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("tap count mismatch: {} vs {}", a.len(), b.len())));
    }
    if amm_layers > a.len() {
        return Err(Error::InvalidArgument(format!("{amm_layers} AMM layers of {} taps", a.len())));
    }
    let n = a.first().map_or(0, |x| x.n);
    if a.iter().chain(b).any(|x| x.n != n) {
        return Err(Error::InvalidArgument("all taps must hold the same samples".into()));
    }
    let pa = a
        .iter()
        .enumerate()
        .map(|(i, x)| prepare(x, &format!("model A tap {i}")))
        .collect::<Result<Vec<_>>>()?;
    let pb = b
        .iter()
        .enumerate()
        .map(|(i, x)| prepare(x, &format!("model B tap {i}")))
        .collect::<Result<Vec<_>>>()?;
    let values: Vec<Vec<f64>> = pa.iter().map(|x| pb.iter().map(|y| cka_prepared(x, y)).collect()).collect();
    let diag: Vec<f64> = (0..values.len()).map(|i| values[i][i]).collect();
    Ok(CkaMatrix {
        n,
        amm_layers,
        diag_mean: mean(&diag),
        amm_diag_mean: mean(&diag[..amm_layers]),
        srm_diag_mean: mean(&diag[amm_layers..]),
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pooling_kicks_in_above_limit() {
        let t = Tensor::<f64>::full(&[2, 16, 64, 16], 1.5);
        let a = Activations::from_tap(&t).unwrap();
        assert_eq!((a.n, a.p), (2, 16));
        assert!(a.data.iter().all(|&v| (v - 1.5).abs() < 1e-12));
        let small = Tensor::<f64>::full(&[2, 4, 4, 2], 1.0);
        assert_eq!(Activations::from_tap(&small).unwrap().p, 32);
    }

    #[test]
    fn constant_input_is_an_error() {
        let x = Activations::new(3, 2, vec![1.0; 6]).unwrap();
        let y = Activations::new(3, 2, vec![1.0, 2.0, 3.0, 4.0, 5.0, 7.0]).unwrap();
        assert!(linear_cka(&x, &y).is_err());
    }
}
