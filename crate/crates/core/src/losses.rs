//! Multi-task objective: diffusion, image (MSE + edge proxy) and text terms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Diffusion MAE.
    pub l1: f64,
    /// Diffusion CTC.
    pub l2: f64,
    /// Image MSE.
    pub l3: f64,
    /// Edge-map L1.
    pub l4: f64,
    /// Auxiliary recognition CTC.
    pub l5: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 1.0,
            l2: 1.0,
            l3: 0.8,
            l4: 75.0,
            l5: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.l2, self.l3, self.l4, self.l5];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::InvalidArgument(format!("loss weights must be finite and >= 0: {all:?}")));
        }
        Ok(())
    }
}

const GRAY: [f64; 3] = [0.299, 0.587, 0.114];
const EDGE_EPS: f64 = 1e-6;

/// Sobel gradient magnitude of the luma channel over the valid interior:
/// `[B,H,W,3]` → `[B,H-2,W-2]`.
pub fn edge_map<'g, T: Real>(img: Var<'g, T>) -> Result<Var<'g, T>> {
    let s = img.shape();
    if s.len() != 4 || s[3] != 3 || s[1] < 3 || s[2] < 3 {
        return Err(Error::shape("edge_map", format!("{s:?}")));
    }
    let (h, w) = (s[1] - 2, s[2] - 2);
    let g = img.graph();
    let weights = g.constant(Tensor::from_f64(&[3, 1], &GRAY)?);
    let z = img.matmul(weights)?.reshape(&s[..3])?;
    let at = |dy: usize, dx: usize| -> Result<Var<'g, T>> { z.narrow(1, dy, h)?.narrow(2, dx, w) };
    // [-1 0 1; -2 0 2; -1 0 1] and its transpose
    let right = at(0, 2)?.add(at(1, 2)?.scale(2.0))?.add(at(2, 2)?)?;
    let left = at(0, 0)?.add(at(1, 0)?.scale(2.0))?.add(at(2, 0)?)?;
    let down = at(2, 0)?.add(at(2, 1)?.scale(2.0))?.add(at(2, 2)?)?;
    let up = at(0, 0)?.add(at(0, 1)?.scale(2.0))?.add(at(0, 2)?)?;
    let gx = right.sub(left)?;
    let gy = down.sub(up)?;
    Ok(gx.square().add(gy.square())?.add_scalar(EDGE_EPS).sqrt())
}

/// [`edge_map`] scaled to unit sum per image, so it reads like a spatial
/// attention distribution: `[B,H,W,3]` → `[B,(H-2)(W-2)]`.
pub fn edge_attention<'g, T: Real>(img: Var<'g, T>) -> Result<Var<'g, T>> {
    let e = edge_map(img)?;
    let s = e.shape();
    let flat = e.reshape(&[s[0], s[1] * s[2]])?;
    flat.div(flat.sum_axis(1, true)?)
}

/// Raw image terms: `(MSE, mean |A(hr) − A(sr)|)` with `A` the
/// [`edge_attention`] map.
pub fn image_terms<'g, T: Real>(sr: Var<'g, T>, hr: Var<'g, T>) -> Result<(Var<'g, T>, Var<'g, T>)> {
    if sr.shape() != hr.shape() {
        return Err(Error::shape("image_loss", format!("{:?} vs {:?}", sr.shape(), hr.shape())));
    }
    let mse = sr.sub(hr)?.square().mean();
    let edge = edge_attention(hr)?.sub(edge_attention(sr)?)?.abs().mean();
    Ok((mse, edge))
}

/// `(λ₃·MSE, λ₄·EdgeL1)`.
pub fn image_loss<'g, T: Real>(sr: Var<'g, T>, hr: Var<'g, T>, l3: f64, l4: f64) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (mse, edge) = image_terms(sr, hr)?;
    Ok((mse.scale(l3), edge.scale(l4)))
}

/// `λ₅ · CTC(log_softmax(logits), labels)`.
pub fn text_loss<'g, T: Real>(logits: Var<'g, T>, labels: &[Vec<usize>], l5: f64) -> Result<Var<'g, T>> {
    Ok(logits.log_softmax().ctc_loss(labels)?.scale(l5))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub raw: f64,
    pub weight: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub terms: Vec<LossTerm>,
    pub total: f64,
}

impl LossReport {
    pub fn get(&self, name: &str) -> Option<&LossTerm> {
        self.terms.iter().find(|t| t.name == name)
    }
}

/// Raw term values of one step; the diffusion pair is absent in pretraining.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RawTerms {
    pub diff: Option<(f64, f64)>,
    pub img: (f64, f64),
    pub txt: f64,
}

/// Weighted sum with the report invariant `total = Σ weighted`.
pub fn total_loss(raw: RawTerms, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let mut items: Vec<(&str, f64, f64)> = Vec::with_capacity(5);
    if let Some((mae, ctc)) = raw.diff {
        items.push(("diff_mae", mae, w.l1));
        items.push(("diff_ctc", ctc, w.l2));
    }
    items.push(("img_mse", raw.img.0, w.l3));
    items.push(("img_edge", raw.img.1, w.l4));
    items.push(("txt_ctc", raw.txt, w.l5));
    if let Some((name, v, _)) = items.iter().find(|(_, v, _)| !v.is_finite()) {
        return Err(Error::NonFinite(format!("loss term {name} = {v}")));
    }
    let terms: Vec<LossTerm> = items
        .into_iter()
        .map(|(name, raw, weight)| LossTerm {
            name: name.to_string(),
            raw,
            weight,
            weighted: weight * raw,
        })
        .collect();
    let total = terms.iter().map(|t| t.weighted).sum();
    Ok(LossReport { terms, total })
}
