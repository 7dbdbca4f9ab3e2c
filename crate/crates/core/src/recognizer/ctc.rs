//! Connectionist temporal classification: loss, gradient and greedy decoding.

use crate::charset::BLANK;
use crate::error::{Error, Result};
use crate::nn::{Real, Tensor, Var};

/// Frames needed to emit `label`: one per symbol plus a blank between repeats.
pub fn min_frames(label: &[usize]) -> usize {
    label.len() + label.windows(2).filter(|w| w[0] == w[1]).count()
}

fn check_label(label: &[usize], frames: usize, classes: usize) -> Result<()> {
    if let Some(&c) = label.iter().find(|&&c| c == BLANK || c >= classes) {
        return Err(Error::InvalidArgument(format!("label class {c} is blank or out of range")));
    }
    let needed = min_frames(label);
    if needed > frames {
        return Err(Error::LabelTooLong {
            label: label.len(),
            needed,
            frames,
        });
    }
    Ok(())
}

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Negative log-likelihood of `label` under per-frame log-probabilities
/// `log_probs` (`frames × classes`, row-major) and its gradient with respect
/// to `log_probs`.
pub fn ctc_nll(log_probs: &[f64], frames: usize, classes: usize, label: &[usize]) -> Result<(f64, Vec<f64>)> {
    if log_probs.len() != frames * classes {
        return Err(Error::shape("ctc", format!("{} values for {frames}x{classes}", log_probs.len())));
    }
    check_label(label, frames, classes)?;
    // blank-augmented label: -, l1, -, l2, ..., -
    let ext: Vec<usize> = std::iter::once(BLANK)
        .chain(label.iter().flat_map(|&c| [c, BLANK]))
        .collect();
    let s_len = ext.len();
    let lp = |t: usize, c: usize| log_probs[t * classes + c];
    let ninf = f64::NEG_INFINITY;
    let skip_ok = |s: usize| s >= 2 && ext[s] != BLANK && ext[s] != ext[s - 2];

    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, ext[0]);
    if s_len > 1 {
        alpha[1] = lp(0, ext[1]);
    }
    for t in 1..frames {
        for s in 0..s_len {
            let prev = &alpha[(t - 1) * s_len..t * s_len];
            let mut a = prev[s];
            if s >= 1 {
                a = log_add(a, prev[s - 1]);
            }
            if skip_ok(s) {
                a = log_add(a, prev[s - 2]);
            }
            alpha[t * s_len + s] = if a == ninf { ninf } else { a + lp(t, ext[s]) };
        }
    }
    let mut beta = vec![ninf; frames * s_len];
    let last = (frames - 1) * s_len;
    beta[last + s_len - 1] = lp(frames - 1, ext[s_len - 1]);
    if s_len > 1 {
        beta[last + s_len - 2] = lp(frames - 1, ext[s_len - 2]);
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let next = &beta[(t + 1) * s_len..(t + 2) * s_len];
            let mut b = next[s];
            if s + 1 < s_len {
                b = log_add(b, next[s + 1]);
            }
            if s + 2 < s_len && ext[s + 2] != BLANK && ext[s + 2] != ext[s] {
                b = log_add(b, next[s + 2]);
            }
            beta[t * s_len + s] = if b == ninf { ninf } else { b + lp(t, ext[s]) };
        }
    }
    let mut log_z = alpha[last + s_len - 1];
    if s_len > 1 {
        log_z = log_add(log_z, alpha[last + s_len - 2]);
    }
    if !log_z.is_finite() {
        return Err(Error::NonFinite("ctc log-likelihood".into()));
    }
    // d(-log Z)/d lp[t,c] = -sum_{s: ext[s]=c} exp(alpha+beta-lp-logZ)
    let mut grad = vec![0.0; frames * classes];
    for t in 0..frames {
        for s in 0..s_len {
            let ab = alpha[t * s_len + s] + beta[t * s_len + s];
            if ab == ninf {
                continue;
            }
            let c = ext[s];
            grad[t * classes + c] -= (ab - lp(t, c) - log_z).exp();
        }
    }
    Ok((-log_z, grad))
}

impl<'g, T: Real> Var<'g, T> {
    /// Batch-mean CTC loss over log-probabilities `[B, L, A]`.
    pub fn ctc_loss(self, labels: &[Vec<usize>]) -> Result<Var<'g, T>> {
        let x = self.value();
        let &[b, frames, classes] = x.shape() else {
            return Err(Error::shape("ctc", format!("expected [B,L,A], got {:?}", x.shape())));
        };
        if labels.len() != b {
            return Err(Error::shape("ctc", format!("{b} sequences, {} labels", labels.len())));
        }
        let per = frames * classes;
        let mut total = 0.0;
        let mut grad = Vec::with_capacity(b * per);
        for (seq, label) in x.data().chunks(per).zip(labels) {
            let lp: Vec<f64> = seq.iter().map(|v| v.to_f64c()).collect();
            let (nll, g) = ctc_nll(&lp, frames, classes, label)?;
            total += nll;
            grad.extend(g.into_iter().map(|v| T::of(v / b as f64)));
        }
        let grad = Tensor::new(x.shape(), grad)?;
        Ok(self
            .graph()
            .record(Tensor::scalar(T::of(total / b as f64)), &[self], move |go, _| {
                vec![Some(grad.scale(go.item()))]
            }))
    }
}

/// Per-frame argmax, repeats collapsed, blanks dropped.
pub fn greedy_decode(probs: &[f32], classes: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = BLANK;
    for row in probs.chunks(classes) {
        let best = row
            .iter()
            .enumerate()
            .fold((0, f32::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc })
            .0;
        if best != BLANK && best != prev {
            out.push(best);
        }
        prev = best;
    }
    out
}
