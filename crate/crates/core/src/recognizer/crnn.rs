//! Six-layer convolutional front end + BiLSTM + linear CTC head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, BiLstm, Conv2d, Linear, ParamStore, Real, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrnnConfig {
    pub in_ch: usize,
    /// Output channels of the six conv layers.
    pub channels: [usize; 6],
    /// Max-pool window `(kh, kw)` after each conv; `(1, 1)` means none.
    pub pools: [(usize, usize); 6],
    pub hidden: usize,
    pub lstm_layers: usize,
    pub seq_len: usize,
    pub classes: usize,
}

impl CrnnConfig {
    /// Template for 32×128 RGB inputs.
    pub fn image(width: usize, hidden: usize) -> Self {
        let w = width;
        Self {
            in_ch: 3,
            channels: [w, w, 2 * w, 2 * w, 4 * w, 4 * w],
            pools: [(2, 2), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1)],
            hidden,
            lstm_layers: 2,
            seq_len: crate::SEQ_LEN,
            classes: crate::charset::NUM_CLASSES,
        }
    }

    /// Template for 16×64 feature maps with `in_ch` channels.
    pub fn feature(in_ch: usize, width: usize, hidden: usize) -> Self {
        let w = width;
        Self {
            in_ch,
            channels: [w, w, 2 * w, 2 * w, 4 * w, 4 * w],
            pools: [(1, 1), (2, 2), (1, 1), (2, 1), (1, 1), (2, 1)],
            hidden,
            lstm_layers: 2,
            seq_len: crate::SEQ_LEN,
            classes: crate::charset::NUM_CLASSES,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Crnn {
    pub cfg: CrnnConfig,
    convs: Vec<(Conv2d, BatchNorm)>,
    lstm: BiLstm,
    head: Linear,
}

impl Crnn {
    pub fn new<T: Real, R: Rng + ?Sized>(ps: &mut ParamStore<T>, name: &str, cfg: CrnnConfig, rng: &mut R) -> Self {
        let mut cin = cfg.in_ch;
        let convs = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let conv = Conv2d::new(ps, &format!("{name}.conv{i}"), cin, c, 3, false, rng);
                let bn = BatchNorm::new(ps, &format!("{name}.bn{i}"), c);
                cin = c;
                (conv, bn)
            })
            .collect();
        let lstm = BiLstm::new(ps, &format!("{name}.lstm"), cin, cfg.hidden, cfg.lstm_layers, rng);
        // the head also sees the conv features directly, which avoids the
        // long all-blank CTC plateau of a head fed by the LSTM alone
        let head_in = if cfg.lstm_layers == 0 { cin } else { cin + 2 * cfg.hidden };
        let head = Linear::new(ps, &format!("{name}.head"), head_in, cfg.classes, true, rng);
        Self { cfg, convs, lstm, head }
    }

    /// `[B,H,W,C]` → unnormalised logits `[B, seq_len, classes]`.
    pub fn logits<'g, T: Real>(&self, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() != 4 || s[3] != self.cfg.in_ch {
            return Err(Error::shape("crnn", format!("input {s:?}, expected {} channels", self.cfg.in_ch)));
        }
        let mut h = x;
        for ((conv, bn), &(kh, kw)) in self.convs.iter().zip(&self.cfg.pools) {
            h = bn.forward(conv.forward(h)?)?.relu();
            if (kh, kw) != (1, 1) {
                h = h.max_pool2d(kh, kw)?;
            }
        }
        // collapse height, resample width to the fixed frame count
        let seq = h.mean_axis(1, false)?.adaptive_avg_pool(1, self.cfg.seq_len)?;
        if self.cfg.lstm_layers == 0 {
            return self.head.forward(seq);
        }
        let ctx = self.lstm.forward(seq)?;
        self.head.forward(Var::concat(&[seq, ctx], 2)?)
    }
}
