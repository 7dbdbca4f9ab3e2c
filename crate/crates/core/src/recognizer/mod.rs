//! CTC recognizer: text prior generator, evaluator and ARM template.

pub mod crnn;
pub mod ctc;

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use crnn::{Crnn, CrnnConfig};
pub use ctc::{ctc_nll, greedy_decode, min_frames};

use crate::charset::{Charset, NUM_CLASSES};
use crate::checkpoint::Checkpoint;
use crate::data::{generate_item, DatasetConfig, Image, Sample, Split, HR_H, HR_W, LR_H, LR_W};
use crate::error::{Error, Result};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamStore, Tensor};
use crate::seed::derive_seed;
use crate::SEQ_LEN;

/// An `L × |A|` sequence. Recognizer outputs are row-stochastic; diffusion
/// states use the same layout without that constraint.
#[derive(Clone, Debug, PartialEq)]
pub struct PriorSeq {
    pub probs: Vec<f32>,
}

impl PriorSeq {
    pub fn row(&self, t: usize) -> &[f32] {
        &self.probs[t * NUM_CLASSES..(t + 1) * NUM_CLASSES]
    }

    pub fn is_row_stochastic(&self, tol: f32) -> bool {
        self.probs.chunks(NUM_CLASSES).all(|r| {
            r.iter().all(|&p| (0.0..=1.0).contains(&p)) && (r.iter().sum::<f32>() - 1.0).abs() <= tol
        })
    }

    pub fn decode(&self) -> String {
        Charset::default().decode(&greedy_decode(&self.probs, NUM_CLASSES))
    }

    /// Splits a `[B, L, A]` tensor.
    pub fn unbatch(t: &Tensor<f32>) -> Vec<PriorSeq> {
        t.data()
            .chunks(SEQ_LEN * NUM_CLASSES)
            .map(|c| PriorSeq { probs: c.to_vec() })
            .collect()
    }
}

/// Decodes every sequence of a `[B, L, A]` probability tensor.
pub fn decode_batch(probs: &Tensor<f32>) -> Vec<String> {
    PriorSeq::unbatch(probs).iter().map(PriorSeq::decode).collect()
}

#[derive(Clone, Debug)]
pub struct Recognizer {
    pub net: Crnn,
    pub store: ParamStore<f32>,
}

/// Brings LR images up to the recognizer's input size.
pub fn to_recognizer_input(img: &Image) -> Result<Image> {
    match (img.h, img.w) {
        (HR_H, HR_W) => Ok(img.clone()),
        (LR_H, LR_W) => Ok(img.resize_bicubic(HR_H, HR_W)),
        (h, w) => Err(Error::shape("recognize", format!("unsupported image size {h}x{w}"))),
    }
}

impl Recognizer {
    pub fn new(cfg: CrnnConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let net = Crnn::new(&mut store, "rec", cfg, &mut rng);
        Self { net, store }
    }

    /// Eval-mode probabilities `[B, L, A]` for 16×64 or 32×128 images.
    pub fn recognize(&self, images: &[&Image]) -> Result<Tensor<f32>> {
        let inputs = images.iter().map(|i| to_recognizer_input(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Image> = inputs.iter().collect();
        let g = Graph::eval(&self.store);
        let x = g.constant(Image::batch(&refs)?);
        let probs = self.net.logits(x)?.softmax();
        Ok((*probs.value()).clone())
    }

    pub fn recognize_text(&self, images: &[&Image]) -> Result<Vec<String>> {
        Ok(decode_batch(&self.recognize(images)?))
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let config = serde_json::to_value(&self.net.cfg).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut c = Checkpoint::new(KIND, config);
        c.add_store(&self.store);
        Ok(c)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        if c.header.kind != KIND {
            return Err(Error::Checkpoint(format!("expected a {KIND} checkpoint, found {:?}", c.header.kind)));
        }
        let cfg: CrnnConfig =
            serde_json::from_value(c.header.config.clone()).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
        let mut rec = Self::new(cfg, 0);
        c.restore_store(&mut rec.store, true)?;
        Ok(rec)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

const KIND: &str = "recognizer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecognizerTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Fraction of training items shown as bicubic-upsampled LR instead of HR.
    pub lr_fraction: f64,
    pub grad_clip: f64,
    /// Additional rendered pairs per epoch, drawn from a seed stream disjoint
    /// from the dataset and generated on the fly.
    pub extra_synthetic: usize,
    pub seed: u64,
}

impl Default for RecognizerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch: 16,
            lr: 2e-3,
            lr_fraction: 0.1,
            grad_clip: 5.0,
            extra_synthetic: 8000,
            seed: 0,
        }
    }
}

/// One logged optimisation step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RecStep {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// CTC training on HR images with a share of upsampled LR views.
pub fn train_recognizer(
    rec: &mut Recognizer,
    samples: &[Sample],
    cfg: &RecognizerTrainConfig,
    mut on_step: impl FnMut(&RecStep),
) -> Result<Vec<RecStep>> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no training samples".into()));
    }
    if cfg.batch == 0 || !(0.0..=1.0).contains(&cfg.lr_fraction) {
        return Err(Error::InvalidArgument("batch must be > 0 and lr_fraction in [0, 1]".into()));
    }
    let lens = samples.iter().map(|s| s.label.len());
    let extra_cfg = DatasetConfig {
        seed: derive_seed(cfg.seed, 13, 0),
        min_len: lens.clone().min().unwrap_or(1),
        max_len: lens.max().unwrap_or(1),
        ..Default::default()
    };
    let cs = Charset::default();
    // (view, label) of item i; the LR/HR choice is fixed per item
    let item = |i: usize| -> Result<(Image, Vec<usize>)> {
        let (pair, label) = if i < samples.len() {
            (samples[i].pair.clone(), samples[i].label.clone())
        } else {
            let pair = generate_item(&extra_cfg, Split::Train, i - samples.len(), None)?;
            let label = cs.encode(&pair.text)?;
            (pair, label)
        };
        let mut pick = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11, i as u64));
        let view = if rand::Rng::random::<f64>(&mut pick) < cfg.lr_fraction {
            pair.lr.resize_bicubic(HR_H, HR_W)
        } else {
            pair.hr
        };
        Ok((view, label))
    };
    let mut opt = AdamW::new(
        &rec.store,
        AdamWConfig {
            lr: cfg.lr,
            ..Default::default()
        },
    );
    let mut log = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..samples.len() + cfg.extra_synthetic).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 12, epoch as u64)));
        for chunk in order.chunks(cfg.batch) {
            let items = chunk.iter().map(|&i| item(i)).collect::<Result<Vec<_>>>()?;
            let imgs: Vec<&Image> = items.iter().map(|(v, _)| v).collect();
            let labels: Vec<Vec<usize>> = items.iter().map(|(_, l)| l.clone()).collect();
            let (loss, grads, updates) = {
                let g = Graph::train(&rec.store);
                let x = g.constant(Image::batch(&imgs)?);
                let loss = rec.net.logits(x)?.log_softmax().ctc_loss(&labels)?;
                let value = loss.item() as f64;
                if !value.is_finite() {
                    return Err(Error::NonFinite(format!("recognizer loss at step {step}")));
                }
                let grads = g.backward(loss)?;
                let grads: Vec<_> = grads.params().into_iter().map(|(id, t)| (id, t.clone())).collect();
                (value, grads, g.take_buffer_updates())
            };
            rec.store.zero_grad();
            let refs: Vec<_> = grads.iter().map(|(id, t)| (*id, t)).collect();
            rec.store.accumulate(&refs);
            let grad_norm = rec.store.clip_grad_norm(cfg.grad_clip);
            opt.update(&mut rec.store);
            rec.store.apply_buffer_updates(updates);
            let entry = RecStep {
                epoch,
                step,
                loss,
                grad_norm,
            };
            on_step(&entry);
            log.push(entry);
            step += 1;
        }
    }
    Ok(log)
}
