//! Two-stage optimisation of the SR network.
//!
//! Pretraining drops the prior enhancer and conditions on the HR text prior
//! with the image and text terms only. Fine-tuning starts from those weights,
//! adds the denoiser and trains everything jointly on the full objective with
//! the enhanced prior. Every random draw of step `k` is derived from
//! `(seed, k)`, so a run resumed from a checkpoint repeats the uninterrupted
//! run bit for bit.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Image, Sample};
use crate::error::{Error, Result};
use crate::losses::{image_terms, total_loss, LossReport, LossWeights, RawTerms};
use crate::nn::{AdamW, AdamWConfig, Graph, ParamId, Tensor, Var};
use crate::recognizer::Recognizer;
use crate::seed::derive_seed;
use crate::srnet::{is_denoiser_param, PeanModel};
use crate::tpem::{ddim_last_state, diffusion_terms, enhanced_prior, initial_noise, BoundDenoiser, DiffusionConfig, NoiseSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Pretrain,
    Finetune,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            _ => Err(Error::InvalidArgument(format!("unknown stage {s:?} (pretrain|finetune)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: AdamWConfig,
    pub grad_clip: f64,
    pub seed: u64,
    pub weights: LossWeights,
    /// Stops after this many steps in total, overriding `epochs`.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 16,
            optimizer: AdamWConfig::default(),
            grad_clip: 5.0,
            seed: 0,
            weights: LossWeights::default(),
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch == 0 || !(self.grad_clip > 0.0) || !(self.optimizer.lr >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "batch must be > 0, grad_clip > 0 and lr >= 0 (batch {}, clip {}, lr {})",
                self.batch, self.grad_clip, self.optimizer.lr
            )));
        }
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub epoch: u64,
    pub stage: Stage,
    pub losses: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Set when the gradient was non-finite and no update was applied.
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

pub struct Trainer<'a> {
    pub stage: Stage,
    pub cfg: TrainConfig,
    pub model: PeanModel,
    pub opt: AdamW<f32>,
    pub tpg: &'a Recognizer,
    pub sched: NoiseSchedule,
    pub sampling_steps: usize,
    pub temperature: f64,
    /// Steps completed.
    pub step: u64,
    samples: &'a [Sample],
    /// Frozen-TPG priors `(P^l, P^h)` per sample, each `[L, A]`.
    priors: Vec<(Tensor<f32>, Tensor<f32>)>,
    /// Record wall-clock times in the log.
    pub timed: bool,
}

/// Builds the fine-tuning initialisation from pretrained weights. Every
/// pretrained tensor must exist in the new model with the same shape; the
/// denoiser keeps its seeded initialisation.
pub fn finetune_init(pretrained: &Checkpoint, seed: u64) -> Result<PeanModel> {
    if pretrained.header.stage.as_deref() != Some(Stage::Pretrain.as_str()) {
        return Err(Error::Checkpoint(format!(
            "expected a pretrain checkpoint, found stage {:?}",
            pretrained.header.stage
        )));
    }
    let mut model = PeanModel::new(PeanModel::config_of(pretrained)?, seed);
    let known: std::collections::BTreeSet<&str> = model.store.names().collect();
    let unknown: Vec<String> = pretrained
        .header
        .tensors
        .iter()
        .filter(|e| !known.contains(e.name.as_str()))
        .map(|e| format!("{}: not in the model", e.name))
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Checkpoint(unknown.join("; ")));
    }
    let loaded = pretrained.restore_store(&mut model.store, false)?;
    let missing: Vec<String> = model
        .store
        .names()
        .filter(|n| !is_denoiser_param(n) && !loaded.iter().any(|l| l == n))
        .map(|n| format!("{n}: missing"))
        .collect();
    if !missing.is_empty() {
        return Err(Error::Checkpoint(missing.join("; ")));
    }
    Ok(model)
}

fn stack(parts: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let mut shape = vec![parts.len()];
    shape.extend_from_slice(parts[0].shape());
    Tensor::new(&shape, parts.iter().flat_map(|t| t.data().iter().copied()).collect())
}

impl<'a> Trainer<'a> {
    pub fn new(
        stage: Stage,
        model: PeanModel,
        tpg: &'a Recognizer,
        diffusion: &DiffusionConfig,
        cfg: TrainConfig,
        samples: &'a [Sample],
    ) -> Result<Self> {
        cfg.validate()?;
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no training samples".into()));
        }
        let mut priors = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let lr: Vec<&Image> = chunk.iter().map(|s| &s.pair.lr).collect();
            let hr: Vec<&Image> = chunk.iter().map(|s| &s.pair.hr).collect();
            let (pl, ph) = (tpg.recognize(&lr)?, tpg.recognize(&hr)?);
            for i in 0..chunk.len() {
                priors.push((pl.narrow(0, i, 1)?.reshape(&pl.shape()[1..])?, ph.narrow(0, i, 1)?.reshape(&ph.shape()[1..])?));
            }
        }
        let opt = AdamW::new(&model.store, cfg.optimizer.clone());
        Ok(Self {
            stage,
            sched: diffusion.schedule()?,
            sampling_steps: diffusion.sampling_steps,
            temperature: diffusion.temperature,
            cfg,
            model,
            opt,
            tpg,
            step: 0,
            samples,
            priors,
            timed: true,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(&mut self, c: &Checkpoint) -> Result<()> {
        if c.header.stage.as_deref() != Some(self.stage.as_str()) {
            return Err(Error::Checkpoint(format!(
                "cannot resume {} from a {:?} checkpoint",
                self.stage.as_str(),
                c.header.stage
            )));
        }
        if PeanModel::config_of(c)? != self.model.cfg {
            return Err(Error::Checkpoint("model configuration differs from the checkpoint".into()));
        }
        let strict = self.stage == Stage::Finetune;
        c.restore_store(&mut self.model.store, strict)?;
        self.opt = c
            .restore_optimizer(&self.model.store)?
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        self.step = c.header.step;
        Ok(())
    }

    pub fn checkpoint(&self, config_echo: serde_json::Value) -> Result<Checkpoint> {
        let mut c = self.model.to_checkpoint(self.stage == Stage::Finetune)?;
        c.header.stage = Some(self.stage.as_str().to_string());
        c.header.step = self.step;
        c.header.seed = self.cfg.seed;
        c.header.config = config_echo;
        if self.stage == Stage::Finetune {
            c.add_optimizer(&self.opt, &self.model.store);
        } else {
            // optimizer state of the weights that are actually saved
            let mut sub = self.opt.clone();
            let mut kept = crate::nn::ParamStore::new();
            let mut m = Vec::new();
            let mut v = Vec::new();
            for (id, p) in self.model.store.iter().filter(|(_, p)| !is_denoiser_param(&p.name)) {
                if p.trainable {
                    kept.add(&p.name, p.value.clone());
                } else {
                    kept.add_buffer(&p.name, p.value.clone());
                }
                m.push(self.opt.m[id.index()].clone());
                v.push(self.opt.v[id.index()].clone());
            }
            sub.m = m;
            sub.v = v;
            c.add_optimizer(&sub, &kept);
        }
        Ok(c)
    }

    pub fn steps_per_epoch(&self) -> u64 {
        self.samples.len().div_ceil(self.cfg.batch) as u64
    }

    pub fn total_steps(&self) -> u64 {
        self.cfg
            .max_steps
            .unwrap_or(self.cfg.epochs as u64 * self.steps_per_epoch())
    }

    /// Sample indices of step `step`: epoch-wise shuffles keyed on the seed.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let spe = self.steps_per_epoch();
        let (epoch, k) = (step / spe, (step % spe) as usize);
        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 0xe90c, epoch)));
        let b = self.cfg.batch;
        order[k * b..((k + 1) * b).min(order.len())].to_vec()
    }

    /// One forward, backward and update on the given samples.
    pub fn train_step(&mut self, indices: &[usize]) -> Result<StepLog> {
        let start = Instant::now();
        let step = self.step;
        let items: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        let lr: Vec<&Image> = items.iter().map(|s| &s.pair.lr).collect();
        let hr: Vec<&Image> = items.iter().map(|s| &s.pair.hr).collect();
        let labels: Vec<Vec<usize>> = items.iter().map(|s| s.label.clone()).collect();
        let p_l = stack(&indices.iter().map(|&i| &self.priors[i].0).collect::<Vec<_>>())?;
        let p_h = stack(&indices.iter().map(|&i| &self.priors[i].1).collect::<Vec<_>>())?;
        let w = self.cfg.weights;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.cfg.seed, 0x57e9, step));

        let (report, grads, updates) = {
            let g = Graph::train(&self.model.store);
            let (prior, diff) = match self.stage {
                Stage::Pretrain => (g.constant(p_h.clone()), None),
                Stage::Finetune => {
                    let (x0_diff, x0_etp) = self.denoise_pair(&g, &p_l, &p_h, &mut rng)?;
                    let d = diffusion_terms(x0_diff, g.constant(p_h.clone()), &labels)?;
                    (enhanced_prior(x0_etp, self.temperature), Some((d.mae, d.ctc)))
                }
            };
            let f = self.model.forward(g.constant(Image::batch(&lr)?), prior)?;
            let (mse, edge) = image_terms(f.sr, g.constant(Image::batch(&hr)?))?;
            let txt = self.model.arm_logits(f.amm_out)?.log_softmax().ctc_loss(&labels)?;
            let raw = RawTerms {
                diff: diff.map(|(a, b): (Var<f32>, Var<f32>)| (a.item() as f64, b.item() as f64)),
                img: (mse.item() as f64, edge.item() as f64),
                txt: txt.item() as f64,
            };
            let report = total_loss(raw, &w).map_err(|e| Error::NonFinite(format!("step {step}: {e}")))?;
            let mut total = mse.scale(w.l3).add(edge.scale(w.l4))?.add(txt.scale(w.l5))?;
            if let Some((mae, ctc)) = diff {
                total = total.add(mae.scale(w.l1))?.add(ctc.scale(w.l2))?;
            }
            let grads = g.backward(total)?;
            let grads: Vec<(ParamId, Tensor<f32>)> = grads.params().into_iter().map(|(id, t)| (id, t.clone())).collect();
            (report, grads, g.take_buffer_updates())
        };

        let finite = grads.iter().all(|(_, t)| t.is_finite());
        let store = &mut self.model.store;
        store.zero_grad();
        let refs: Vec<_> = grads.iter().map(|(id, t)| (*id, t)).collect();
        store.accumulate(&refs);
        let grad_norm = store.grad_norm();
        if finite {
            store.clip_grad_norm(self.cfg.grad_clip);
            self.opt.update(store);
            store.apply_buffer_updates(updates);
        }
        self.step += 1;
        Ok(StepLog {
            step,
            epoch: step / self.steps_per_epoch(),
            stage: self.stage,
            losses: report,
            grad_norm,
            skipped: !finite,
            wall_time: self.timed.then(|| start.elapsed().as_secs_f64()),
        })
    }

    /// Denoiser outputs for the diffusion loss (random `t`) and for the
    /// prior handed to the SR branch (the final DDIM step), evaluated as one
    /// batch so normalisation sees both.
    fn denoise_pair<'g>(
        &self,
        g: &'g Graph<'g, f32>,
        p_l: &Tensor<f32>,
        p_h: &Tensor<f32>,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var<'g, f32>, Var<'g, f32>)> {
        let b = p_l.dim(0);
        let per = p_l.numel() / b;
        let mut ts = Vec::with_capacity(2 * b);
        let mut x_t = Vec::with_capacity(2 * b * per);
        for i in 0..b {
            let t = rng.random_range(1..=self.sched.steps);
            let x0 = p_h.narrow(0, i, 1)?;
            let eps = crate::tpem::schedule::gaussian::<f32, _>(x0.shape(), rng);
            x_t.extend(self.sched.q_sample(&x0, t, &eps)?.into_data());
            ts.push(t);
        }
        let noise = initial_noise::<f32>(p_l.shape(), rng.random());
        let den = BoundDenoiser {
            net: &self.model.layers.denoiser,
            store: &self.model.store,
        };
        let (x_last, t_last) = ddim_last_state(&den, noise, p_l, &self.sched, self.sampling_steps)?;
        x_t.extend(x_last.into_data());
        ts.extend(std::iter::repeat_n(t_last, b));
        let mut shape = p_l.shape().to_vec();
        shape[0] = 2 * b;
        let x = g.constant(Tensor::new(&shape, x_t)?);
        let cond = g.constant(Tensor::concat(&[p_l, p_l], 0)?);
        let out = self.model.layers.denoiser.forward(x, cond, &ts)?;
        Ok((out.narrow(0, 0, b)?, out.narrow(0, b, b)?))
    }

    /// Trains until `total_steps()`; `on_step` sees every log line and may
    /// stop the run early by returning `false`.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepLog) -> Result<bool>) -> Result<Vec<StepLog>> {
        let mut log = Vec::new();
        while self.step < self.total_steps() {
            let idx = self.batch_indices(self.step);
            let entry = self.train_step(&idx)?;
            let go_on = on_step(self, &entry)?;
            log.push(entry);
            if !go_on {
                break;
            }
        }
        Ok(log)
    }
}
