//! Inference-time plumbing: prior selection, super-resolution, evaluation
//! against the frozen recognizer and tap collection for CKA.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Difficulty, Image, Sample};
use crate::error::{Error, Result};
use crate::eval::{accuracy, cka_matrix, psnr, ssim, Activations, CkaMatrix, EvalReport};
use crate::nn::{Graph, Tensor};
use crate::recognizer::{decode_batch, Recognizer};
use crate::seed::derive_seed;
use crate::srnet::{PeanModel, PriorSource};
use crate::tpem::{ddim_sample, enhanced_prior, BoundDenoiser, NoiseSchedule};

/// Number of AMM taps (two per block) in front of the SRM taps.
pub fn amm_tap_count(model: &PeanModel) -> usize {
    2 * model.cfg.blocks
}

/// A trained SR model, its frozen text prior generator and the sampler setup.
pub struct Pipeline<'a> {
    pub model: &'a PeanModel,
    pub tpg: &'a Recognizer,
    pub sched: &'a NoiseSchedule,
    pub sampling_steps: usize,
    /// See [`enhanced_prior`].
    pub temperature: f64,
}

pub struct SrBatch {
    pub sr: Vec<Image>,
    /// The row-stochastic prior handed to the network.
    pub prior: Tensor<f32>,
    pub taps: Vec<Tensor<f32>>,
}

impl Pipeline<'_> {
    /// `P^l`, `P^h` or `P^e` for a batch; `seed` fixes `x_T` for ETP.
    pub fn prior(&self, source: PriorSource, lr: &[&Image], hr: Option<&[&Image]>, seed: u64) -> Result<Tensor<f32>> {
        match source {
            PriorSource::TpLr => self.tpg.recognize(lr),
            PriorSource::TpHr => {
                let hr = hr.ok_or_else(|| Error::InvalidArgument("the tp-hr prior needs the paired HR images".into()))?;
                if hr.len() != lr.len() {
                    return Err(Error::InvalidArgument(format!("{} LR vs {} HR images", lr.len(), hr.len())));
                }
                self.tpg.recognize(hr)
            }
            PriorSource::Etp => {
                let p_l = self.tpg.recognize(lr)?;
                let den = BoundDenoiser {
                    net: &self.model.layers.denoiser,
                    store: &self.model.store,
                };
                let x0 = ddim_sample(&den, &p_l, self.sched, self.sampling_steps, seed)?;
                let g = Graph::<f32>::detached(false);
                Ok((*enhanced_prior(g.constant(x0), self.temperature).value()).clone())
            }
        }
    }

    pub fn super_resolve(&self, source: PriorSource, lr: &[&Image], hr: Option<&[&Image]>, seed: u64, keep_taps: bool) -> Result<SrBatch> {
        let prior = self.prior(source, lr, hr, seed)?;
        let g = Graph::eval(&self.model.store);
        let f = self.model.forward(g.constant(Image::batch(lr)?), g.constant(prior.clone()))?;
        let sr = Image::unbatch(&f.sr.value())?;
        let taps = if keep_taps {
            f.taps.iter().map(|t| (*t.value()).clone()).collect()
        } else {
            Vec::new()
        };
        Ok(SrBatch { sr, prior, taps })
    }

    /// SR over `samples` in batches of `batch`; batch `k` samples `x_T` from
    /// `derive_seed(seed, 0xe7a1, k)`.
    pub fn super_resolve_all(&self, source: PriorSource, samples: &[Sample], batch: usize, seed: u64) -> Result<Vec<Image>> {
        let mut out = Vec::with_capacity(samples.len());
        for (k, chunk) in samples.chunks(batch.max(1)).enumerate() {
            let (lr, hr) = views(chunk);
            let b = self.super_resolve(source, &lr, Some(&hr), derive_seed(seed, 0xe7a1, k as u64), false)?;
            out.extend(b.sr);
        }
        Ok(out)
    }

    /// Recognition accuracy and image quality of the SR outputs.
    pub fn evaluate(&self, source: PriorSource, samples: &[Sample], batch: usize, seed: u64) -> Result<(EvalReport, Vec<Image>)> {
        let sr = self.super_resolve_all(source, samples, batch, seed)?;
        let report = score(self.tpg, samples, &sr, batch)?;
        Ok((report, sr))
    }

    /// Activations of every tap over `samples`, optionally subsampled to at
    /// most `max_n` items chosen with `seed`.
    pub fn collect_taps(&self, source: PriorSource, samples: &[Sample], batch: usize, seed: u64, max_n: usize) -> Result<Vec<Activations>> {
        let chosen = subsample(samples, max_n, seed);
        let mut acts: Vec<Activations> = Vec::new();
        for (k, chunk) in chosen.chunks(batch.max(1)).enumerate() {
            let (lr, hr) = views(chunk);
            let b = self.super_resolve(source, &lr, Some(&hr), derive_seed(seed, 0xe7a1, k as u64), true)?;
            for (i, t) in b.taps.iter().enumerate() {
                let a = Activations::from_tap(t)?;
                match acts.get_mut(i) {
                    Some(acc) => acc.extend(&a)?,
                    None => acts.push(a),
                }
            }
        }
        Ok(acts)
    }
}

fn views(chunk: &[Sample]) -> (Vec<&Image>, Vec<&Image>) {
    (chunk.iter().map(|s| &s.pair.lr).collect(), chunk.iter().map(|s| &s.pair.hr).collect())
}

fn subsample(samples: &[Sample], max_n: usize, seed: u64) -> Vec<Sample> {
    if samples.len() <= max_n {
        return samples.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xc4a, 0));
    let mut idx = sample(&mut rng, samples.len(), max_n).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| samples[i].clone()).collect()
}

/// Decodes `images` (one per sample, any supported size) with `tpg` and
/// scores them against the labels; PSNR/SSIM are filled in for 32×128 images.
pub fn score(tpg: &Recognizer, samples: &[Sample], images: &[Image], batch: usize) -> Result<EvalReport> {
    if samples.len() != images.len() {
        return Err(Error::InvalidArgument(format!("{} samples vs {} images", samples.len(), images.len())));
    }
    let mut preds = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        preds.extend(decode_batch(&tpg.recognize(&refs)?));
    }
    let labels: Vec<String> = samples.iter().map(|s| s.pair.text.clone()).collect();
    let diffs: Vec<Difficulty> = samples.iter().map(|s| s.pair.difficulty).collect();
    let mut report = accuracy(&preds, &labels, &diffs)?;
    if !images.is_empty() && images.iter().zip(samples).all(|(i, s)| (i.h, i.w) == (s.pair.hr.h, s.pair.hr.w)) {
        let mut p = 0.0;
        let mut q = 0.0;
        for (img, s) in images.iter().zip(samples) {
            p += psnr(img, &s.pair.hr, 1.0)?;
            q += ssim(img, &s.pair.hr)?;
        }
        report.psnr = Some(p / images.len() as f64);
        report.ssim = Some(q / images.len() as f64);
    }
    Ok(report)
}

/// The bicubic-upsampling baseline scored like an SR model.
pub fn evaluate_bicubic(tpg: &Recognizer, samples: &[Sample], batch: usize) -> Result<(EvalReport, Vec<Image>)> {
    let up: Vec<Image> = samples
        .iter()
        .map(|s| s.pair.lr.resize_bicubic(s.pair.hr.h, s.pair.hr.w))
        .collect();
    Ok((score(tpg, samples, &up, batch)?, up))
}

/// Layer-by-layer CKA between two (model, prior source) configurations.
pub fn cka_study(
    a: (&Pipeline, PriorSource),
    b: (&Pipeline, PriorSource),
    samples: &[Sample],
    batch: usize,
    seed: u64,
    max_n: usize,
) -> Result<CkaMatrix> {
    let ta = a.0.collect_taps(a.1, samples, batch, seed, max_n)?;
    let tb = b.0.collect_taps(b.1, samples, batch, seed, max_n)?;
    cka_matrix(&ta, &tb, amm_tap_count(a.0.model))
}
