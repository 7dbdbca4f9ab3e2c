//! The assembled super-resolution network.

use std::cell::Cell;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::amm::{amm_forward, AmmBlock, Fam};
use crate::charset::NUM_CLASSES;
use crate::checkpoint::Checkpoint;
use crate::data::{Image, LR_H, LR_W};
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Mode, ParamStore, Real, Tensor, Var};
use crate::recognizer::{Crnn, CrnnConfig};
use crate::tpem::DenoiserMlp;
use crate::SEQ_LEN;

const KIND: &str = "pean";

/// Parameters of the prior enhancer's denoiser.
pub fn is_denoiser_param(name: &str) -> bool {
    name.starts_with("tpem.")
}

/// Number of refinement conv layers in the SR head.
pub const SRM_LAYERS: usize = 4;
/// Taps recorded by the SR head.
pub const SRM_TAPS: usize = 2 * SRM_LAYERS + 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PriorSource {
    /// Recognizer output on the LR input.
    TpLr,
    /// Recognizer output on the paired HR image.
    TpHr,
    /// Diffusion-enhanced prior.
    Etp,
}

impl PriorSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PriorSource::TpLr => "tp-lr",
            PriorSource::TpHr => "tp-hr",
            PriorSource::Etp => "etp",
        }
    }
}

impl std::str::FromStr for PriorSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tp-lr" => Ok(PriorSource::TpLr),
            "tp-hr" => Ok(PriorSource::TpHr),
            "etp" => Ok(PriorSource::Etp),
            _ => Err(Error::InvalidArgument(format!("unknown prior source {s:?} (tp-lr|tp-hr|etp)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Feature channels `C₁`.
    pub channels: usize,
    pub blocks: usize,
    pub gam_qk_dim: usize,
    pub ffn_mult: usize,
    pub fam_dim: usize,
    pub arm_width: usize,
    pub arm_hidden: usize,
}

/// The desk-scale profile.
impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 16,
            blocks: 6,
            gam_qk_dim: 32,
            ffn_mult: 2,
            fam_dim: 16,
            arm_width: 8,
            arm_hidden: 32,
        }
    }
}

impl ModelConfig {
    /// Widths at the published scale.
    pub fn full() -> Self {
        Self {
            channels: 64,
            blocks: 6,
            gam_qk_dim: 256,
            ffn_mult: 4,
            fam_dim: 64,
            arm_width: 16,
            arm_hidden: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [self.channels, self.blocks, self.gam_qk_dim, self.ffn_mult, self.fam_dim, self.arm_width, self.arm_hidden];
        if dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("model dimensions must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Srm {
    pub layers: Vec<(Conv2d, BatchNorm)>,
    pub expand: Conv2d,
    pub out: Conv2d,
}

impl Srm {
    /// `F_N^o` → SR image in `[0,1]`, appending this head's taps. The head
    /// predicts a correction to `base`, the logit of the bicubic upsample.
    pub fn forward<'g, T: Real>(&self, f_o: Var<'g, T>, base: Var<'g, T>, taps: &mut Vec<Var<'g, T>>) -> Result<Var<'g, T>> {
        let mut h = f_o;
        for (conv, bn) in &self.layers {
            let y = conv.forward(h)?;
            taps.push(y);
            h = bn.forward(y)?.mish();
            taps.push(h);
        }
        let up = self.expand.forward(h)?.pixel_shuffle(2)?;
        taps.push(up);
        let sr = self.out.forward(up)?.add(base)?.sigmoid();
        taps.push(sr);
        Ok(sr)
    }
}

/// Logit of the bicubic 2x upsample of an LR batch, clamped away from 0 and 1.
pub fn bicubic_logit<T: Real>(lr: &Tensor<T>) -> Result<Tensor<T>> {
    let up: Vec<Image> = Image::unbatch(lr)?.iter().map(|i| i.resize_bicubic(2 * i.h, 2 * i.w)).collect();
    let eps = 1e-3;
    Ok(Image::batch::<T>(&up.iter().collect::<Vec<_>>())?.map(|p| {
        let p = p.to_f64c().clamp(eps, 1.0 - eps);
        T::of((p / (1.0 - p)).ln())
    }))
}

#[derive(Debug)]
pub struct PeanModel {
    pub cfg: ModelConfig,
    pub store: ParamStore<f32>,
    pub layers: Layers,
    arm_calls: Cell<usize>,
}

/// Output of one network pass.
pub struct Forward<'g, T: Real> {
    pub sr: Var<'g, T>,
    /// 2N AMM taps followed by the SR-head taps.
    pub taps: Vec<Var<'g, T>>,
    pub shallow: Var<'g, T>,
    /// Final AMM feature `F_N^o`, the ARM input.
    pub amm_out: Var<'g, T>,
}

/// Parameter layout shared by every precision; the f32 store lives in [`PeanModel`].
#[derive(Clone, Debug)]
pub struct Layers {
    pub shallow: Conv2d,
    pub fam: Fam,
    pub blocks: Vec<AmmBlock>,
    pub srm: Srm,
    pub arm: Crnn,
    pub denoiser: DenoiserMlp,
}

impl Layers {
    pub fn build<T: Real>(cfg: &ModelConfig, ps: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.channels;
        let shallow = Conv2d::new(ps, "shallow", 3, c, 3, true, &mut rng);
        let fam = Fam::new(ps, "fam", LR_H, LR_W, c, SEQ_LEN, NUM_CLASSES, cfg.fam_dim, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|i| AmmBlock::new(ps, &format!("amm.{i}"), LR_H, LR_W, c, cfg.gam_qk_dim, cfg.ffn_mult, &mut rng))
            .collect();
        let layers = (0..SRM_LAYERS)
            .map(|i| {
                (
                    Conv2d::new(ps, &format!("srm.conv{i}"), c, c, 3, true, &mut rng),
                    BatchNorm::new(ps, &format!("srm.bn{i}"), c),
                )
            })
            .collect();
        let srm = Srm {
            layers,
            expand: Conv2d::new(ps, "srm.expand", c, 4 * c, 3, true, &mut rng),
            out: Conv2d::new(ps, "srm.out", c, 3, 3, true, &mut rng),
        };
        // an untrained head reproduces the bicubic upsample
        srm.out.zero_init(ps);
        let arm = Crnn::new(ps, "arm", CrnnConfig::feature(c, cfg.arm_width, cfg.arm_hidden), &mut rng);
        let denoiser = DenoiserMlp::new(ps, "tpem", &mut rng);
        Self {
            shallow,
            fam,
            blocks,
            srm,
            arm,
            denoiser,
        }
    }

    pub fn shallow_extract<'g, T: Real>(&self, lr: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = lr.shape();
        if s.len() != 4 || s[1..] != [LR_H, LR_W, 3] {
            return Err(Error::shape("shallow", format!("expected [B,{LR_H},{LR_W},3], got {s:?}")));
        }
        self.shallow.forward(lr)
    }

    /// Full pass given the LR batch and a row-stochastic prior `[B,L,A]`.
    pub fn forward<'g, T: Real>(&self, cfg: &ModelConfig, lr: Var<'g, T>, prior: Var<'g, T>) -> Result<Forward<'g, T>> {
        let f_s = self.shallow_extract(lr)?;
        let f_a = self.fam.forward(f_s, prior)?;
        let (f_o, mut taps) = amm_forward(f_a, &self.blocks, cfg.blocks)?;
        let base = lr.graph().constant(bicubic_logit(&lr.value())?);
        let sr = self.srm.forward(f_o, base, &mut taps)?;
        Ok(Forward {
            sr,
            taps,
            shallow: f_s,
            amm_out: f_o,
        })
    }
}

impl PeanModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let layers = Layers::build(&cfg, &mut store, seed);
        Self {
            cfg,
            store,
            layers,
            arm_calls: Cell::new(0),
        }
    }

    pub fn forward<'g, T: Real>(&self, lr: Var<'g, T>, prior: Var<'g, T>) -> Result<Forward<'g, T>> {
        self.layers.forward(&self.cfg, lr, prior)
    }

    /// Auxiliary recognition logits from `F_N^o`; refused on inference graphs.
    pub fn arm_logits<'g, T: Real>(&self, amm_out: Var<'g, T>) -> Result<Var<'g, T>> {
        if amm_out.graph().mode() == Mode::Eval {
            return Err(Error::State("the auxiliary recognition head is training-only".into()));
        }
        self.arm_calls.set(self.arm_calls.get() + 1);
        self.layers.arm.logits(amm_out)
    }

    /// Weights as a checkpoint; the prior enhancer is left out when
    /// `with_denoiser` is false (pretraining never touches it).
    pub fn to_checkpoint(&self, with_denoiser: bool) -> Result<Checkpoint> {
        let mut c = Checkpoint::new(KIND, serde_json::Value::Null);
        c.header.meta = serde_json::json!({ "model": self.cfg });
        if with_denoiser {
            c.add_store(&self.store);
        } else {
            let mut kept = ParamStore::new();
            for (_, p) in self.store.iter().filter(|(_, p)| !is_denoiser_param(&p.name)) {
                if p.trainable {
                    kept.add(&p.name, p.value.clone());
                } else {
                    kept.add_buffer(&p.name, p.value.clone());
                }
            }
            c.add_store(&kept);
        }
        Ok(c)
    }

    /// The model configuration echoed in a checkpoint.
    pub fn config_of(c: &Checkpoint) -> Result<ModelConfig> {
        if c.header.kind != KIND {
            return Err(Error::Checkpoint(format!("expected a {KIND} checkpoint, found {:?}", c.header.kind)));
        }
        serde_json::from_value(c.header.meta["model"].clone()).map_err(|e| Error::Checkpoint(format!("model config: {e}")))
    }

    /// Builds a model from a checkpoint. Parameters absent from the
    /// checkpoint keep their seeded initialisation only when `strict` is off.
    pub fn from_checkpoint(c: &Checkpoint, seed: u64, strict: bool) -> Result<Self> {
        let mut m = Self::new(Self::config_of(c)?, seed);
        c.restore_store(&mut m.store, strict)?;
        Ok(m)
    }

    /// How many times the ARM has been evaluated.
    pub fn arm_calls(&self) -> usize {
        self.arm_calls.get()
    }
}
