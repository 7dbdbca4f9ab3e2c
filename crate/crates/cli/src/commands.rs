//! Subcommand implementations.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::Serialize;

use pean::checkpoint::{file_digest, Checkpoint};
use pean::data::{build_dataset, Image, Manifest, Sample, Split};
use pean::eval::EvalReport;
use pean::pipeline::{cka_study, evaluate_bicubic, Pipeline};
use pean::recognizer::{decode_batch, train_recognizer, Recognizer};
use pean::srnet::{PeanModel, PriorSource};
use pean::tpem::{DiffusionConfig, NoiseSchedule};
use pean::trainer::{finetune_init, Stage, StepLog, Trainer};

use crate::config::RunConfig;

/// A required earlier artifact (dataset, checkpoint) is absent.
#[derive(Debug)]
pub struct MissingPrerequisite(pub String);

impl std::fmt::Display for MissingPrerequisite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingPrerequisite {}

/// The configuration file is unreadable or invalid.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    RunConfig::load(path).map_err(|e| ConfigError(format!("{e:#}")).into())
}

/// `PEAN_DETERMINISTIC=1`: no wall-clock values in any output.
pub fn deterministic() -> bool {
    std::env::var("PEAN_DETERMINISTIC").is_ok_and(|v| v == "1")
}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.exists() {
        return Err(MissingPrerequisite(format!("{what} not found at {}", path.display())).into());
    }
    Ok(())
}

fn load_split(data: &Path, split: Split) -> Result<Vec<Sample>> {
    require(&data.join(pean::data::dataset::MANIFEST), "dataset manifest")?;
    Ok(Manifest::load(data)?.load_split(split)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    pean::data::dataset::write_atomic(path, text.as_bytes())?;
    Ok(())
}

#[derive(Args)]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub n_train: Option<usize>,
    /// Test pairs in total, split evenly over the three difficulties.
    #[arg(long)]
    pub n_test: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?.data;
    if let Some(n) = a.n_train {
        cfg.n_train = n;
    }
    if let Some(n) = a.n_test {
        if n % 3 != 0 {
            bail!(pean::Error::InvalidArgument(format!("--n-test {n} is not divisible by 3")));
        }
        cfg.n_test_per_difficulty = n / 3;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let m = build_dataset(&cfg, &a.out)?;
    println!("wrote {} pairs to {}", m.records.len(), a.out.display());
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum StageArg {
    Recognizer,
    Pretrain,
    Finetune,
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long, value_enum)]
    pub stage: StageArg,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory.
    #[arg(long, default_value = "runs/data")]
    pub data: PathBuf,
    /// Run directory holding checkpoints and logs.
    #[arg(long, default_value = "runs/toy")]
    pub run: PathBuf,
    /// Continue from the stage's existing checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Fine-tune from random initialisation instead of the pretrain checkpoint.
    #[arg(long)]
    pub from_scratch: bool,
    /// Checkpoint to write (default `<run>/<stage>.ckpt`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Recognizer checkpoint (default `<run>/recognizer.ckpt`).
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    /// Pretrain checkpoint for fine-tuning (default `<run>/pretrain.ckpt`).
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

struct JsonlLog {
    path: PathBuf,
    file: fs::File,
}

impl JsonlLog {
    /// Opens `path`, keeping only lines whose `step` is below `keep_below`.
    fn open(path: &Path, keep_below: u64) -> Result<Self> {
        let kept = match fs::read_to_string(path) {
            Ok(text) if keep_below > 0 => text
                .lines()
                .filter(|l| {
                    serde_json::from_str::<serde_json::Value>(l)
                        .ok()
                        .and_then(|v| v["step"].as_u64())
                        .is_some_and(|s| s < keep_below)
                })
                .map(|l| format!("{l}\n"))
                .collect::<String>(),
            _ => String::new(),
        };
        let mut file = fs::File::create(path).with_context(|| format!("creating log {}", path.display()))?;
        file.write_all(kept.as_bytes())?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
        })
    }

    fn write(&mut self, v: &impl Serialize) -> pean::Result<()> {
        let line = serde_json::to_string(v).map_err(|e| pean::Error::State(e.to_string()))?;
        writeln!(self.file, "{line}").map_err(|source| pean::Error::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    fs::create_dir_all(&a.run).with_context(|| format!("creating run directory {}", a.run.display()))?;
    let rec_path = a.recognizer.clone().unwrap_or_else(|| a.run.join("recognizer.ckpt"));
    let train_set = load_split(&a.data, Split::Train)?;
    match a.stage {
        StageArg::Recognizer => {
            let rc = &mut cfg.recognizer;
            if let Some(e) = a.epochs {
                rc.train.epochs = e;
            }
            if let Some(s) = a.seed {
                rc.train.seed = s;
            }
            let out = a.out.clone().unwrap_or(rec_path);
            let mut log = JsonlLog::open(&out.with_extension("jsonl"), 0)?;
            let mut rec = Recognizer::new(rc.crnn(), rc.train.seed);
            let start = Instant::now();
            let mut err = None;
            let steps = train_recognizer(&mut rec, &train_set, &rc.train, |s| {
                if let Err(e) = log.write(s) {
                    err.get_or_insert(e);
                }
            })?;
            if let Some(e) = err {
                return Err(e.into());
            }
            rec.save(&out)?;
            let test = load_split(&a.data, Split::Test)?;
            let hr: Vec<&Image> = test.iter().map(|s| &s.pair.hr).collect();
            let preds: Vec<String> = hr
                .chunks(cfg.eval.batch)
                .map(|c| rec.recognize(c).map(|p| decode_batch(&p)))
                .collect::<pean::Result<Vec<_>>>()?
                .concat();
            let correct = preds.iter().zip(&test).filter(|(p, s)| **p == s.pair.text).count();
            println!(
                "recognizer: {} steps, final loss {:.4}, HR test accuracy {}/{}{}",
                steps.len(),
                steps.last().map_or(f64::NAN, |s| s.loss),
                correct,
                test.len(),
                if deterministic() { String::new() } else { format!(", {:.1}s", start.elapsed().as_secs_f64()) }
            );
            println!("wrote {}", out.display());
            Ok(())
        }
        StageArg::Pretrain | StageArg::Finetune => {
            let stage = if a.stage == StageArg::Pretrain { Stage::Pretrain } else { Stage::Finetune };
            let tc = if stage == Stage::Pretrain { &mut cfg.pretrain } else { &mut cfg.finetune };
            if let Some(e) = a.epochs {
                tc.epochs = e;
            }
            if let Some(m) = a.max_steps {
                tc.max_steps = Some(m);
            }
            if let Some(s) = a.seed {
                tc.seed = s;
            }
            let tc = tc.clone();
            cfg.validate().map_err(|e| ConfigError(format!("{e:#}")))?;
            require(&rec_path, "recognizer checkpoint (run `pean train --stage recognizer` first)")?;
            let tpg = Recognizer::load(&rec_path)?;
            let tpg_digest = file_digest(&rec_path)?;
            let out = a.out.clone().unwrap_or_else(|| a.run.join(format!("{}.ckpt", stage.as_str())));
            let model = if stage == Stage::Finetune && !a.from_scratch && !a.resume {
                let pre = a.pretrained.clone().unwrap_or_else(|| a.run.join("pretrain.ckpt"));
                require(&pre, "pretrain checkpoint (run `pean train --stage pretrain` first, or pass --from-scratch)")?;
                finetune_init(&Checkpoint::load(&pre)?, tc.seed)?
            } else {
                PeanModel::new(cfg.model.clone(), tc.seed)
            };
            let mut tr = Trainer::new(stage, model, &tpg, &cfg.diffusion, tc, &train_set)?;
            tr.timed = !deterministic();
            if a.resume {
                require(&out, "checkpoint to resume")?;
                tr.resume(&Checkpoint::load(&out)?)?;
            }
            let echo = serde_json::json!({ "run": cfg.echo(), "recognizer_sha256": tpg_digest, "from_scratch": a.from_scratch });
            let mut log = JsonlLog::open(&out.with_extension("jsonl"), tr.step)?;
            let spe = tr.steps_per_epoch();
            let total = tr.total_steps();
            let mut epoch_loss = 0.0;
            let mut epoch_n = 0usize;
            tr.run(|t, l: &StepLog| {
                log.write(l)?;
                epoch_loss += l.losses.total;
                epoch_n += 1;
                let done = t.step;
                if done % spe == 0 || done == total {
                    println!("{} epoch {} step {done}/{total} mean loss {:.4}", stage.as_str(), l.epoch, epoch_loss / epoch_n as f64);
                    epoch_loss = 0.0;
                    epoch_n = 0;
                    t.checkpoint(echo.clone())?.save(&out)?;
                }
                Ok(true)
            })?;
            tr.checkpoint(echo)?.save(&out)?;
            if file_digest(&rec_path)? != tpg_digest {
                bail!("recognizer checkpoint changed during training");
            }
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

#[derive(Args)]
pub struct EvalArgs {
    /// SR checkpoint (not needed for `--prior bicubic`).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, default_value = "runs/data")]
    pub data: PathBuf,
    /// tp-lr | tp-hr | etp | bicubic
    #[arg(long, default_value = "etp")]
    pub prior: String,
    #[arg(long)]
    pub out: PathBuf,
    /// Recognizer checkpoint (default: `recognizer.ckpt` next to `--ckpt`).
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn recognizer_path(explicit: Option<&Path>, ckpt: Option<&Path>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p.to_path_buf());
    }
    match ckpt.and_then(|c| c.parent()) {
        Some(dir) => Ok(dir.join("recognizer.ckpt")),
        None => bail!(MissingPrerequisite("pass --recognizer".into())),
    }
}

fn load_model(path: &Path) -> Result<(PeanModel, Checkpoint)> {
    require(path, "SR checkpoint")?;
    let c = Checkpoint::load(path)?;
    Ok((PeanModel::from_checkpoint(&c, 0, false)?, c))
}

fn schedule_of(c: &Checkpoint, fallback: &RunConfig) -> Result<(NoiseSchedule, DiffusionConfig)> {
    let d: DiffusionConfig = match c.header.config.get("run").and_then(|r| r.get("diffusion")) {
        Some(v) => serde_json::from_value(v.clone())?,
        None => fallback.diffusion.clone(),
    };
    Ok((d.schedule()?, d))
}

#[derive(Serialize)]
struct EvalOutput<'a> {
    prior: &'a str,
    checkpoint: Option<String>,
    seed: u64,
    report: &'a EvalReport,
    config: serde_json::Value,
    #[serde(skip_serializing_if = "Option::is_none")]
    wall_time: Option<f64>,
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let test = load_split(&a.data, Split::Test)?;
    let rec_path = recognizer_path(a.recognizer.as_deref(), a.ckpt.as_deref())?;
    require(&rec_path, "recognizer checkpoint")?;
    let tpg = Recognizer::load(&rec_path)?;
    let start = Instant::now();
    let (report, images) = if a.prior == "bicubic" {
        evaluate_bicubic(&tpg, &test, cfg.eval.batch)?
    } else {
        let source: PriorSource = a.prior.parse()?;
        let ckpt = a.ckpt.as_deref().ok_or_else(|| MissingPrerequisite("--ckpt is required".into()))?;
        let (model, c) = load_model(ckpt)?;
        let (sched, s) = schedule_of(&c, &cfg)?;
        let p = Pipeline {
            model: &model,
            tpg: &tpg,
            sched: &sched,
            sampling_steps: s.sampling_steps,
            temperature: s.temperature,
        };
        p.evaluate(source, &test, cfg.eval.batch, seed)?
    };
    let out = EvalOutput {
        prior: &a.prior,
        checkpoint: a.ckpt.as_ref().map(|p| p.display().to_string()),
        seed,
        report: &report,
        config: cfg.echo(),
        wall_time: (!deterministic()).then(|| start.elapsed().as_secs_f64()),
    };
    write_json(&a.out, &out)?;
    let grid_dir = a.out.with_extension("grids");
    fs::create_dir_all(&grid_dir).with_context(|| format!("creating {}", grid_dir.display()))?;
    for (i, (s, sr)) in test.iter().zip(&images).take(cfg.eval.grids).enumerate() {
        let lr = s.pair.lr.resize_bicubic(s.pair.hr.h, s.pair.hr.w);
        Image::vstack(&[&lr, sr, &s.pair.hr], 2).save_png(&grid_dir.join(format!("{i:03}_{}.png", s.id)))?;
    }
    let subsets: Vec<String> = report
        .subsets
        .iter()
        .map(|s| format!("{} {:.1}", s.difficulty.as_str(), s.accuracy))
        .collect();
    println!("{}: average {:.2} ({})", a.prior, report.average, subsets.join(", "));
    if let (Some(p), Some(q)) = (report.psnr, report.ssim) {
        println!("psnr {p:.3} dB, ssim {q:.4}");
    }
    Ok(())
}

#[derive(Args)]
pub struct CkaArgs {
    #[arg(long)]
    pub ckpt_a: PathBuf,
    #[arg(long)]
    pub ckpt_b: PathBuf,
    #[arg(long, default_value = "runs/data")]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "etp")]
    pub prior_a: PriorSource,
    #[arg(long, default_value = "etp")]
    pub prior_b: PriorSource,
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cka(a: CkaArgs) -> Result<()> {
    let cfg = load_config(a.config.as_deref())?;
    let seed = a.seed.unwrap_or(cfg.eval.seed);
    let test = load_split(&a.data, Split::Test)?;
    let rec_path = recognizer_path(a.recognizer.as_deref(), Some(&a.ckpt_a))?;
    require(&rec_path, "recognizer checkpoint")?;
    let tpg = Recognizer::load(&rec_path)?;
    let (ma, ca) = load_model(&a.ckpt_a)?;
    let (mb, cb) = load_model(&a.ckpt_b)?;
    let (sa, na) = schedule_of(&ca, &cfg)?;
    let (sb, nb) = schedule_of(&cb, &cfg)?;
    let pa = Pipeline {
        model: &ma,
        tpg: &tpg,
        sched: &sa,
        sampling_steps: na.sampling_steps,
        temperature: na.temperature,
    };
    let pb = Pipeline {
        model: &mb,
        tpg: &tpg,
        sched: &sb,
        sampling_steps: nb.sampling_steps,
        temperature: nb.temperature,
    };
    let m = cka_study((&pa, a.prior_a), (&pb, a.prior_b), &test, cfg.eval.batch, seed, cfg.eval.cka_samples)?;
    let out = serde_json::json!({
        "checkpoint_a": a.ckpt_a.display().to_string(),
        "checkpoint_b": a.ckpt_b.display().to_string(),
        "prior_a": a.prior_a.as_str(),
        "prior_b": a.prior_b.as_str(),
        "seed": seed,
        "cka": m,
        "config": cfg.echo(),
    });
    write_json(&a.out, &out)?;
    m.save_heatmap(&a.out.with_extension("png"), 12)?;
    println!(
        "n={} diagonal mean {:.4} (AMM {:.4}, SRM {:.4})",
        m.n, m.diag_mean, m.amm_diag_mean, m.srm_diag_mean
    );
    Ok(())
}

#[derive(Args)]
pub struct SrArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// 16x64 input PNG.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// tp-lr | etp | tp-hr (needs --hr)
    #[arg(long, default_value = "etp")]
    pub prior: PriorSource,
    /// Paired 32x128 image for the tp-hr prior.
    #[arg(long)]
    pub hr: Option<PathBuf>,
    #[arg(long)]
    pub recognizer: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn sr(a: SrArgs) -> Result<()> {
    let lr = Image::load_png(&a.image)?;
    if (lr.h, lr.w) != (pean::data::LR_H, pean::data::LR_W) {
        bail!(pean::Error::InvalidArgument(format!(
            "expected a {}x{} input, got {}x{}",
            pean::data::LR_W,
            pean::data::LR_H,
            lr.w,
            lr.h
        )));
    }
    let hr = a.hr.as_deref().map(Image::load_png).transpose()?;
    let rec_path = recognizer_path(a.recognizer.as_deref(), Some(&a.ckpt))?;
    require(&rec_path, "recognizer checkpoint")?;
    let tpg = Recognizer::load(&rec_path)?;
    let (model, c) = load_model(&a.ckpt)?;
    let (sched, s) = schedule_of(&c, &RunConfig::default())?;
    let p = Pipeline {
        model: &model,
        tpg: &tpg,
        sched: &sched,
        sampling_steps: s.sampling_steps,
        temperature: s.temperature,
    };
    let hr_refs: Option<Vec<&Image>> = hr.as_ref().map(|h| vec![h]);
    let out = p.super_resolve(a.prior, &[&lr], hr_refs.as_deref(), a.seed, false)?;
    let sr = &out.sr[0];
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    sr.save_png(&a.out)?;
    let texts = tpg.recognize_text(&[&lr, sr])?;
    println!("lr: {}", texts[0]);
    println!("sr: {}", texts[1]);
    Ok(())
}
