//! On-disk paired dataset: `images/*.png` plus a JSONL manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image::Image;
use super::render::{render_pair, Difficulty, RenderStyle, TextImagePair};
use crate::charset::Charset;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

pub const MANIFEST: &str = "manifest.jsonl";
pub const META: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    /// Test pairs per difficulty tier.
    pub n_test_per_difficulty: usize,
    pub seed: u64,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            n_train: 500,
            n_test_per_difficulty: 50,
            seed: 0,
            min_len: 2,
            max_len: 7,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Paths are relative to the dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: String,
    pub lr_path: String,
    pub hr_path: String,
    pub text: String,
    pub split: Split,
    pub difficulty: Difficulty,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub config: DatasetConfig,
    pub charset: String,
    pub train: usize,
    pub test_counts: BTreeMap<Difficulty, usize>,
}

#[derive(Clone, Debug)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<Record>,
}

/// A loaded pair with its encoded label.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub pair: TextImagePair,
    pub label: Vec<usize>,
    pub split: Split,
}

/// Uniform random text over `[0-9a-z]` with length in `min_len..=max_len`.
pub fn sample_text<R: Rng + ?Sized>(rng: &mut R, min_len: usize, max_len: usize) -> String {
    let cs = Charset::default();
    let n = rng.random_range(min_len..=max_len);
    (0..n)
        .map(|_| cs.symbols()[rng.random_range(0..cs.symbols().len())])
        .collect()
}

/// The pair generated for item `index` of `split`, independent of every other item.
pub fn generate_item(cfg: &DatasetConfig, split: Split, index: usize, difficulty: Option<Difficulty>) -> Result<TextImagePair> {
    let tag = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, tag, index as u64));
    let difficulty = difficulty.unwrap_or_else(|| Difficulty::ALL[rng.random_range(0..3)]);
    let text = sample_text(&mut rng, cfg.min_len, cfg.max_len);
    let style = RenderStyle::sample(difficulty, &mut rng);
    render_pair(&text, &style, rng.random())
}

fn validate(cfg: &DatasetConfig) -> Result<()> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.max_len > crate::charset::MAX_TEXT_LEN {
        return Err(Error::InvalidArgument(format!(
            "text length range {}..={} must lie in 1..={}",
            cfg.min_len,
            cfg.max_len,
            crate::charset::MAX_TEXT_LEN
        )));
    }
    Ok(())
}

/// Renders every pair, writes the PNGs and finally the manifest. The
/// manifest is written to a temporary file and renamed into place, so a
/// failed build never leaves a partial manifest behind.
pub fn build_dataset(cfg: &DatasetConfig, out_dir: &Path) -> Result<Manifest> {
    validate(cfg)?;
    let img_dir = out_dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;

    let mut jobs: Vec<(Split, usize, Option<Difficulty>)> = (0..cfg.n_train).map(|i| (Split::Train, i, None)).collect();
    let mut idx = 0;
    for d in Difficulty::ALL {
        for _ in 0..cfg.n_test_per_difficulty {
            jobs.push((Split::Test, idx, Some(d)));
            idx += 1;
        }
    }

    let mut records = Vec::with_capacity(jobs.len());
    for (split, i, d) in jobs {
        let pair = generate_item(cfg, split, i, d)?;
        let id = format!(
            "{}_{i:05}",
            match split {
                Split::Train => "train",
                Split::Test => "test",
            }
        );
        let lr_path = format!("images/{id}_lr.png");
        let hr_path = format!("images/{id}_hr.png");
        pair.lr.save_png(&out_dir.join(&lr_path))?;
        pair.hr.save_png(&out_dir.join(&hr_path))?;
        records.push(Record {
            id,
            lr_path,
            hr_path,
            text: pair.text,
            split,
            difficulty: pair.difficulty,
        });
    }

    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    let meta = DatasetMeta {
        config: cfg.clone(),
        charset: Charset::default().as_string(),
        train: manifest.count(Split::Train, None),
        test_counts: Difficulty::ALL
            .iter()
            .map(|&d| (d, manifest.count(Split::Test, Some(d))))
            .collect(),
    };
    write_atomic(
        &out_dir.join(META),
        serde_json::to_string_pretty(&meta).expect("serializable").as_bytes(),
    )?;
    let mut body = Vec::new();
    for r in &manifest.records {
        serde_json::to_writer(&mut body, r).expect("serializable");
        body.push(b'\n');
    }
    write_atomic(&out_dir.join(MANIFEST), &body)?;
    Ok(manifest)
}

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cs = Charset::default();
        let mut records = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: Record = serde_json::from_str(line).map_err(|e| Error::Format {
                path: path.clone(),
                msg: format!("line {}: {e}", n + 1),
            })?;
            cs.encode(&r.text).map_err(|e| Error::Format {
                path: path.clone(),
                msg: format!("line {}: {e}", n + 1),
            })?;
            records.push(r);
        }
        Ok(Self {
            root: dir.to_path_buf(),
            records,
        })
    }

    pub fn count(&self, split: Split, difficulty: Option<Difficulty>) -> usize {
        self.records
            .iter()
            .filter(|r| r.split == split && difficulty.is_none_or(|d| r.difficulty == d))
            .count()
    }

    pub fn load_record(&self, r: &Record) -> Result<Sample> {
        let lr = Image::load_png(&self.root.join(&r.lr_path))?;
        let hr = Image::load_png(&self.root.join(&r.hr_path))?;
        let path = self.root.join(MANIFEST);
        if (lr.h, lr.w) != (super::LR_H, super::LR_W) || (hr.h, hr.w) != (super::HR_H, super::HR_W) {
            return Err(Error::Format {
                path,
                msg: format!("{}: unexpected image size", r.id),
            });
        }
        let label = Charset::default().encode(&r.text)?;
        Ok(Sample {
            id: r.id.clone(),
            pair: TextImagePair {
                lr,
                hr,
                text: r.text.clone(),
                difficulty: r.difficulty,
            },
            label,
            split: r.split,
        })
    }

    /// Loads every pair of `split` into memory, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<Sample>> {
        self.records
            .iter()
            .filter(|r| r.split == split)
            .map(|r| self.load_record(r))
            .collect()
    }
}
