//! Synthetic paired LR/HR text images.

pub mod dataset;
pub mod font;
pub mod image;
pub mod render;

pub use dataset::{build_dataset, generate_item, sample_text, DatasetConfig, DatasetMeta, Manifest, Record, Sample, Split};
pub use image::Image;
pub use render::{degrade, render_pair, Difficulty, RenderStyle, TextImagePair, HR_H, HR_W, LR_H, LR_W};
