//! Image metrics, word accuracy and representation similarity.

pub mod accuracy;
pub mod cka;
pub mod metrics;

pub use accuracy::{accuracy, text_matches, weighted_average, EvalReport, SubsetAccuracy};
pub use cka::{cka_matrix, linear_cka, Activations, CkaMatrix, MAX_FEATURES};
pub use metrics::{psnr, ssim};
