//! Word accuracy per difficulty subset and the count-weighted average.

use serde::{Deserialize, Serialize};

use crate::charset::normalize_text;
use crate::data::Difficulty;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetAccuracy {
    pub difficulty: Difficulty,
    pub correct: usize,
    pub count: usize,
    /// Percent.
    pub accuracy: f64,
}

/// Recognition and image-quality summary of one evaluation run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub subsets: Vec<SubsetAccuracy>,
    /// Count-weighted mean of the subset accuracies, percent.
    pub average: f64,
    pub count: usize,
    /// Mean PSNR in dB; `"inf"` in JSON when every pair was identical.
    #[serde(with = "db_serde", default, skip_serializing_if = "Option::is_none")]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ssim: Option<f64>,
}

impl EvalReport {
    pub fn subset(&self, d: Difficulty) -> Option<&SubsetAccuracy> {
        self.subsets.iter().find(|s| s.difficulty == d)
    }

    /// The average recomputed from the subset fields.
    pub fn recomputed_average(&self) -> f64 {
        weighted_average(&self.subsets.iter().map(|s| (s.accuracy, s.count)).collect::<Vec<_>>())
    }
}

/// `Σ accᵢ·Nᵢ / Σ Nᵢ`; zero when there are no items.
pub fn weighted_average(parts: &[(f64, usize)]) -> f64 {
    let n: usize = parts.iter().map(|p| p.1).sum();
    if n == 0 {
        return 0.0;
    }
    parts.iter().map(|&(a, c)| a * c as f64).sum::<f64>() / n as f64
}

/// Case-insensitive alphanumeric match.
pub fn text_matches(pred: &str, label: &str) -> bool {
    normalize_text(pred) == normalize_text(label)
}

/// Accuracy per difficulty present in `difficulties`, in the canonical order.
pub fn accuracy(preds: &[String], labels: &[String], difficulties: &[Difficulty]) -> Result<EvalReport> {
    if preds.len() != labels.len() || preds.len() != difficulties.len() {
        return Err(Error::InvalidArgument(format!(
            "accuracy: {} predictions, {} labels, {} difficulties",
            preds.len(),
            labels.len(),
            difficulties.len()
        )));
    }
    let mut subsets = Vec::new();
    for d in Difficulty::ALL {
        let idx: Vec<usize> = (0..preds.len()).filter(|&i| difficulties[i] == d).collect();
        if idx.is_empty() {
            continue;
        }
        let correct = idx.iter().filter(|&&i| text_matches(&preds[i], &labels[i])).count();
        subsets.push(SubsetAccuracy {
            difficulty: d,
            correct,
            count: idx.len(),
            accuracy: 100.0 * correct as f64 / idx.len() as f64,
        });
    }
    let mut report = EvalReport {
        subsets,
        average: 0.0,
        count: preds.len(),
        psnr: None,
        ssim: None,
    };
    report.average = report.recomputed_average();
    Ok(report)
}

mod db_serde {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(x) if x.is_infinite() && *x > 0.0 => s.serialize_str("inf"),
            Some(x) => s.serialize_f64(*x),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Option::<Db>::deserialize(d)? {
            None => Ok(None),
            Some(Db::Num(x)) => Ok(Some(x)),
            Some(Db::Text(t)) if t == "inf" => Ok(Some(f64::INFINITY)),
            Some(Db::Text(t)) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
        }
    }
}
