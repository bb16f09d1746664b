use serde::{Deserialize, Serialize};

use crate::config::WatermarkConfig;
use crate::error::{Error, Result};

/// Confusion counts and the rates derived from them. Watermarked is the
/// positive class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub fpr: f64,
    pub fnr: f64,
    pub f1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config: Option<WatermarkConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl MetricsReport {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Self {
        MetricsReport {
            tp,
            fp,
            tn,
            fn_,
            fpr: ratio(fp, fp + tn),
            fnr: ratio(fn_, fn_ + tp),
            f1: ratio(2 * tp, 2 * tp + fp + fn_),
            config: None,
            seed: None,
        }
    }

    pub fn with_context(mut self, config: &WatermarkConfig, seed: u64) -> Self {
        self.config = Some(config.clone());
        self.seed = Some(seed);
        self
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Confusion matrix of `verdicts` (true = watermarked) against `truth`.
/// Rates with an empty denominator are reported as 0.
pub fn evaluate_classifier(verdicts: &[bool], truth: &[bool]) -> Result<MetricsReport> {
    if verdicts.is_empty() {
        return Err(Error::EmptyInput);
    }
    if verdicts.len() != truth.len() {
        return Err(Error::LengthMismatch { left: verdicts.len(), right: truth.len() });
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&v, &t) in verdicts.iter().zip(truth) {
        match (v, t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, tn, fn_))
}
