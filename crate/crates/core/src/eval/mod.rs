//! ROCAUC, seed aggregation and the experiment driver.

pub mod experiment;
pub mod report;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetError;
use crate::filterbanks::FeatureKind;
use crate::model::ModelError;

pub use experiment::{run_experiment, ExperimentDescriptor, RunOptions};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("scores and labels differ in length ({scores} vs {labels})")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("only one class present ({positives} positives, {negatives} negatives)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("score {0} is not finite")]
    NonFinite(f64),
    #[error("label {0} is not 0 or 1")]
    BadLabel(u8),
    #[error("experiment descriptor: {0}")]
    Descriptor(String),
    #[error("cell `{cell}` ({feature}): {source}")]
    Cell {
        cell: String,
        feature: FeatureKind,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted one half.
pub fn rocauc(scores: &[f64], labels: &[u8]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&l) = labels.iter().find(|&&l| l > 1) {
        return Err(EvalError::BadLabel(l));
    }
    if let Some(&s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(EvalError::NonFinite(s));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(EvalError::SingleClass { positives, negatives });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(Ordering::Equal));
    // Sum of 1-based average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_run = order[i..j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * pos_in_run as f64;
        i = j;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Mean and population standard deviation. Empty input gives NaNs.
pub fn aggregate_seeds(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One table entry: a cell (or pooled row) for one feature across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub experiment: String,
    pub group: String,
    pub label: String,
    /// Cell id, or the pool id for pooled rows.
    pub cell: String,
    pub train: String,
    pub test: String,
    pub feature: FeatureKind,
    pub seeds: Vec<u64>,
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        experiment: &str,
        group: &str,
        label: &str,
        cell: &str,
        train: &str,
        test: &str,
        feature: FeatureKind,
        seeds: Vec<u64>,
        values: Vec<f64>,
    ) -> Self {
        let (mean, std) = aggregate_seeds(&values);
        Self {
            experiment: experiment.into(),
            group: group.into(),
            label: label.into(),
            cell: cell.into(),
            train: train.into(),
            test: test.into(),
            feature,
            seeds,
            values,
            mean,
            std,
        }
    }

    /// True when mean and std match a fresh aggregation of the stored values.
    pub fn is_consistent(&self) -> bool {
        let (m, s) = aggregate_seeds(&self.values);
        (m - self.mean).abs() <= 1e-12 && (s - self.std).abs() <= 1e-12
    }
}
