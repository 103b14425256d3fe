//! Downstream evaluation: subject-grouped folds, metrics, the three
//! evaluation scenarios and report artifacts.

mod ensemble;
mod finetune;
mod folds;
mod metrics;
mod probe;
pub mod report;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub use ensemble::{run_scenario3, soft_vote, EpochClassifier};
pub use finetune::{inference_windows, run_scenario2, FinetuneConfig, Scenario2Outcome, TcmClassifier};
pub use folds::{split_subject_kfold, FoldSplit};
pub use metrics::{compute_metrics, confusion_matrix, mean_std, MetricsReport};
pub use probe::{embed_recordings, run_scenario1, LinearProbe, ProbeClassifier, ProbeConfig, Scenario1Outcome};

use crate::error::{Error, Result};
use crate::signal_io::{StageLabel, StagedRecording};

/// Which labelled subjects the downstream head is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSubjects {
    Validation,
    Train,
    TrainAndValidation,
}

impl LabelSubjects {
    pub fn pick<'a>(self, fold: &'a FoldSplit) -> Vec<&'a String> {
        match self {
            Self::Validation => fold.val.iter().collect(),
            Self::Train => fold.train.iter().collect(),
            Self::TrainAndValidation => fold.train.iter().chain(&fold.val).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectPredictions {
    pub subject: String,
    pub truth: Vec<StageLabel>,
    pub preds: Vec<StageLabel>,
}

/// Metrics pooled over every epoch of the given subjects.
pub fn pooled_metrics(preds: &[SubjectPredictions]) -> Result<MetricsReport> {
    let truth: Vec<StageLabel> = preds.iter().flat_map(|p| p.truth.iter().copied()).collect();
    let pred: Vec<StageLabel> = preds.iter().flat_map(|p| p.preds.iter().copied()).collect();
    compute_metrics(&pred, &truth)
}

pub(crate) fn index_recordings(recs: &[StagedRecording]) -> HashMap<&str, &StagedRecording> {
    recs.iter().map(|r| (r.subject_id.as_str(), r)).collect()
}

pub(crate) fn lookup<'a>(
    index: &HashMap<&str, &'a StagedRecording>,
    subjects: &[&String],
) -> Result<Vec<&'a StagedRecording>> {
    subjects
        .iter()
        .map(|s| {
            index
                .get(s.as_str())
                .copied()
                .ok_or_else(|| Error::Config(format!("subject `{s}` has no recording")))
        })
        .collect()
}

pub(crate) fn label_indices(labels: &[StageLabel]) -> Vec<usize> {
    labels.iter().map(|l| l.index()).collect()
}

pub(crate) fn argmax_labels(probs: &crate::tensor::Tensor) -> Vec<StageLabel> {
    probs
        .argmax_rows()
        .into_iter()
        .map(|i| StageLabel::from_index(i).expect("stage"))
        .collect()
}

/// Inverse-frequency weights normalised to mean 1; unseen classes get 0.
pub fn inverse_frequency_weights(labels: &[usize]) -> Vec<f64> {
    let k = StageLabel::COUNT;
    let mut counts = vec![0usize; k];
    labels.iter().for_each(|&l| counts[l] += 1);
    let present = counts.iter().filter(|&&c| c > 0).count().max(1);
    let raw: Vec<f64> = counts.iter().map(|&c| if c > 0 { 1.0 / c as f64 } else { 0.0 }).collect();
    let mean = raw.iter().sum::<f64>() / present as f64;
    raw.iter().map(|w| w / mean).collect()
}

#[cfg(test)]
mod tests;
