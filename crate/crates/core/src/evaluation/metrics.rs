use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::StageLabel;

const K: usize = StageLabel::COUNT;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true stages, columns predicted stages.
    pub confusion: [[u64; K]; K],
    pub per_class_f1: [f64; K],
    pub acc: f64,
    pub mf1: f64,
    /// Stages missing from both truth and predictions; they count as F1 = 0.
    pub absent: Vec<StageLabel>,
}

impl MetricsReport {
    pub fn from_confusion(confusion: [[u64; K]; K]) -> Self {
        let total: u64 = confusion.iter().flatten().sum();
        let trace: u64 = (0..K).map(|i| confusion[i][i]).sum();
        let mut per_class_f1 = [0.0; K];
        let mut absent = Vec::new();
        for c in 0..K {
            let tp = confusion[c][c];
            let support: u64 = confusion[c].iter().sum();
            let predicted: u64 = (0..K).map(|r| confusion[r][c]).sum();
            if support == 0 && predicted == 0 {
                absent.push(StageLabel::from_index(c).expect("stage"));
                continue;
            }
            // 2PR/(P+R) written on counts.
            per_class_f1[c] = 2.0 * tp as f64 / (support + predicted) as f64;
        }
        Self {
            confusion,
            per_class_f1,
            acc: if total == 0 { 0.0 } else { trace as f64 / total as f64 },
            mf1: per_class_f1.iter().sum::<f64>() / K as f64,
            absent,
        }
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }
}

pub fn confusion_matrix(preds: &[StageLabel], truth: &[StageLabel]) -> Result<[[u64; K]; K]> {
    if preds.len() != truth.len() {
        return Err(Error::Shape(format!("{} predictions for {} labels", preds.len(), truth.len())));
    }
    let mut m = [[0u64; K]; K];
    for (p, t) in preds.iter().zip(truth) {
        m[t.index()][p.index()] += 1;
    }
    Ok(m)
}

pub fn compute_metrics(preds: &[StageLabel], truth: &[StageLabel]) -> Result<MetricsReport> {
    Ok(MetricsReport::from_confusion(confusion_matrix(preds, truth)?))
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}
