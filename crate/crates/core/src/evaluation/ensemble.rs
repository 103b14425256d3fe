use super::{argmax_labels, pooled_metrics, MetricsReport, SubjectPredictions};
use crate::error::{Error, Result};
use crate::signal_io::{z_normalize, StagedRecording};
use crate::tensor::Tensor;

/// Anything that maps a recording to per-epoch stage probabilities `[N, 5]`.
pub trait EpochClassifier {
    fn predict_proba(&self, rec: &StagedRecording) -> Result<Tensor>;

    /// Models may only be ensembled when their signatures agree.
    fn signature(&self) -> String;
}

/// Element-wise mean of probability tables of equal shape.
pub fn soft_vote(probs: &[Tensor]) -> Result<Tensor> {
    let first = probs.first().ok_or_else(|| Error::Config("empty ensemble".into()))?;
    let mut acc = Tensor::zeros(first.shape());
    for p in probs {
        if p.shape() != first.shape() {
            return Err(Error::Shape(format!("probabilities {:?} vs {:?}", p.shape(), first.shape())));
        }
        acc.add_assign(p);
    }
    Ok(acc.map(|v| v / probs.len() as f64))
}

/// Cross-dataset evaluation: every foreign recording is z-normalised, scored
/// by each fold model, and the averaged probabilities decide the stage.
pub fn run_scenario3(
    models: &[&dyn EpochClassifier],
    foreign: &[StagedRecording],
) -> Result<(MetricsReport, Vec<SubjectPredictions>)> {
    if models.len() < 2 {
        return Err(Error::Config("soft voting needs at least two models".into()));
    }
    let sig = models[0].signature();
    if let Some(m) = models.iter().find(|m| m.signature() != sig) {
        return Err(Error::Config(format!("incompatible models `{sig}` and `{}`", m.signature())));
    }
    let mut predictions = Vec::with_capacity(foreign.len());
    for rec in foreign {
        let rec = z_normalize(rec)?;
        let probs: Vec<Tensor> = models.iter().map(|m| m.predict_proba(&rec)).collect::<Result<_>>()?;
        let avg = soft_vote(&probs)?;
        predictions.push(SubjectPredictions {
            subject: rec.subject_id.clone(),
            truth: rec.labels.clone(),
            preds: argmax_labels(&avg),
        });
    }
    Ok((pooled_metrics(&predictions)?, predictions))
}
