use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    argmax_labels, index_recordings, inverse_frequency_weights, label_indices, lookup, pooled_metrics, EpochClassifier,
    FoldSplit, LabelSubjects, MetricsReport, SubjectPredictions,
};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::neuronet::NeuroNet;
use crate::nn::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, Linear, ParamId, ParamKind, ParamStore};
use crate::rng;
use crate::signal_io::{StageLabel, StagedRecording};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub class_weights: bool,
    /// Standardise features with training-set statistics before the layer.
    pub standardize: bool,
    pub label_subjects: LabelSubjects,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 300,
            batch_size: 512,
            weight_decay: 0.01,
            class_weights: false,
            standardize: true,
            label_subjects: LabelSubjects::Validation,
        }
    }
}

/// A single linear layer on frozen embeddings.
#[derive(Clone, Debug)]
pub struct LinearProbe {
    pub store: ParamStore,
    pub layer: Linear,
    mean: ParamId,
    scale: ParamId,
}

impl LinearProbe {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, &[rng::hash_str("probe")]);
        let layer = Linear::new(&mut store, "probe", dim, StageLabel::COUNT, true, &mut r);
        let mean = store.add_const("probe.feature_mean", &[dim], 0.0, ParamKind::Buffer);
        let scale = store.add_const("probe.feature_scale", &[dim], 1.0, ParamKind::Buffer);
        Self {
            store,
            layer,
            mean,
            scale,
        }
    }

    pub fn dim(&self) -> usize {
        self.layer.d_in
    }

    fn standardize(&self, x: &Tensor) -> Tensor {
        let (m, s) = (self.store.get(self.mean).data(), self.store.get(self.scale).data());
        let d = self.dim();
        Tensor::from_fn(x.shape(), |i| (x.data()[i] - m[i % d]) * s[i % d])
    }

    /// Trains on `x: [N, D]` and labels; returns the mean loss of each pass.
    pub fn fit(&mut self, x: &Tensor, labels: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<Vec<f64>> {
        let (n, d) = (x.dim(0), x.dim(1));
        if n != labels.len() || d != self.dim() {
            return Err(Error::Shape(format!("probe fit on {:?} with {} labels", x.shape(), labels.len())));
        }
        if cfg.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if cfg.standardize && n > 0 {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for row in 0..n {
                x.row(row).iter().zip(&mut mean).for_each(|(v, m)| *m += v / n as f64);
            }
            for row in 0..n {
                for (j, v) in x.row(row).iter().enumerate() {
                    var[j] += (v - mean[j]).powi(2) / n as f64;
                }
            }
            let scale: Vec<f64> = var.iter().map(|v| 1.0 / (v.sqrt() + 1e-8)).collect();
            self.store.set(self.mean, Tensor::new(&[d], mean));
            self.store.set(self.scale, Tensor::new(&[d], scale));
        }
        let xs = self.standardize(x);
        let weights = cfg.class_weights.then(|| inverse_frequency_weights(labels));
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let mut history = Vec::with_capacity(cfg.epochs);
        let mut order: Vec<usize> = (0..n).collect();
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng::stream(seed, &[rng::hash_str("probe-epoch"), epoch as u64]));
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let rows: Vec<f64> = batch.iter().flat_map(|&i| xs.row(i).iter().copied()).collect();
                let targets: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
                let grads = {
                    let mut g = Graph::with_params(&self.store);
                    let xb = g.input(Tensor::new(&[batch.len(), d], rows));
                    let logits = self.layer.forward(&mut g, xb);
                    let loss = g.cross_entropy(logits, &targets, weights.as_deref());
                    total += g.value(loss).item() * batch.len() as f64;
                    g.backward(loss).into_params()
                };
                opt.step(&mut self.store, &grads);
            }
            history.push(total / n.max(1) as f64);
        }
        Ok(history)
    }

    pub fn logits(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::with_params(&self.store);
        let xi = g.input(self.standardize(x));
        let y = self.layer.forward(&mut g, xi);
        g.value(y).clone()
    }

    pub fn predict_proba(&self, x: &Tensor) -> Tensor {
        let mut g = Graph::new();
        let l = g.input(self.logits(x));
        let p = g.softmax_last(l);
        g.value(p).clone()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.store, path)
    }

    pub fn load(path: &Path, dim: usize) -> Result<Self> {
        let mut probe = Self::new(dim, 0);
        load_checkpoint(&mut probe.store, path)?;
        Ok(probe)
    }
}

/// Class-token embeddings of every recording, keyed by subject.
pub fn embed_recordings(backbone: &NeuroNet, recs: &[StagedRecording]) -> Result<HashMap<String, Tensor>> {
    recs.iter()
        .map(|r| {
            let epochs: Vec<&[f64]> = r.epochs.iter().map(Vec::as_slice).collect();
            Ok((r.subject_id.clone(), backbone.embed_epochs(&epochs)?))
        })
        .collect()
}

fn stack(parts: &[&Tensor], dim: usize) -> Tensor {
    let data: Vec<f64> = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(&[data.len() / dim.max(1), dim], data)
}

#[derive(Clone, Debug)]
pub struct Scenario1Outcome {
    pub fold: usize,
    pub report: MetricsReport,
    pub probe: LinearProbe,
    pub predictions: Vec<SubjectPredictions>,
    pub train_losses: Vec<f64>,
}

/// Linear evaluation: the backbone is represented only by its precomputed
/// embeddings, so nothing but the probe can change.
pub fn run_scenario1(
    embeddings: &HashMap<String, Tensor>,
    recs: &[StagedRecording],
    fold: &FoldSplit,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<Scenario1Outcome> {
    let index = index_recordings(recs);
    let emb = |s: &String| {
        embeddings
            .get(s)
            .ok_or_else(|| Error::Config(format!("subject `{s}` has no embeddings")))
    };
    let train_ids = cfg.label_subjects.pick(fold);
    let train_recs = lookup(&index, &train_ids)?;
    let train_emb: Vec<&Tensor> = train_ids.iter().map(|s| emb(s)).collect::<Result<_>>()?;
    let dim = train_emb
        .first()
        .map(|t| t.dim(1))
        .ok_or_else(|| Error::Config("no labelled subjects in fold".into()))?;
    let x = stack(&train_emb, dim);
    let labels: Vec<usize> = train_recs.iter().flat_map(|r| label_indices(&r.labels)).collect();
    let mut probe = LinearProbe::new(dim, rng::derive_key(seed, &[fold.fold as u64]));
    let train_losses = probe.fit(&x, &labels, cfg, rng::derive_key(seed, &[fold.fold as u64, 1]))?;

    let test_ids: Vec<&String> = fold.test.iter().collect();
    let test_recs = lookup(&index, &test_ids)?;
    let mut predictions = Vec::with_capacity(test_recs.len());
    for (rec, id) in test_recs.iter().zip(&test_ids) {
        let probs = probe.predict_proba(emb(id)?);
        predictions.push(SubjectPredictions {
            subject: rec.subject_id.clone(),
            truth: rec.labels.clone(),
            preds: argmax_labels(&probs),
        });
    }
    Ok(Scenario1Outcome {
        fold: fold.fold,
        report: pooled_metrics(&predictions)?,
        probe,
        predictions,
        train_losses,
    })
}

/// Backbone plus probe as a stand-alone epoch classifier.
#[derive(Clone, Debug)]
pub struct ProbeClassifier {
    pub backbone: NeuroNet,
    pub probe: LinearProbe,
}

impl EpochClassifier for ProbeClassifier {
    fn predict_proba(&self, rec: &StagedRecording) -> Result<Tensor> {
        let epochs: Vec<&[f64]> = rec.epochs.iter().map(Vec::as_slice).collect();
        let emb = self.backbone.embed_epochs(&epochs)?;
        Ok(self.probe.predict_proba(&emb))
    }

    fn signature(&self) -> String {
        let c = &self.backbone.cfg;
        format!("probe/{:?}/{}", c.frame, c.encoder.dim)
    }
}
