use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{
    argmax_labels, index_recordings, inverse_frequency_weights, label_indices, lookup, pooled_metrics, EpochClassifier,
    FoldSplit, LabelSubjects, MetricsReport, SubjectPredictions,
};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::neuronet::{NeuroNet, NeuroNetConfig};
use crate::nn::{load_checkpoint, save_checkpoint, AdamW, AdamWConfig, ParamId};
use crate::rng;
use crate::signal_io::{StageLabel, StagedRecording};
use crate::tcm::{context_windows, MambaConfig, OutputMode, TemporalContext, Window};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub lr: f64,
    pub epochs: usize,
    /// Windows per optimiser step.
    pub batch_size: usize,
    pub weight_decay: f64,
    pub tcm: MambaConfig,
    /// Start offset between training windows; the context length when absent.
    pub train_stride: Option<usize>,
    pub class_weights: bool,
    pub label_subjects: LabelSubjects,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lr: 5e-3,
            epochs: 100,
            batch_size: 128,
            weight_decay: 0.01,
            tcm: MambaConfig::default(),
            train_stride: None,
            class_weights: false,
            label_subjects: LabelSubjects::Validation,
        }
    }
}

/// Windows whose predictions are read out at inference: one window per epoch
/// (ending at it) for many-to-one heads, otherwise non-overlapping windows.
pub fn inference_windows(num_epochs: usize, ctx: usize, mode: OutputMode) -> Vec<Window> {
    match mode {
        OutputMode::SeqToSeq => context_windows(num_epochs, ctx),
        OutputMode::ManyToOne => (0..num_epochs)
            .map(|t| {
                let first = (t + 1).saturating_sub(ctx);
                let mut indices = vec![first; ctx - (t + 1 - first)];
                indices.extend(first..=t);
                Window {
                    indices,
                    keep_from: ctx - 1,
                }
            })
            .collect(),
    }
}

fn training_windows(num_epochs: usize, ctx: usize, stride: usize) -> Vec<Window> {
    if num_epochs < ctx {
        return context_windows(num_epochs, ctx);
    }
    let mut starts: Vec<usize> = (0..=num_epochs - ctx).step_by(stride.max(1)).collect();
    if *starts.last().expect("non-empty") != num_epochs - ctx {
        starts.push(num_epochs - ctx);
    }
    starts
        .into_iter()
        .map(|s| Window {
            indices: (s..s + ctx).collect(),
            keep_from: 0,
        })
        .collect()
}

/// Backbone with a temporal context head. The last encoder block, the
/// encoder norm and the head are trainable; everything before is frozen.
#[derive(Clone, Debug)]
pub struct TcmClassifier {
    pub net: NeuroNet,
    pub tcm: TemporalContext,
}

#[derive(Serialize, Deserialize)]
struct FinetuneSnapshot {
    backbone: NeuroNetConfig,
    tcm: MambaConfig,
}

impl TcmClassifier {
    pub fn new(backbone: &NeuroNet, mut tcm_cfg: MambaConfig, seed: u64) -> Result<Self> {
        if backbone.cfg.encoder.depth == 0 {
            return Err(Error::Config("scenario 2 needs at least one encoder block".into()));
        }
        tcm_cfg.d_model = backbone.cfg.encoder.dim;
        let mut net = backbone.clone();
        let mut r = rng::stream(seed, &[rng::hash_str("tcm")]);
        let tcm = TemporalContext::new(&mut net.store, "tcm", tcm_cfg, &mut r)?;
        Ok(Self { net, tcm })
    }

    fn last_block(&self) -> usize {
        self.net.cfg.encoder.depth - 1
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        let store = &self.net.store;
        let block = self.net.encoder.block_prefix(self.last_block()).to_string();
        store
            .ids()
            .filter(|&id| {
                let n = store.name(id);
                store.is_trainable(id) && (n.starts_with(&block) || n.starts_with("encoder.norm.") || n.starts_with("tcm."))
            })
            .collect()
    }

    pub fn frozen_ids(&self) -> Vec<ParamId> {
        let train: HashSet<ParamId> = self.trainable_ids().into_iter().collect();
        self.net.store.ids().filter(|id| !train.contains(id)).collect()
    }

    /// Frozen encoder tokens entering the last block, `[N, M + 1, D]`.
    pub fn prefix_tokens(&self, rec: &StagedRecording) -> Result<Tensor> {
        let epochs: Vec<&[f64]> = rec.epochs.iter().map(Vec::as_slice).collect();
        self.net.tokens_before_block(&epochs, self.last_block())
    }

    fn gather(tokens: &Tensor, windows: &[&Window]) -> Tensor {
        let per = tokens.len() / tokens.dim(0).max(1);
        let mut data = Vec::with_capacity(windows.len() * windows.first().map_or(0, |w| w.indices.len()) * per);
        for w in windows {
            for &i in &w.indices {
                data.extend_from_slice(&tokens.data()[i * per..(i + 1) * per]);
            }
        }
        let rows = data.len() / per;
        Tensor::new(&[rows, tokens.dim(1), tokens.dim(2)], data)
    }

    /// Logits for a batch of windows over one recording's prefix tokens.
    fn window_logits(&self, g: &mut Graph, tokens: &Tensor, windows: &[&Window]) -> Result<Var> {
        let ctx = self.tcm.cfg.context_length;
        let d = self.net.cfg.encoder.dim;
        let x = g.input(Self::gather(tokens, windows));
        let h = self.net.encoder.run_blocks(g, x, self.last_block())?;
        let cls = g.narrow(h, 1, 0, 1);
        let seq = g.reshape(cls, &[windows.len(), ctx, d]);
        self.tcm.classify(g, seq)
    }

    fn targets(&self, labels: &[usize], w: &Window) -> Vec<usize> {
        match self.tcm.cfg.output_mode {
            OutputMode::SeqToSeq => w.indices.iter().map(|&i| labels[i]).collect(),
            OutputMode::ManyToOne => vec![labels[*w.indices.last().expect("window")]],
        }
    }

    /// Stage probabilities `[N, 5]` for one recording given its prefix tokens.
    pub fn predict_proba_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let n = tokens.dim(0);
        let ctx = self.tcm.cfg.context_length;
        let mode = self.tcm.cfg.output_mode;
        let mut out = vec![0.0; n * StageLabel::COUNT];
        let windows = inference_windows(n, ctx, mode);
        for chunk in windows.chunks(8) {
            let refs: Vec<&Window> = chunk.iter().collect();
            let mut g = Graph::with_params(&self.net.store);
            g.freeze(self.net.store.ids());
            let logits = self.window_logits(&mut g, tokens, &refs)?;
            let p = g.softmax_last(logits);
            let pv = g.value(p);
            let k = StageLabel::COUNT;
            for (wi, w) in chunk.iter().enumerate() {
                for pos in w.keep_from..ctx {
                    let row = match mode {
                        OutputMode::SeqToSeq => wi * ctx + pos,
                        OutputMode::ManyToOne => wi,
                    };
                    let epoch = w.indices[pos];
                    out[epoch * k..(epoch + 1) * k].copy_from_slice(&pv.data()[row * k..(row + 1) * k]);
                }
            }
        }
        Ok(Tensor::new(&[n, StageLabel::COUNT], out))
    }

    /// Trains on `(prefix tokens, labels)` pairs; returns the mean loss per pass.
    pub fn fit(&mut self, data: &[(Tensor, Vec<usize>)], cfg: &FinetuneConfig, seed: u64) -> Result<Vec<f64>> {
        let ctx = self.tcm.cfg.context_length;
        let stride = cfg.train_stride.unwrap_or(ctx);
        let windows: Vec<(usize, Window)> = data
            .iter()
            .enumerate()
            .flat_map(|(r, (t, _))| training_windows(t.dim(0), ctx, stride).into_iter().map(move |w| (r, w)))
            .collect();
        if windows.is_empty() {
            return Err(Error::Config("no training windows".into()));
        }
        let all_labels: Vec<usize> = data.iter().flat_map(|(_, l)| l.iter().copied()).collect();
        let weights = cfg.class_weights.then(|| inverse_frequency_weights(&all_labels));
        let frozen = self.frozen_ids();
        let mut opt = AdamW::new(AdamWConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamWConfig::default()
        });
        let mut order: Vec<usize> = (0..windows.len()).collect();
        let mut history = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng::stream(seed, &[rng::hash_str("tcm-epoch"), epoch as u64]));
            let mut total = 0.0;
            for batch in order.chunks(cfg.batch_size.max(1)) {
                let grads = {
                    let mut g = Graph::with_params(&self.net.store);
                    g.freeze(frozen.iter().copied());
                    // One recording at a time keeps the gathered inputs small.
                    let mut losses = Vec::new();
                    let mut targets_total = 0;
                    for r in 0..data.len() {
                        let ws: Vec<&Window> = batch.iter().filter(|&&i| windows[i].0 == r).map(|&i| &windows[i].1).collect();
                        if ws.is_empty() {
                            continue;
                        }
                        let targets: Vec<usize> = ws.iter().flat_map(|w| self.targets(&data[r].1, w)).collect();
                        let logits = self.window_logits(&mut g, &data[r].0, &ws)?;
                        let l = self.tcm.loss(&mut g, logits, &targets, weights.as_deref())?;
                        losses.push(g.scale(l, targets.len() as f64));
                        targets_total += targets.len();
                    }
                    let mut loss = losses[0];
                    for &l in &losses[1..] {
                        loss = g.add(loss, l);
                    }
                    let loss = g.scale(loss, 1.0 / targets_total as f64);
                    total += g.value(loss).item() * batch.len() as f64;
                    g.backward(loss).into_params()
                };
                opt.step(&mut self.net.store, &grads);
            }
            history.push(total / windows.len() as f64);
        }
        Ok(history)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.net.store, &dir.join("finetuned.bin"))?;
        let snap = FinetuneSnapshot {
            backbone: self.net.cfg.clone(),
            tcm: self.tcm.cfg.clone(),
        };
        fs::write(dir.join("finetune_config.json"), serde_json::to_string_pretty(&snap)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let snap: FinetuneSnapshot = serde_json::from_str(&fs::read_to_string(dir.join("finetune_config.json"))?)?;
        let backbone = NeuroNet::new(snap.backbone, 0)?;
        let mut model = Self::new(&backbone, snap.tcm, 0)?;
        load_checkpoint(&mut model.net.store, &dir.join("finetuned.bin"))?;
        Ok(model)
    }
}

impl EpochClassifier for TcmClassifier {
    fn predict_proba(&self, rec: &StagedRecording) -> Result<Tensor> {
        self.predict_proba_tokens(&self.prefix_tokens(rec)?)
    }

    fn signature(&self) -> String {
        let c = &self.net.cfg;
        format!("tcm/{:?}/{}/{}", c.frame, c.encoder.dim, self.tcm.cfg.context_length)
    }
}

#[derive(Clone, Debug)]
pub struct Scenario2Outcome {
    pub fold: usize,
    pub report: MetricsReport,
    pub model: TcmClassifier,
    pub predictions: Vec<SubjectPredictions>,
    pub train_losses: Vec<f64>,
}

/// Fine-tunes the last encoder block plus a temporal context head on the
/// labelled subjects of `fold` and evaluates on its test subjects.
pub fn run_scenario2(
    backbone: &NeuroNet,
    recs: &[StagedRecording],
    fold: &FoldSplit,
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<Scenario2Outcome> {
    let index = index_recordings(recs);
    let mut model = TcmClassifier::new(backbone, cfg.tcm.clone(), rng::derive_key(seed, &[fold.fold as u64]))?;
    let train = lookup(&index, &cfg.label_subjects.pick(fold))?;
    let data: Vec<(Tensor, Vec<usize>)> = train
        .iter()
        .map(|r| Ok((model.prefix_tokens(r)?, label_indices(&r.labels))))
        .collect::<Result<_>>()?;
    let train_losses = model.fit(&data, cfg, rng::derive_key(seed, &[fold.fold as u64, 1]))?;
    let test_ids: Vec<&String> = fold.test.iter().collect();
    let mut predictions = Vec::new();
    for rec in lookup(&index, &test_ids)? {
        let probs = model.predict_proba(rec)?;
        predictions.push(SubjectPredictions {
            subject: rec.subject_id.clone(),
            truth: rec.labels.clone(),
            preds: argmax_labels(&probs),
        });
    }
    Ok(Scenario2Outcome {
        fold: fold.fold,
        report: pooled_metrics(&predictions)?,
        model,
        predictions,
        train_losses,
    })
}
