//! Pretrain-then-evaluate pipeline and the ablation sweeps built on it.

use std::fmt::Write as _;
use std::str::FromStr;
use std::time::Instant;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::evaluation::{
    embed_recordings, run_scenario1, run_scenario2, split_subject_kfold, FoldSplit, MetricsReport,
};
use crate::evaluation::report::Table7Row;
use crate::framing::{ablation_settings, FrameConfig};
use crate::neuronet::{pretrain, LogRecord, NeuroNet, PretrainOptions, Preset};
use crate::signal_io::StagedRecording;
use crate::tcm::TcmKind;

/// Subject-grouped folds for `recs` under the config's fold settings.
pub fn folds_for(cfg: &RunConfig, recs: &[StagedRecording]) -> Result<Vec<FoldSplit>> {
    let subjects: Vec<String> = recs.iter().map(|r| r.subject_id.clone()).collect();
    split_subject_kfold(&subjects, cfg.data.folds, cfg.data.val_subjects, cfg.seed)
}

/// Self-supervised pretraining on the training subjects of `fold`.
pub fn pretrain_fold(
    cfg: &RunConfig,
    recs: &[StagedRecording],
    fold: &FoldSplit,
    max_steps: Option<u64>,
    on_step: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<(NeuroNet, Vec<LogRecord>)> {
    let epochs: Vec<&[f64]> = recs
        .iter()
        .filter(|r| fold.train.contains(&r.subject_id))
        .flat_map(|r| r.epochs.iter().map(Vec::as_slice))
        .collect();
    if epochs.len() < 2 {
        return Err(Error::Config(format!("fold {} has fewer than two training epochs", fold.fold)));
    }
    let mut model = NeuroNet::new(cfg.model_config(), cfg.seed)?;
    let opts = PretrainOptions {
        epochs: cfg.ssl.epochs,
        batch_size: cfg.ssl.batch_size,
        seed: cfg.seed,
        max_steps,
    };
    let log = pretrain(&mut model, &epochs, opts, on_step)?;
    Ok((model, log))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Knob {
    MaskRatio,
    Frame,
    Decoder,
    Context,
    Alpha,
}

impl FromStr for Knob {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mask_ratio" => Self::MaskRatio,
            "frame" => Self::Frame,
            "decoder" => Self::Decoder,
            "context" => Self::Context,
            "alpha" => Self::Alpha,
            _ => {
                return Err(Error::Config(format!(
                    "unknown knob `{s}` (expected mask_ratio, frame, decoder, context or alpha)"
                )))
            }
        })
    }
}

impl Knob {
    pub fn name(self) -> &'static str {
        match self {
            Self::MaskRatio => "mask_ratio",
            Self::Frame => "frame",
            Self::Decoder => "decoder",
            Self::Context => "context",
            Self::Alpha => "alpha",
        }
    }

    /// The grid swept when no values are given. Frames are written
    /// `size_s:step_s`, decoders `dim x depth`.
    pub fn default_values(self) -> Vec<String> {
        match self {
            Self::MaskRatio => ["0.5", "0.6", "0.7", "0.75", "0.8", "0.9"].map(String::from).to_vec(),
            Self::Frame => ablation_settings().iter().map(|(s, t, _)| format!("{s}:{t}")).collect(),
            Self::Decoder => [192, 256, 512]
                .iter()
                .flat_map(|d| (1..=4).map(move |l| format!("{d}x{l}")))
                .collect(),
            Self::Context => ["10", "20", "30"].map(String::from).to_vec(),
            Self::Alpha => ["0", "0.1", "0.5", "1", "2"].map(String::from).to_vec(),
        }
    }

    /// `base` with this knob set to `value`.
    pub fn apply(self, base: &RunConfig, value: &str) -> Result<RunConfig> {
        let bad = || Error::Config(format!("bad {} value `{value}`", self.name()));
        let mut cfg = base.clone();
        match self {
            Self::MaskRatio => cfg.loss.mask_ratio = value.parse().map_err(|_| bad())?,
            Self::Alpha => cfg.loss.alpha = value.parse().map_err(|_| bad())?,
            Self::Context => cfg.finetune.tcm.context_length = value.parse().map_err(|_| bad())?,
            Self::Frame => {
                let (size, step) = value.split_once(':').ok_or_else(bad)?;
                let size: f64 = size.parse().map_err(|_| bad())?;
                let step: f64 = step.parse().map_err(|_| bad())?;
                cfg.frame = FrameConfig::from_seconds(size, step, 100.0);
            }
            Self::Decoder => {
                let (dim, depth) = value.split_once('x').ok_or_else(bad)?;
                cfg.decoder.dim = dim.parse().map_err(|_| bad())?;
                cfg.decoder.depth = depth.parse().map_err(|_| bad())?;
                if matches!(cfg.preset, Preset::T | Preset::B) {
                    cfg.preset = Preset::Custom;
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub knob: String,
    pub value: String,
    pub acc: f64,
    pub mf1: f64,
    pub final_loss: f64,
    pub steps: u64,
    pub wall_ms: u64,
}

#[derive(Clone, Debug, Default)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    /// Only for the context knob: every temporal model at every length.
    pub table7: Vec<Table7Row>,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepOptions {
    pub fold: usize,
    pub max_ssl_steps: Option<u64>,
}

/// Runs one sweep on a single fold. Backbone knobs retrain the backbone per
/// value and score it with the linear probe; the context knob pretrains once
/// and fine-tunes every temporal model at each length.
pub fn run_sweep(
    base: &RunConfig,
    recs: &[StagedRecording],
    knob: Knob,
    values: &[String],
    opts: SweepOptions,
) -> Result<SweepOutcome> {
    let configs: Vec<RunConfig> = values.iter().map(|v| knob.apply(base, v)).collect::<Result<_>>()?;
    let folds = folds_for(base, recs)?;
    let fold = folds
        .get(opts.fold)
        .ok_or_else(|| Error::Config(format!("fold {} out of range", opts.fold)))?;
    let mut out = SweepOutcome::default();

    if knob == Knob::Context {
        let start = Instant::now();
        let (backbone, log) = pretrain_fold(base, recs, fold, opts.max_ssl_steps, |_| Ok(()))?;
        let ssl_ms = start.elapsed().as_millis() as u64;
        for kind in [TcmKind::Mamba, TcmKind::Lstm, TcmKind::Mha, TcmKind::LstmMha] {
            for (cfg, value) in configs.iter().zip(values) {
                let start = Instant::now();
                let mut ft = cfg.finetune.clone();
                ft.tcm.kind = kind;
                ft.tcm.d_model = backbone.cfg.encoder.dim;
                let s2 = run_scenario2(&backbone, recs, fold, &ft, cfg.seed)?;
                out.table7.push(Table7Row {
                    model: kind.label().into(),
                    context_length: ft.tcm.context_length,
                    acc: s2.report.acc,
                    mf1: s2.report.mf1,
                });
                if kind == TcmKind::Mamba {
                    out.rows.push(row(knob, value, &s2.report, &log, ssl_ms + start.elapsed().as_millis() as u64));
                }
            }
        }
        return Ok(out);
    }

    for (cfg, value) in configs.iter().zip(values) {
        let start = Instant::now();
        let (backbone, log) = pretrain_fold(cfg, recs, fold, opts.max_ssl_steps, |_| Ok(()))?;
        let emb = embed_recordings(&backbone, recs)?;
        let s1 = run_scenario1(&emb, recs, fold, &cfg.probe, cfg.seed)?;
        out.rows.push(row(knob, value, &s1.report, &log, start.elapsed().as_millis() as u64));
    }
    Ok(out)
}

fn row(knob: Knob, value: &str, report: &MetricsReport, log: &[LogRecord], wall_ms: u64) -> SweepRow {
    SweepRow {
        knob: knob.name().into(),
        value: value.into(),
        acc: report.acc,
        mf1: report.mf1,
        final_loss: log.last().map_or(f64::NAN, |r| r.l_total),
        steps: log.len() as u64,
        wall_ms,
    }
}

pub const SWEEP_HEADER: &str = "knob,value,acc,mf1,final_loss,steps,wall_ms";

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{SWEEP_HEADER}\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{:.4},{:.4},{:.6},{},{}",
            r.knob, r.value, r.acc, r.mf1, r.final_loss, r.steps, r.wall_ms
        )
        .expect("string write");
    }
    out
}
