use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use neuronet::config::RunConfig;
use neuronet::evaluation::report::{
    export_hypnogram, write_confusion_csv, write_metrics_json, write_table7, FoldResult, MetricsSummary,
};
use neuronet::evaluation::{
    embed_recordings, run_scenario1, run_scenario2, run_scenario3, EpochClassifier, FoldSplit, LinearProbe,
    ProbeClassifier, SubjectPredictions, TcmClassifier,
};
use neuronet::experiments::{folds_for, pretrain_fold, run_sweep, sweep_csv, Knob, SweepOptions};
use neuronet::neuronet::NeuroNet;
use neuronet::signal_io::cache::read_all;
use neuronet::signal_io::{load_recording, write_cache, AnnotationSource, StagedRecording};
use neuronet::synth::{self, SynthSpec};
use neuronet::{Error, Result};

use crate::args::{CrossevalArgs, EvalArgs, IngestArgs, PretrainArgs, ReportArgs, RunArgs, SweepArgs, SynthArgs};
use crate::folds::{self, fold_dir};

const CONFIG_FILE: &str = "config.toml";
const FOLDS_FILE: &str = "folds.json";
const EVAL_FILE: &str = "eval.json";
const OUTCOME_FILE: &str = "outcome.json";
const PREDICTIONS_FILE: &str = "predictions.json";
const METRICS_FILE: &str = "metrics.json";

fn runtime(msg: impl Into<String>) -> Error {
    Error::Io(std::io::Error::other(msg.into()))
}

fn cache_env() -> Option<PathBuf> {
    std::env::var_os("NEURONET_CACHE").map(PathBuf::from)
}

fn resolve_config(run: &RunArgs, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match run.config.as_deref().or(fallback) {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::from_toml("")?,
    };
    if let Some(seed) = run.seed {
        cfg.seed = seed;
    }
    cfg.deterministic |= run.deterministic;
    cfg.validate()?;
    Ok(cfg)
}

fn jobs(run: &RunArgs, cfg: &RunConfig) -> usize {
    if cfg.deterministic {
        1
    } else {
        run.jobs
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    fs::create_dir_all(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_toml()?)?;
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Vec<StagedRecording>> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("data directory {} does not exist", dir.display())));
    }
    let recs = read_all(dir)?;
    if recs.is_empty() {
        return Err(Error::Config(format!("no cached recordings in {}", dir.display())));
    }
    Ok(recs)
}

pub fn ingest(a: IngestArgs) -> Result<()> {
    let out = a
        .out
        .or_else(cache_env)
        .ok_or_else(|| Error::Config("pass --out or set NEURONET_CACHE".into()))?;
    let mut files: Vec<PathBuf> = fs::read_dir(&a.edf_dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.sort();
    let is_edf = |p: &Path| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("edf"));
    let is_hypnogram = |p: &Path| stem(p).to_ascii_lowercase().contains("hypnogram");
    let hypnograms: Vec<&PathBuf> = files.iter().filter(|p| is_edf(p) && is_hypnogram(p)).collect();

    let (mut done, mut failed) = (0, 0);
    for psg in files.iter().filter(|p| is_edf(p) && !is_hypnogram(p)) {
        let subject = stem(psg).trim_end_matches("-PSG").trim_end_matches("_PSG").to_string();
        // Sleep-EDF pairs SC4001E0-PSG.edf with SC4001EC-Hypnogram.edf.
        let key = &subject[..subject.len().saturating_sub(1).max(1)];
        let hyp = hypnograms.iter().find(|h| stem(h).starts_with(key));
        let csv = psg.with_file_name(format!("{subject}.csv"));
        let result = (|| {
            let bytes = fs::read(psg)?;
            let (rec, prov) = if let Some(h) = hyp {
                let hyp_bytes = fs::read(h)?;
                load_recording(&subject, &bytes, &a.channel, AnnotationSource::EdfPlus(&hyp_bytes))?
            } else if csv.exists() {
                let text = fs::read_to_string(&csv)?;
                load_recording(&subject, &bytes, &a.channel, AnnotationSource::Csv(&text))?
            } else {
                load_recording(&subject, &bytes, &a.channel, AnnotationSource::Embedded)?
            };
            write_cache(&out, &rec, &prov)?;
            Ok::<_, Error>(rec.len())
        })();
        match result {
            Ok(n) => {
                done += 1;
                eprintln!("{subject}: {n} epochs");
            }
            Err(e @ Error::ChannelNotFound(_)) => return Err(e),
            Err(e) => {
                failed += 1;
                eprintln!("{subject}: skipped ({e})");
            }
        }
    }
    eprintln!("ingested {done} recordings into {}", out.display());
    if failed > 0 || done == 0 {
        return Err(runtime(format!("{failed} of {} recordings failed", done + failed)));
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut spec = if a.spec.ends_with(".toml") {
        let text = fs::read_to_string(&a.spec)?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", a.spec)))?
    } else {
        SynthSpec::named(&a.spec)?
    };
    if let Some(n) = a.subjects {
        spec.subjects = n;
    }
    if let Some(n) = a.epochs {
        spec.epochs_per_subject = n;
    }
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate()?;
    let recs = synth::generate(&spec)?;
    synth::write_dataset(&a.out, &recs)?;
    fs::write(
        a.out.join("synth_spec.toml"),
        toml::to_string_pretty(&spec).map_err(|e| runtime(e.to_string()))?,
    )?;
    if a.edf {
        let dir = a.out.join("edf");
        fs::create_dir_all(&dir)?;
        for rec in &recs {
            fs::write(dir.join(format!("{}.edf", rec.subject_id)), synth::to_edf(rec)?)?;
        }
    }
    eprintln!("wrote {} subjects to {}", recs.len(), a.out.display());
    Ok(())
}

pub fn pretrain(a: PretrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run, None)?;
    let data = a
        .data
        .clone()
        .or_else(|| cfg.data_dir())
        .ok_or_else(|| Error::Config("pass --data or set NEURONET_CACHE".into()))?;
    cfg.data.dir = Some(data.clone());
    let recs = load_dataset(&data)?;
    let splits = folds_for(&cfg, &recs)?;
    if !folds::is_worker() {
        write_snapshot(&a.out, &cfg)?;
        write_json(&a.out.join(FOLDS_FILE), &splits)?;
    }
    let selected = folds::selected(a.run.fold, splits.len())?;
    folds::run(&selected, jobs(&a.run, &cfg), |k| {
        let dir = a.out.join(fold_dir(k));
        fs::create_dir_all(&dir)?;
        let mut log = BufWriter::new(File::create(dir.join("log.jsonl"))?);
        let (model, records) = pretrain_fold(&cfg, &recs, &splits[k], a.max_steps, |r| {
            writeln!(log, "{}", serde_json::to_string(r)?)?;
            Ok(())
        })?;
        log.flush()?;
        model.save(&dir)?;
        match records.last() {
            Some(r) => eprintln!("fold {k}: {} steps, final l_total {:.6}", records.len(), r.l_total),
            None => eprintln!("fold {k}: no steps"),
        }
        Ok(())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Probe,
    Finetune,
    Crosseval,
}

/// Written to every evaluation directory so later commands know what it holds.
#[derive(Debug, Serialize, Deserialize)]
struct EvalInfo {
    scenario: Scenario,
    pretrained: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct FoldOutcome {
    fold: FoldResult,
    predictions: Vec<SubjectPredictions>,
}

pub fn evaluate(a: EvalArgs, scenario: Scenario) -> Result<()> {
    let run_config = a.pretrained.join(CONFIG_FILE);
    if !run_config.exists() {
        return Err(Error::Config(format!("{} is not a pretraining run", a.pretrained.display())));
    }
    let cfg = resolve_config(&a.run, Some(&run_config))?;
    let data = cfg
        .data_dir()
        .ok_or_else(|| Error::Config("the run config names no data directory".into()))?;
    let recs = load_dataset(&data)?;
    let splits: Vec<FoldSplit> = read_json(&a.pretrained.join(FOLDS_FILE))?;
    if !folds::is_worker() {
        write_snapshot(&a.out, &cfg)?;
        let info = EvalInfo {
            scenario,
            pretrained: fs::canonicalize(&a.pretrained)?,
        };
        write_json(&a.out.join(EVAL_FILE), &info)?;
    }
    let selected = folds::selected(a.run.fold, splits.len())?;
    folds::run(&selected, jobs(&a.run, &cfg), |k| {
        let dir = a.out.join(fold_dir(k));
        fs::create_dir_all(&dir)?;
        let backbone = NeuroNet::load(&a.pretrained.join(fold_dir(k)))?;
        let (report, predictions) = match scenario {
            Scenario::Probe => {
                let emb = embed_recordings(&backbone, &recs)?;
                let s1 = run_scenario1(&emb, &recs, &splits[k], &cfg.probe, cfg.seed)?;
                s1.probe.save(&dir.join("probe.bin"))?;
                (s1.report, s1.predictions)
            }
            Scenario::Finetune => {
                let mut ft = cfg.finetune.clone();
                ft.tcm.d_model = backbone.cfg.encoder.dim;
                let s2 = run_scenario2(&backbone, &recs, &splits[k], &ft, cfg.seed)?;
                s2.model.save(&dir)?;
                (s2.report, s2.predictions)
            }
            Scenario::Crosseval => unreachable!("cross evaluation has its own command"),
        };
        eprintln!("fold {k}: acc {:.4} mf1 {:.4}", report.acc, report.mf1);
        let outcome = FoldOutcome {
            fold: FoldResult { fold: k, report },
            predictions,
        };
        write_json(&dir.join(OUTCOME_FILE), &outcome)
    })?;
    if a.run.fold.is_some() {
        return Ok(());
    }
    let mut results = Vec::new();
    let mut predictions = Vec::new();
    for k in selected {
        let o: FoldOutcome = read_json(&a.out.join(fold_dir(k)).join(OUTCOME_FILE))?;
        results.push(o.fold);
        predictions.extend(o.predictions);
    }
    let summary = MetricsSummary::new(results);
    eprintln!(
        "acc {:.4} ± {:.4}, mf1 {:.4} ± {:.4}",
        summary.acc_mean, summary.acc_std, summary.mf1_mean, summary.mf1_std
    );
    write_report(&a.out, &summary, &predictions)
}

fn trained_folds(dir: &Path) -> Result<Vec<usize>> {
    let mut out: Vec<usize> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str()?.strip_prefix("fold_")?.parse().ok())
        .filter(|k| dir.join(fold_dir(*k)).join(OUTCOME_FILE).exists())
        .collect();
    out.sort_unstable();
    Ok(out)
}

pub fn crosseval(a: CrossevalArgs) -> Result<()> {
    let info: EvalInfo = read_json(&a.train_run.join(EVAL_FILE))?;
    let cfg = RunConfig::load(&a.train_run.join(CONFIG_FILE))?;
    let foreign = load_dataset(&a.target)?;
    let mut models: Vec<Box<dyn EpochClassifier>> = Vec::new();
    for k in trained_folds(&a.train_run)? {
        let dir = a.train_run.join(fold_dir(k));
        let model: Box<dyn EpochClassifier> = match info.scenario {
            Scenario::Probe => {
                let backbone = NeuroNet::load(&info.pretrained.join(fold_dir(k)))?;
                let probe = LinearProbe::load(&dir.join("probe.bin"), backbone.cfg.encoder.dim)?;
                Box::new(ProbeClassifier { backbone, probe })
            }
            Scenario::Finetune => Box::new(TcmClassifier::load(&dir)?),
            Scenario::Crosseval => return Err(Error::Config("--train-run must be a probe or finetune output".into())),
        };
        models.push(model);
    }
    let refs: Vec<&dyn EpochClassifier> = models.iter().map(|m| m.as_ref()).collect();
    let (report, predictions) = run_scenario3(&refs, &foreign)?;
    eprintln!("{} models: acc {:.4} mf1 {:.4}", refs.len(), report.acc, report.mf1);
    write_snapshot(&a.out, &cfg)?;
    let eval = EvalInfo {
        scenario: Scenario::Crosseval,
        pretrained: info.pretrained,
    };
    write_json(&a.out.join(EVAL_FILE), &eval)?;
    let summary = MetricsSummary::new(vec![FoldResult { fold: 0, report }]);
    write_report(&a.out, &summary, &predictions)
}

fn write_report(out: &Path, summary: &MetricsSummary, predictions: &[SubjectPredictions]) -> Result<()> {
    fs::create_dir_all(out)?;
    write_metrics_json(&out.join(METRICS_FILE), summary)?;
    write_json(&out.join(PREDICTIONS_FILE), &predictions)?;
    write_confusion_csv(&out.join("confusion.csv"), &summary.pooled.confusion)?;
    for p in predictions {
        export_hypnogram(&p.preds, &p.truth, &out.join(format!("hypnogram_{}", p.subject)))?;
    }
    Ok(())
}

pub fn report(a: ReportArgs) -> Result<()> {
    let summary: MetricsSummary = read_json(&a.input.join(METRICS_FILE))?;
    let predictions: Vec<SubjectPredictions> = read_json(&a.input.join(PREDICTIONS_FILE))?;
    let out = a.out.unwrap_or_else(|| a.input.clone());
    write_report(&out, &summary, &predictions)?;
    let config = a.input.join(CONFIG_FILE);
    if out != a.input && config.exists() {
        fs::copy(&config, out.join(CONFIG_FILE))?;
    }
    let mut md = String::from("| fold | acc | mf1 |\n|---|---|---|\n");
    for f in &summary.folds {
        md.push_str(&format!("| {} | {:.4} | {:.4} |\n", f.fold, f.report.acc, f.report.mf1));
    }
    md.push_str(&format!(
        "| mean ± std | {:.4} ± {:.4} | {:.4} ± {:.4} |\n",
        summary.acc_mean, summary.acc_std, summary.mf1_mean, summary.mf1_std
    ));
    fs::write(out.join("summary.md"), md)?;
    eprintln!("report written to {}", out.display());
    Ok(())
}

pub fn sweep(a: SweepArgs) -> Result<()> {
    let knob: Knob = a.knob.parse()?;
    let run = RunArgs {
        config: a.config.clone(),
        seed: a.seed,
        deterministic: false,
        jobs: 1,
        fold: None,
    };
    let mut cfg = resolve_config(&run, None)?;
    let data = a
        .data
        .clone()
        .or_else(|| cfg.data_dir())
        .ok_or_else(|| Error::Config("pass --data or set NEURONET_CACHE".into()))?;
    cfg.data.dir = Some(data.clone());
    let values = if a.values.is_empty() { knob.default_values() } else { a.values.clone() };
    for v in &values {
        knob.apply(&cfg, v)?;
    }
    let recs = load_dataset(&data)?;
    write_snapshot(&a.out, &cfg)?;
    let opts = SweepOptions {
        fold: a.fold,
        max_ssl_steps: a.max_steps,
    };
    let outcome = run_sweep(&cfg, &recs, knob, &values, opts)?;
    fs::write(a.out.join(format!("sweep_{}.csv", knob.name())), sweep_csv(&outcome.rows))?;
    if knob == Knob::Context {
        write_table7(&a.out.join("table7.csv"), &outcome.table7)?;
    }
    for r in &outcome.rows {
        eprintln!("{}={}: acc {:.4} mf1 {:.4}", r.knob, r.value, r.acc, r.mf1);
    }
    Ok(())
}
