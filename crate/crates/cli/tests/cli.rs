use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use neuronet::config::RunConfig;
use neuronet::neuronet::LogRecord;

const TINY: &str = r#"
preset = "Desk"
seed = 3

[data]
folds = 2
val_subjects = 1

[frame]
step = 300

[frame_network]
embed_dim = 16
stem_channels = 4
branch_channels = 4
blocks_per_branch = 1

[encoder]
dim = 16
depth = 1
heads = 2

[decoder]
dim = 8
depth = 1
heads = 2

[projection]
hidden = 16
out = 8

[ssl]
epochs = 1
batch_size = 8

[probe]
epochs = 5

[finetune]
epochs = 1
batch_size = 4

[finetune.tcm]
d_model = 16
d_state = 4
num_blocks = 1
heads = 2
context_length = 4
"#;

fn neuronet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neuronet"))
        .args(args)
        .env_remove("NEURONET_CACHE")
        .output()
        .expect("spawn")
}

fn path(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "status {:?}\nstderr:\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// Synthetic cache plus the tiny config in a fresh temp dir.
fn workspace(subjects: usize, epochs: usize) -> (tempfile::TempDir, PathBuf, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = tmp.path().join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    ok(neuronet(&[
        "synth",
        "--spec",
        "markov",
        "--out",
        path(&data),
        "--subjects",
        &subjects.to_string(),
        "--epochs",
        &epochs.to_string(),
    ]));
    (tmp, data, cfg)
}

fn final_loss(run: &Path) -> f64 {
    let log = fs::read_to_string(run.join("fold_0/log.jsonl")).unwrap();
    let last: LogRecord = serde_json::from_str(log.lines().last().unwrap()).unwrap();
    last.l_total
}

#[test]
fn usage_errors_exit_one() {
    for args in [&["pretrain", "--no-such-flag"][..], &["frobnicate"], &[]] {
        let out = neuronet(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"), "{args:?}");
    }
    assert_eq!(neuronet(&["--help"]).status.code(), Some(0));
    assert_eq!(neuronet(&["sweep", "--knob", "depth", "--out", "x"]).status.code(), Some(1));
}

#[test]
fn bad_config_is_a_validation_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.toml");
    fs::write(&cfg, "preset = \"Desk\"\n[loss]\nbeta = 2\n").unwrap();
    let out = neuronet(&["pretrain", "--config", path(&cfg), "--data", path(tmp.path()), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
    let out = neuronet(&["pretrain", "--out", path(&tmp.path().join("run"))]);
    assert_eq!(out.status.code(), Some(1), "missing data directory");
}

#[test]
fn runtime_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = neuronet(&[
        "crosseval",
        "--train-run",
        path(&tmp.path().join("missing")),
        "--target",
        path(tmp.path()),
        "--out",
        path(&tmp.path().join("o")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        RunConfig::load(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()));
        n += 1;
    }
    assert!(n >= 3);
}

#[test]
fn synth_then_pretrain_writes_checkpoint_log_and_config() {
    let (tmp, data, cfg) = workspace(4, 12);
    assert!(data.join("synth-000.bin").exists());
    let run = tmp.path().join("run1");
    ok(neuronet(&[
        "pretrain", "--config", path(&cfg), "--data", path(&data), "--out", path(&run), "--fold", "0",
    ]));
    for f in ["config.toml", "folds.json", "fold_0/model.bin", "fold_0/model_config.json", "fold_0/log.jsonl"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let snapshot = RunConfig::load(&run.join("config.toml")).unwrap();
    assert_eq!(snapshot.seed, 3);
    assert_eq!(snapshot.data.dir.as_deref(), Some(data.as_path()));
    assert!(final_loss(&run).is_finite());
}

#[test]
fn deterministic_runs_repeat_exactly() {
    let (tmp, data, cfg) = workspace(4, 12);
    let mut losses = Vec::new();
    for name in ["a", "b"] {
        let run = tmp.path().join(name);
        ok(neuronet(&[
            "pretrain", "--config", path(&cfg), "--data", path(&data), "--out", path(&run),
            "--deterministic", "--seed", "7", "--fold", "0",
        ]));
        assert!(RunConfig::load(&run.join("config.toml")).unwrap().deterministic);
        losses.push(fs::read_to_string(run.join("fold_0/log.jsonl")).unwrap());
    }
    let strip = |s: &str| -> Vec<(f64, f64)> {
        s.lines()
            .map(|l| serde_json::from_str::<LogRecord>(l).unwrap())
            .map(|r| (r.l_total, r.l_contra))
            .collect()
    };
    assert_eq!(strip(&losses[0]), strip(&losses[1]));
}

#[test]
fn cache_env_var_supplies_the_data_directory() {
    let (tmp, data, cfg) = workspace(4, 12);
    let run = tmp.path().join("run");
    let out = Command::new(env!("CARGO_BIN_EXE_neuronet"))
        .args(["pretrain", "--config", path(&cfg), "--out", path(&run), "--fold", "1"])
        .env("NEURONET_CACHE", &data)
        .output()
        .unwrap();
    ok(out);
    assert!(run.join("fold_1/model.bin").exists());
}

#[test]
fn evaluation_pipeline_with_parallel_folds() {
    let (tmp, data, cfg) = workspace(5, 12);
    let run = tmp.path().join("run");
    ok(neuronet(&["pretrain", "--config", path(&cfg), "--data", path(&data), "--out", path(&run), "--jobs", "2"]));
    assert!(run.join("fold_0/model.bin").exists() && run.join("fold_1/model.bin").exists());

    let probe = tmp.path().join("probe");
    ok(neuronet(&["probe", "--run", path(&run), "--out", path(&probe), "--jobs", "2"]));
    let fine = tmp.path().join("finetune");
    ok(neuronet(&["finetune", "--run", path(&run), "--out", path(&fine)]));
    for dir in [&probe, &fine] {
        for f in ["config.toml", "metrics.json", "confusion.csv", "predictions.json"] {
            assert!(dir.join(f).exists(), "{}/{f}", dir.display());
        }
        let metrics: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap();
        assert_eq!(metrics["folds"].as_array().unwrap().len(), 2);
        let svgs = fs::read_dir(dir)
            .unwrap()
            .filter(|e| {
                let name = e.as_ref().unwrap().file_name().into_string().unwrap();
                name.starts_with("hypnogram_") && name.ends_with(".svg")
            })
            .count();
        assert!(svgs >= 2);
    }
    assert!(probe.join("fold_0/probe.bin").exists());
    assert!(fine.join("fold_1/finetuned.bin").exists());

    let target = tmp.path().join("target");
    ok(neuronet(&["synth", "--spec", "iid", "--out", path(&target), "--subjects", "2", "--epochs", "6", "--seed", "99"]));
    for src in [&probe, &fine] {
        let cross = tmp.path().join(format!("cross_{}", src.file_name().unwrap().to_str().unwrap()));
        ok(neuronet(&["crosseval", "--train-run", path(src), "--target", path(&target), "--out", path(&cross)]));
        assert!(cross.join("metrics.json").exists());
        assert!(cross.join("hypnogram_synth-001.csv").exists());
    }

    let rep = tmp.path().join("report");
    ok(neuronet(&["report", "--input", path(&probe), "--out", path(&rep)]));
    for f in ["summary.md", "confusion.csv", "config.toml"] {
        assert!(rep.join(f).exists(), "{f}");
    }
    assert_eq!(
        fs::read_to_string(rep.join("confusion.csv")).unwrap(),
        fs::read_to_string(probe.join("confusion.csv")).unwrap()
    );
}

#[test]
fn context_sweep_writes_table7() {
    let (tmp, data, cfg) = workspace(5, 32);
    let out = tmp.path().join("sweep");
    ok(neuronet(&[
        "sweep", "--knob", "context", "--values", "10,20,30", "--config", path(&cfg), "--data", path(&data),
        "--out", path(&out), "--max-steps", "2",
    ]));
    let table = fs::read_to_string(out.join("table7.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines.len(), 4, "{table}");
    assert_eq!(lines[0], "context_length,mamba_acc,mamba_mf1,lstm_acc,lstm_mf1,mha_acc,mha_mf1,lstm_mha_acc,lstm_mha_mf1");
    assert!(lines[1].starts_with("10,") && lines[3].starts_with("30,"));
    let sweep = fs::read_to_string(out.join("sweep_context.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 4);
    assert!(out.join("config.toml").exists());
}

#[test]
fn synth_can_emit_edf() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("d");
    ok(neuronet(&["synth", "--out", path(&out), "--subjects", "2", "--epochs", "4", "--edf"]));
    let edf = out.join("edf");
    let cache = tmp.path().join("cache");
    ok(neuronet(&["ingest", "--edf-dir", path(&edf), "--channel", "EEG Fpz-Cz", "--out", path(&cache)]));
    let recs = neuronet::signal_io::cache::read_all(&cache).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[0].len(), 4);
    let missing = neuronet(&["ingest", "--edf-dir", path(&edf), "--channel", "EEG Cz", "--out", path(&cache)]);
    assert_eq!(missing.status.code(), Some(1));
}
