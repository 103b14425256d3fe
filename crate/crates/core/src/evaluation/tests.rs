use super::report::*;
use super::*;
use crate::contrastive::ProjectionConfig;
use crate::framing::FrameConfig;
use crate::mae::{DecoderConfig, EncoderConfig};
use crate::neuronet::{NeuroNet, NeuroNetConfig, Preset};
use crate::synth::{generate, SynthSpec};
use crate::tcm::{MambaConfig, OutputMode};
use crate::tensor::Tensor;
use StageLabel::*;

fn tiny_net(seed: u64) -> NeuroNet {
    let mut cfg = NeuroNetConfig::preset(Preset::Desk);
    cfg.frame = FrameConfig { frame_len: 300, step: 300 };
    cfg.encoder = EncoderConfig { dim: 8, depth: 2, heads: 2 };
    cfg.decoder = DecoderConfig { dim: 8, depth: 1, heads: 2 };
    cfg.frame_net.embed_dim = 8;
    cfg.frame_net.stem_channels = 4;
    cfg.frame_net.branch_channels = 4;
    cfg.frame_net.blocks_per_branch = 1;
    cfg.projection = ProjectionConfig { hidden: 8, out: 4 };
    NeuroNet::new(cfg, seed).unwrap()
}

fn tiny_data() -> Vec<StagedRecording> {
    generate(&SynthSpec {
        subjects: 5,
        epochs_per_subject: 12,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn ids(recs: &[StagedRecording]) -> Vec<String> {
    recs.iter().map(|r| r.subject_id.clone()).collect()
}

fn snapshot(net: &NeuroNet) -> Vec<Tensor> {
    net.store.ids().map(|id| net.store.get(id).clone()).collect()
}

#[test]
fn probe_leaves_backbone_bits_alone() {
    let net = tiny_net(0);
    let before = snapshot(&net);
    let recs = tiny_data();
    let emb = embed_recordings(&net, &recs).unwrap();
    let folds = split_subject_kfold(&ids(&recs), 2, 1, 0).unwrap();
    let cfg = ProbeConfig {
        lr: 1e-2,
        epochs: 5,
        batch_size: 8,
        ..ProbeConfig::default()
    };
    let out = run_scenario1(&emb, &recs, &folds[0], &cfg, 3).unwrap();
    assert_eq!(snapshot(&net), before);
    assert_eq!(out.report.total() as usize, folds[0].test.len() * 12);
    assert_eq!(out.train_losses.len(), 5);

    let untrained = run_scenario1(&emb, &recs, &folds[0], &ProbeConfig { epochs: 0, ..cfg }, 3).unwrap();
    assert!(untrained.train_losses.is_empty());
    assert_eq!(untrained.report.total(), out.report.total());
}

#[test]
fn probe_learns_separable_features() {
    // Two well separated clusters per class in 3 dimensions.
    let mut r = crate::rng::stream(0, &[]);
    let labels: Vec<usize> = (0..200).map(|i| i % 5).collect();
    let x = Tensor::from_fn(&[200, 3], |i| {
        let (row, col) = (i / 3, i % 3);
        let c = labels[row] as f64;
        [c, c * c, -c][col] + 0.1 * crate::rng::normal(&mut r)
    });
    let mut probe = LinearProbe::new(3, 1);
    let cfg = ProbeConfig {
        lr: 0.05,
        epochs: 200,
        batch_size: 50,
        ..ProbeConfig::default()
    };
    let losses = probe.fit(&x, &labels, &cfg, 2).unwrap();
    assert!(losses.last().unwrap() < &losses[0]);
    let acc = probe.predict_proba(&x).argmax_rows().iter().zip(&labels).filter(|(a, b)| a == b).count();
    assert!(acc >= 190, "{acc}");
    let dir = tempfile::tempdir().unwrap();
    probe.save(&dir.path().join("probe.bin")).unwrap();
    let back = LinearProbe::load(&dir.path().join("probe.bin"), 3).unwrap();
    assert_eq!(back.logits(&x), probe.logits(&x));
}

#[test]
fn finetune_only_moves_last_block_norm_and_head() {
    let net = tiny_net(1);
    let recs = tiny_data();
    let tcm = MambaConfig {
        d_state: 4,
        num_blocks: 1,
        context_length: 5,
        ..MambaConfig::default()
    };
    let mut model = TcmClassifier::new(&net, tcm, 0).unwrap();
    let frozen = model.frozen_ids();
    let train = model.trainable_ids();
    assert!(train.iter().any(|&id| model.net.store.name(id).starts_with("encoder.block1.")));
    assert!(!train.iter().any(|&id| model.net.store.name(id).starts_with("encoder.block0.")));
    let before: Vec<Tensor> = frozen.iter().map(|&id| model.net.store.get(id).clone()).collect();
    let before_train: Vec<Tensor> = train.iter().map(|&id| model.net.store.get(id).clone()).collect();
    let data: Vec<(Tensor, Vec<usize>)> = recs[..2]
        .iter()
        .map(|r| (model.prefix_tokens(r).unwrap(), label_indices(&r.labels)))
        .collect();
    let cfg = FinetuneConfig {
        epochs: 3,
        batch_size: 2,
        train_stride: Some(3),
        ..FinetuneConfig::default()
    };
    let losses = model.fit(&data, &cfg, 0).unwrap();
    assert_eq!(losses.len(), 3);
    for (id, t) in frozen.iter().zip(&before) {
        assert_eq!(model.net.store.get(*id), t, "{}", model.net.store.name(*id));
    }
    let moved = train.iter().zip(&before_train).filter(|(id, t)| model.net.store.get(**id) != *t).count();
    assert!(moved > train.len() / 2);

    let probs = model.predict_proba(&recs[3]).unwrap();
    assert_eq!(probs.shape(), &[12, 5]);
    for row in 0..12 {
        assert!((probs.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let dir = tempfile::tempdir().unwrap();
    model.save(dir.path()).unwrap();
    let back = TcmClassifier::load(dir.path()).unwrap();
    assert_eq!(back.predict_proba(&recs[3]).unwrap(), probs);
}

#[test]
fn scenario2_runs_end_to_end() {
    let net = tiny_net(2);
    let recs = tiny_data();
    let folds = split_subject_kfold(&ids(&recs), 2, 1, 1).unwrap();
    let cfg = FinetuneConfig {
        epochs: 1,
        tcm: MambaConfig {
            d_state: 4,
            num_blocks: 1,
            context_length: 5,
            output_mode: OutputMode::ManyToOne,
            ..MambaConfig::default()
        },
        ..FinetuneConfig::default()
    };
    let out = run_scenario2(&net, &recs, &folds[1], &cfg, 0).unwrap();
    assert_eq!(out.report.total() as usize, folds[1].test.len() * 12);
}

#[test]
fn many_to_one_windows_end_at_each_epoch() {
    let ws = inference_windows(7, 3, OutputMode::ManyToOne);
    assert_eq!(ws.len(), 7);
    assert_eq!(ws[0].indices, [0, 0, 0]);
    assert_eq!(ws[1].indices, [0, 0, 1]);
    assert_eq!(ws[6].indices, [4, 5, 6]);
    assert!(ws.iter().all(|w| w.keep_from == 2));
}

struct Fixed(Tensor, &'static str);

impl EpochClassifier for Fixed {
    fn predict_proba(&self, _: &StagedRecording) -> crate::Result<Tensor> {
        Ok(self.0.clone())
    }

    fn signature(&self) -> String {
        self.1.into()
    }
}

fn one_epoch_rec() -> StagedRecording {
    StagedRecording {
        subject_id: "f".into(),
        sample_rate: 100.0,
        epochs: vec![(0..3000).map(|i| (i as f64 * 0.1).sin()).collect()],
        labels: vec![N1],
    }
}

#[test]
fn soft_vote_hand_case_and_invariances() {
    let a = Tensor::new(&[1, 2], vec![0.6, 0.4]);
    let b = Tensor::new(&[1, 2], vec![0.2, 0.8]);
    let v = soft_vote(&[a.clone(), b.clone()]).unwrap();
    assert!((v.data()[0] - 0.4).abs() < 1e-12 && (v.data()[1] - 0.6).abs() < 1e-12);
    assert_eq!(v.argmax_rows(), [1]);
    assert_eq!(soft_vote(&[b, a]).unwrap(), v);

    let p = Tensor::new(&[1, 5], vec![0.1, 0.5, 0.2, 0.1, 0.1]);
    let m1 = Fixed(p.clone(), "x");
    let m2 = Fixed(p.clone(), "x");
    let rec = one_epoch_rec();
    let (single, _) = run_scenario3(&[&m1, &m1], std::slice::from_ref(&rec)).unwrap();
    let (pair, preds) = run_scenario3(&[&m1, &m2], std::slice::from_ref(&rec)).unwrap();
    assert_eq!(single, pair);
    assert_eq!(preds[0].preds, [N1]);

    let other = Fixed(p, "y");
    assert!(matches!(run_scenario3(&[&m1, &other], &[rec.clone()]), Err(crate::Error::Config(_))));
    assert!(run_scenario3(&[&m1], &[rec]).is_err());
}

#[test]
fn ensemble_rows_stay_normalised() {
    let mut r = crate::rng::stream(3, &[]);
    let probs: Vec<Tensor> = (0..4)
        .map(|_| {
            let raw = Tensor::from_fn(&[6, 5], |_| crate::rng::normal(&mut r).exp());
            let mut out = raw.clone();
            for row in 0..6 {
                let s: f64 = raw.row(row).iter().sum();
                for c in 0..5 {
                    out.data_mut()[row * 5 + c] /= s;
                }
            }
            out
        })
        .collect();
    let v = soft_vote(&probs).unwrap();
    for row in 0..6 {
        assert!((v.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn hypnogram_outputs() {
    let truth = [Wake, N2, Rem];
    let dir = tempfile::tempdir().unwrap();
    let (csv, svg) = export_hypnogram(&truth, &truth, &dir.path().join("hypnogram_s1")).unwrap();
    let text = std::fs::read_to_string(csv).unwrap();
    assert_eq!(text.lines().count(), 4);
    assert_eq!(text.lines().nth(2).unwrap(), "1,N2,N2");
    let svg = std::fs::read_to_string(svg).unwrap();
    assert_eq!(svg.matches("class=\"error\"").count(), 0);
    let labels: Vec<usize> = ["W", "REM", "N1", "N2", "N3"]
        .iter()
        .map(|s| svg.find(&format!(">{s}</text>")).unwrap())
        .collect();
    assert!(labels.windows(2).all(|w| w[0] < w[1]));
    let wrong = hypnogram_svg(&[Wake, N3, Rem], &truth);
    assert_eq!(wrong.matches("class=\"error\"").count(), 1);
    assert!(export_hypnogram(&truth, &truth[..2], &dir.path().join("x")).is_err());
}

#[test]
fn summary_and_tables() {
    let r1 = compute_metrics(&[Wake, N1], &[Wake, N1]).unwrap();
    let r2 = compute_metrics(&[Wake, Wake], &[Wake, N1]).unwrap();
    let s = MetricsSummary::new(vec![FoldResult { fold: 0, report: r1 }, FoldResult { fold: 1, report: r2 }]);
    assert!((s.acc_mean - 0.75).abs() < 1e-12);
    assert_eq!(s.pooled.total(), 4);
    let csv = confusion_csv(&s.pooled.confusion);
    assert_eq!(csv.lines().next().unwrap(), "truth\\pred,W,N1,N2,N3,REM");
    assert_eq!(csv.lines().nth(2).unwrap(), "N1,1,1,0,0,0");
    let row = |model: &str, context_length, acc| Table7Row {
        model: model.into(),
        context_length,
        acc,
        mf1: acc / 2.0,
    };
    let rows = vec![row("Mamba", 20, 0.5), row("Mamba", 10, 0.25), row("LSTM+MHA", 20, 1.0)];
    assert_eq!(
        table7_csv(&rows),
        "context_length,mamba_acc,mamba_mf1,lstm_mha_acc,lstm_mha_mf1\n10,0.2500,0.1250,,\n20,0.5000,0.2500,1.0000,0.5000\n"
    );
}

#[test]
fn class_weights_balance_counts() {
    let w = inverse_frequency_weights(&[0, 0, 0, 1]);
    assert!((w[0] * 3.0 - w[1]).abs() < 1e-12);
    assert_eq!(w[2], 0.0);
    assert!(((w[0] + w[1]) / 2.0 - 1.0).abs() < 1e-12);
}
