use proptest::prelude::*;

use super::*;
use crate::gradcheck::check_params;
use crate::rng;

fn randn(shape: &[usize], r: &mut rng::Rng, scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| scale * rng::normal(r))
}

struct ScanCase {
    x: Tensor,
    delta: Tensor,
    a: Tensor,
    b: Tensor,
    c: Tensor,
    d: Tensor,
}

fn scan_case(len: usize, dn: usize, ns: usize, seed: u64) -> ScanCase {
    let mut r = rng::stream(seed, &[]);
    let delta = Tensor::from_fn(&[len, dn], |_| 1e-3 + 0.5 * rng::normal(&mut r).abs());
    let a = Tensor::from_fn(&[dn, ns], |_| -(0.05 + 2.0 * rng::normal(&mut r).abs()));
    ScanCase {
        x: randn(&[len, dn], &mut r, 1.0),
        delta,
        a,
        b: randn(&[len, ns], &mut r, 1.0),
        c: randn(&[len, ns], &mut r, 1.0),
        d: randn(&[dn], &mut r, 1.0),
    }
}

fn close(a: &Tensor, b: &Tensor, tol: f64) -> bool {
    a.shape() == b.shape()
        && a.data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| (x - y).abs() <= tol * x.abs().max(1.0))
}

#[test]
fn chunked_matches_sequential_small_case() {
    let s = scan_case(12, 4, 3, 1);
    let seq = selective_scan(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d).unwrap();
    let chk = selective_scan_chunked(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d, 4).unwrap();
    assert!(close(&seq, &chk, 1e-5), "{}", seq.max_abs_diff(&chk));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]
    #[test]
    fn chunked_matches_sequential(len in 1usize..=64, dn in 1usize..=6, ns in 1usize..=16, chunk in 1usize..=16, seed in any::<u64>()) {
        let s = scan_case(len, dn, ns, seed);
        let seq = selective_scan(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d).unwrap();
        let chk = selective_scan_chunked(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d, chunk).unwrap();
        prop_assert!(close(&seq, &chk, 1e-5), "diff {}", seq.max_abs_diff(&chk));
    }
}

#[test]
fn fast_decay_limit_is_memoryless() {
    let mut s = scan_case(9, 3, 4, 2);
    s.a = Tensor::full(&[3, 4], -1e9);
    let y = selective_scan(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d).unwrap();
    for t in 0..9 {
        let cb: f64 = (0..4).map(|n| s.c.data()[t * 4 + n] * s.b.data()[t * 4 + n]).sum();
        for ch in 0..3 {
            let (x, dt) = (s.x.data()[t * 3 + ch], s.delta.data()[t * 3 + ch]);
            let want = dt * cb * x + s.d.data()[ch] * x;
            assert!((y.data()[t * 3 + ch] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_input_gives_zero_output() {
    let mut s = scan_case(7, 2, 3, 3);
    s.x = Tensor::zeros(&[7, 2]);
    let y = selective_scan(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
    let y = selective_scan_chunked(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d, 3).unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn overflow_is_reported_with_position() {
    let mut s = scan_case(4, 2, 2, 4);
    s.x.data_mut()[5] = f64::INFINITY;
    match selective_scan(&s.x, &s.delta, &s.a, &s.b, &s.c, &s.d) {
        Err(Error::Numerical { layer }) => assert!(layer.contains("t=2"), "{layer}"),
        other => panic!("{other:?}"),
    }
}

fn mini(kind: TcmKind, blocks: usize) -> MambaConfig {
    MambaConfig {
        kind,
        d_model: 8,
        d_state: 4,
        d_conv: 3,
        expand: 2,
        num_blocks: blocks,
        context_length: 8,
        output_mode: OutputMode::SeqToSeq,
        heads: 2,
    }
}

fn run(tcm: &TemporalContext, store: &ParamStore, x: &Tensor) -> Tensor {
    let mut g = Graph::with_params(store);
    let xi = g.input(x.clone());
    let y = tcm.logits(&mut g, xi).unwrap();
    g.value(y).clone()
}

#[test]
fn every_variant_is_causal() {
    let cases = [
        (TcmKind::Mamba, 1),
        (TcmKind::Mamba, 2),
        (TcmKind::Mamba, 3),
        (TcmKind::Lstm, 1),
        (TcmKind::Mha, 2),
        (TcmKind::LstmMha, 1),
    ];
    for (kind, blocks) in cases {
        let mut store = ParamStore::new();
        let tcm = TemporalContext::new(&mut store, "tcm", mini(kind, blocks), &mut rng::stream(5, &[])).unwrap();
        let x = randn(&[1, 8, 8], &mut rng::stream(6, &[]), 1.0);
        let base = run(&tcm, &store, &x);
        for t in 0..8 {
            let mut xp = x.clone();
            for c in 0..8 {
                xp.data_mut()[t * 8 + c] += 0.3 * (c as f64 - 3.0);
            }
            let y = run(&tcm, &store, &xp);
            for pos in 0..8 {
                let same = base.data()[pos * 5..(pos + 1) * 5] == y.data()[pos * 5..(pos + 1) * 5];
                if pos < t {
                    assert!(same, "{kind:?}/{blocks}: position {pos} saw change at {t}");
                }
            }
            assert_ne!(base.data()[t * 5..(t + 1) * 5], y.data()[t * 5..(t + 1) * 5]);
        }
    }
}

#[test]
fn single_step_is_position_wise() {
    let mut store = ParamStore::new();
    let cfg = mini(TcmKind::Mamba, 2);
    let tcm = TemporalContext::new(&mut store, "tcm", cfg, &mut rng::stream(7, &[])).unwrap();
    let x = randn(&[3, 1, 8], &mut rng::stream(8, &[]), 1.0);
    let batched = run(&tcm, &store, &x);
    for b in 0..3 {
        let one = Tensor::new(&[1, 1, 8], x.data()[b * 8..(b + 1) * 8].to_vec());
        let y = run(&tcm, &store, &one);
        assert_eq!(y.data(), &batched.data()[b * 5..(b + 1) * 5]);
    }
}

#[test]
fn full_width_shape() {
    let mut store = ParamStore::new();
    let cfg = MambaConfig {
        d_model: 768,
        num_blocks: 1,
        ..MambaConfig::default()
    };
    assert_eq!(cfg.d_inner(), 1536);
    let tcm = TemporalContext::new(&mut store, "tcm", cfg, &mut rng::stream(1, &[])).unwrap();
    let blk = match &tcm.body {
        Body::Mamba(b) => b[0].clone(),
        _ => unreachable!(),
    };
    let mut g = Graph::with_params(&store);
    let x = g.input(randn(&[1, 20, 768], &mut rng::stream(2, &[]), 1.0));
    let y = blk.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[1, 20, 768]);
    let logits = tcm.classify(&mut g, x).unwrap();
    assert_eq!(g.shape(logits), &[1, 20, 5]);
}

#[test]
fn head_preference_without_blocks() {
    let mut store = ParamStore::new();
    let tcm = TemporalContext::new(&mut store, "tcm", mini(TcmKind::Mamba, 0), &mut rng::stream(1, &[])).unwrap();
    store.set(tcm.head.weight, Tensor::zeros(&[8, 5]));
    store.set(tcm.head.bias.unwrap(), Tensor::new(&[5], vec![0.0, 0.0, 3.0, 0.0, 0.0]));
    let x = randn(&[2, 8, 8], &mut rng::stream(3, &[]), 1.0);
    let logits = run(&tcm, &store, &x).reshape(&[16, 5]);
    assert!(logits.argmax_rows().iter().all(|&c| c == 2));

    let mut g = Graph::with_params(&store);
    let l = g.input(logits);
    let p = g.softmax_last(l);
    for row in 0..16 {
        let s: f64 = g.value(p).row(row).iter().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }
}

#[test]
fn output_modes_and_length_check() {
    let mut store = ParamStore::new();
    let mut cfg = mini(TcmKind::Mamba, 1);
    cfg.output_mode = OutputMode::ManyToOne;
    let tcm = TemporalContext::new(&mut store, "tcm", cfg, &mut rng::stream(1, &[])).unwrap();
    let mut g = Graph::with_params(&store);
    let x = g.input(randn(&[3, 8, 8], &mut rng::stream(2, &[]), 1.0));
    let y = tcm.classify(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[3, 5]);
    let full = tcm.logits(&mut g, x).unwrap();
    assert_eq!(g.value(y).row(1), &g.value(full).data()[(8 + 7) * 5..(8 + 8) * 5]);
    let short = g.input(Tensor::zeros(&[1, 5, 8]));
    assert!(matches!(tcm.classify(&mut g, short), Err(Error::Shape(_))));
}

#[test]
fn config_validation() {
    assert!(MambaConfig::default().validate().is_ok());
    let cfg = MambaConfig::default();
    assert_eq!((cfg.d_state, cfg.d_conv, cfg.expand, cfg.context_length), (16, 4, 2, 20));
    assert!(MambaConfig { d_conv: 0, ..cfg.clone() }.validate().is_err());
    assert!(MambaConfig { context_length: 0, ..cfg.clone() }.validate().is_err());
    assert!(MambaConfig { kind: TcmKind::Mha, heads: 7, ..cfg }.validate().is_err());
}

#[test]
fn mamba_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let cfg = MambaConfig {
        d_model: 4,
        d_state: 3,
        d_conv: 3,
        num_blocks: 2,
        context_length: 5,
        ..MambaConfig::default()
    };
    let tcm = TemporalContext::new(&mut store, "tcm", cfg, &mut rng::stream(3, &[])).unwrap();
    let x = randn(&[2, 5, 4], &mut rng::stream(4, &[]), 1.0);
    let targets = [0, 1, 2, 3, 4, 4, 3, 2, 1, 0];
    let loss = |store: &ParamStore| {
        let mut g = Graph::with_params(store);
        let xi = g.input(x.clone());
        let y = tcm.classify(&mut g, xi).unwrap();
        let l = tcm.loss(&mut g, y, &targets, None).unwrap();
        (g.value(l).item(), g.backward(l).into_params())
    };
    let (_, grads) = loss(&store);
    let ids: Vec<_> = store.ids().collect();
    for name in ["a_log", "block0.d", "x_proj", "dt_proj", "in_proj", "out_proj", "conv"] {
        assert!(ids.iter().any(|&id| store.name(id).contains(name)));
    }
    let report = check_params(&mut store, &ids, &grads, 6, &mut rng::stream(5, &[]), |s| loss(s).0);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}

#[test]
fn recurrent_variants_have_sound_gradients() {
    for kind in [TcmKind::Lstm, TcmKind::LstmMha] {
        let mut store = ParamStore::new();
        let mut cfg = mini(kind, 1);
        cfg.d_model = 4;
        cfg.context_length = 4;
        let tcm = TemporalContext::new(&mut store, "tcm", cfg, &mut rng::stream(3, &[])).unwrap();
        let x = randn(&[1, 4, 4], &mut rng::stream(4, &[]), 1.0);
        let loss = |store: &ParamStore| {
            let mut g = Graph::with_params(store);
            let xi = g.input(x.clone());
            let y = tcm.classify(&mut g, xi).unwrap();
            let l = tcm.loss(&mut g, y, &[0, 1, 2, 3], None).unwrap();
            (g.value(l).item(), g.backward(l).into_params())
        };
        let (_, grads) = loss(&store);
        let ids: Vec<_> = store.ids().collect();
        let report = check_params(&mut store, &ids, &grads, 4, &mut rng::stream(5, &[]), |s| loss(s).0);
        assert!(report.max_rel_err < 1e-3, "{kind:?} {report:?}");
    }
}

#[test]
fn windows_cover_each_epoch_once() {
    let w = context_windows(45, 20);
    assert_eq!(w.len(), 3);
    assert_eq!(w[0].indices, (0..20).collect::<Vec<_>>());
    assert_eq!(w[1].indices, (20..40).collect::<Vec<_>>());
    assert_eq!(w[2].keep_from, 15);
    assert_eq!(&w[2].indices[..15], &[40; 15]);
    assert_eq!(&w[2].indices[15..], &[40, 41, 42, 43, 44]);
    for n in 0..70 {
        for ctx in 1..25 {
            let mut seen = vec![0; n];
            for win in context_windows(n, ctx) {
                assert_eq!(win.indices.len(), ctx);
                for &i in &win.indices[win.keep_from..] {
                    seen[i] += 1;
                }
            }
            assert!(seen.iter().all(|&c| c == 1));
        }
    }
}
