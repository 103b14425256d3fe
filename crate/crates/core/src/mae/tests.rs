use super::*;
use crate::gradcheck::check_params;
use crate::rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[]);
    Tensor::from_fn(shape, |_| rng::normal(&mut r))
}

fn enc_cfg(dim: usize, depth: usize, heads: usize) -> EncoderConfig {
    EncoderConfig { dim, depth, heads }
}

#[test]
fn kept_counts_follow_rounding_rule() {
    let mut r = rng::stream(1, &[]);
    let p = sample_mask(37, 0.75, &mut r, 1).unwrap();
    assert_eq!((p.kept.len(), p.masked.len()), (9, 28));
    assert_eq!(sample_mask(4, 0.99, &mut r, 1).unwrap().kept.len(), 1);
    for m in 2..80 {
        for ratio in [0.1, 0.25, 0.5, 0.6, 0.75, 0.9, 0.99] {
            let p = sample_mask(m, ratio, &mut r, 0).unwrap();
            let expect = (((1.0 - ratio) * m as f64).round() as usize).max(1).min(m - 1);
            assert_eq!(p.kept.len(), expect);
            let mut all: Vec<usize> = p.kept.iter().chain(&p.masked).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..m).collect::<Vec<_>>());
        }
    }
    assert!(matches!(sample_mask(1, 0.5, &mut r, 0), Err(Error::Config(_))));
}

#[test]
fn plans_are_seed_reproducible_and_paths_independent() {
    let a = sample_mask(37, 0.75, &mut rng::stream(5, &[0]), 5).unwrap();
    let b = sample_mask(37, 0.75, &mut rng::stream(5, &[0]), 5).unwrap();
    let c = sample_mask(37, 0.75, &mut rng::stream(6, &[0]), 6).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.kept, c.kept);
    let same = (0..1000u64)
        .filter(|&i| {
            let p1 = sample_mask(37, 0.75, &mut rng::stream(11, &[i, 0]), 0).unwrap();
            let p2 = sample_mask(37, 0.75, &mut rng::stream(11, &[i, 1]), 0).unwrap();
            p1.kept == p2.kept
        })
        .count();
    assert!(same < 10, "{same} identical pairs");
}

#[test]
fn encoder_shape_and_zero_depth_identity() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", 12, enc_cfg(512, 1, 8), &mut rng::stream(2, &[])).unwrap();
    let plan = sample_mask(37, 0.75, &mut rng::stream(3, &[]), 0).unwrap();
    let mut g = Graph::with_params(&store);
    let z = g.input(randn(&[1, 37, 12], 4));
    let h = enc.forward(&mut g, z, &[plan.clone()]).unwrap();
    assert_eq!(g.shape(h), &[1, 10, 512]);

    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", 6, enc_cfg(8, 0, 2), &mut rng::stream(2, &[])).unwrap();
    let zt = randn(&[1, 37, 6], 4);
    let mut g = Graph::with_params(&store);
    let z = g.input(zt.clone());
    let h = enc.forward(&mut g, z, &[plan.clone()]).unwrap();
    let out = g.value(h).clone();
    assert_eq!(&out.data()[..8], store.get(enc.cls).data());
    let w = store.get(enc.proj.weight);
    let bias = store.get(enc.proj.bias.unwrap());
    let pe = sinusoidal(&plan.kept, 8);
    for (j, &p) in plan.kept.iter().enumerate() {
        for o in 0..8 {
            let mut v = bias.data()[o];
            for i in 0..6 {
                v += zt.data()[p * 6 + i] * w.data()[i * 8 + o];
            }
            v += pe.data()[j * 8 + o];
            let got = out.data()[(j + 1) * 8 + o];
            assert!((got - v).abs() < 1e-12, "{got} vs {v}");
        }
    }
}

#[test]
fn class_token_ignores_listing_order_of_kept_frames() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, "enc", 5, enc_cfg(16, 2, 4), &mut rng::stream(7, &[])).unwrap();
    let plan = sample_mask(37, 0.75, &mut rng::stream(8, &[]), 0).unwrap();
    let mut shuffled = plan.clone();
    shuffled.kept.reverse();
    shuffled.kept.swap(0, 3);
    let zt = randn(&[1, 37, 5], 9);
    let cls = |p: &MaskPlan| {
        let mut g = Graph::with_params(&store);
        let z = g.input(zt.clone());
        let h = enc.forward(&mut g, z, std::slice::from_ref(p)).unwrap();
        g.value(h).data()[..16].to_vec()
    };
    let (a, b) = (cls(&plan), cls(&shuffled));
    for (x, y) in a.iter().zip(&b) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn decoder_shapes_and_mask_token_sharing() {
    let mut store = ParamStore::new();
    let dec = Decoder::new(
        &mut store,
        "dec",
        16,
        10,
        DecoderConfig { dim: 8, depth: 0, heads: 2 },
        &mut rng::stream(10, &[]),
    )
    .unwrap();
    let plan = sample_mask(37, 0.75, &mut rng::stream(11, &[]), 0).unwrap();
    let mut g = Graph::with_params(&store);
    let h = g.input(randn(&[1, 9, 16], 12));
    let seq = dec.assemble(&mut g, h, &[plan.clone()]).unwrap();
    let r = dec.forward(&mut g, h, &[plan.clone()]).unwrap();
    assert_eq!(g.shape(r), &[1, 37, 10]);
    let pe = sinusoidal(&(0..37).collect::<Vec<_>>(), 8);
    let seq = g.value(seq).clone();
    let tok = store.get(dec.mask_token).data();
    for &p in &plan.masked {
        for j in 0..8 {
            assert!((seq.data()[p * 8 + j] - pe.data()[p * 8 + j] - tok[j]).abs() < 1e-12);
        }
    }
    // depth 0: swapping the codes of two masked slots swaps their outputs
    let (a, b) = (plan.masked[0], plan.masked[5]);
    let rv = g.value(r).clone();
    let mut swapped = seq.clone();
    for j in 0..8 {
        let da = pe.data()[b * 8 + j] - pe.data()[a * 8 + j];
        swapped.data_mut()[a * 8 + j] += da;
        swapped.data_mut()[b * 8 + j] -= da;
    }
    let mut g2 = Graph::with_params(&store);
    let x = g2.input(swapped);
    let r2 = dec.head.forward(&mut g2, x);
    let r2 = g2.value(r2);
    for j in 0..10 {
        assert!((r2.data()[a * 10 + j] - rv.data()[b * 10 + j]).abs() < 1e-12);
        assert!((r2.data()[b * 10 + j] - rv.data()[a * 10 + j]).abs() < 1e-12);
    }
    let mut g3 = Graph::with_params(&store);
    let bad = g3.input(randn(&[1, 8, 16], 1));
    assert!(matches!(dec.forward(&mut g3, bad, &[plan]), Err(Error::Shape(_))));
}

#[test]
fn kept_slots_carry_their_original_positions() {
    let plan = sample_mask(20, 0.6, &mut rng::stream(13, &[]), 0).unwrap();
    let src = Decoder::slot_sources(&plan);
    for (j, &p) in plan.kept.iter().enumerate() {
        // the encoder codes latent j at position p; the decoder places it at p
        assert_eq!(src[p], j);
    }
    for (j, &p) in plan.masked.iter().enumerate() {
        assert_eq!(src[p], plan.kept.len() + j);
    }
}

#[test]
fn loss_contract() {
    let plan = MaskPlan::from_kept(2, vec![0]).unwrap();
    let mut g = Graph::new();
    let z = g.input(Tensor::new(&[1, 2, 1], vec![5.0, 2.0]));
    let r = g.leaf(Tensor::new(&[1, 2, 1], vec![-7.0, 0.0]), true);
    let l = reconstruction_loss(&mut g, z, r, &[plan.clone()], true).unwrap();
    assert_eq!(g.value(l).item(), 4.0);
    let grads = g.backward(l);
    assert_eq!(grads.get(r).unwrap().data()[0], 0.0);

    let plans: Vec<MaskPlan> = (0..3).map(|i| sample_mask(10, 0.7, &mut rng::stream(14, &[i]), 0).unwrap()).collect();
    let zt = randn(&[3, 10, 4], 15);
    let mut rt = zt.clone();
    for (b, p) in plans.iter().enumerate() {
        for &k in &p.kept {
            for j in 0..4 {
                rt.data_mut()[(b * 10 + k) * 4 + j] = 1e3;
            }
        }
    }
    let mut g = Graph::new();
    let z = g.input(zt.clone());
    let r = g.leaf(rt, true);
    let l = reconstruction_loss(&mut g, z, r, &plans, true).unwrap();
    assert_eq!(g.value(l).item(), 0.0);
    let noisy = randn(&[3, 10, 4], 16);
    let mut g = Graph::new();
    let z = g.input(zt);
    let r = g.leaf(noisy, true);
    let l = reconstruction_loss(&mut g, z, r, &plans, true).unwrap();
    let gr = g.backward(l).get(r).unwrap().clone();
    for (b, p) in plans.iter().enumerate() {
        for &k in &p.kept {
            assert!(gr.data()[(b * 10 + k) * 4..(b * 10 + k + 1) * 4].iter().all(|&v| v == 0.0));
        }
    }
    let full = MaskPlan::full(4);
    let mut g = Graph::new();
    let z = g.input(Tensor::zeros(&[1, 4, 1]));
    assert!(matches!(reconstruction_loss(&mut g, z, z, &[full], true), Err(Error::Config(_))));
}

#[test]
fn encoder_decoder_gradients_match_finite_differences() {
    let mut store = ParamStore::new();
    let mut r = rng::stream(17, &[]);
    let enc = Encoder::new(&mut store, "enc", 4, enc_cfg(16, 1, 2), &mut r).unwrap();
    let dec = Decoder::new(&mut store, "dec", 16, 4, DecoderConfig { dim: 8, depth: 1, heads: 2 }, &mut r).unwrap();
    let plans: Vec<MaskPlan> = (0..2).map(|i| sample_mask(6, 0.5, &mut rng::stream(18, &[i]), 0).unwrap()).collect();
    let zt = randn(&[2, 6, 4], 19);
    let loss = |store: &ParamStore| {
        let mut g = Graph::with_params(store);
        let z = g.input(zt.clone());
        let h = enc.forward(&mut g, z, &plans).unwrap();
        let k = plans[0].num_kept();
        let lat = g.narrow(h, 1, 1, k);
        let rec = dec.forward(&mut g, lat, &plans).unwrap();
        let l = reconstruction_loss(&mut g, z, rec, &plans, true).unwrap();
        (g.value(l).item(), g.backward(l).into_params())
    };
    let (_, grads) = loss(&store);
    let ids: Vec<_> = store.ids().collect();
    let report = check_params(&mut store, &ids, &grads, 6, &mut rng::stream(20, &[]), |s| loss(s).0);
    assert!(report.max_rel_err < 1e-3, "{report:?}");
}
