//! wasm-bindgen bindings for the static page in `www/`.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use wasm_bindgen::prelude::*;

use neuronet::augment::{self, AugmentationKind, DEFAULT_BANDS};
use neuronet::contrastive::nt_xent_value;
use neuronet::mae::sample_mask;
use neuronet::signal_io::{StageLabel, TARGET_RATE};
use neuronet::synth::{generate_subject, SynthSpec};
use neuronet::{rng, Tensor};

fn js_err(e: neuronet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// One 30 s epoch of synthetic EEG for `stage` (0 = W .. 4 = REM).
#[wasm_bindgen]
pub fn synth_epoch(stage: usize, seed: u64) -> Result<Vec<f64>, JsError> {
    let stage = StageLabel::from_index(stage).ok_or_else(|| JsError::new("stage must be 0..4"))?;
    let mut spec = SynthSpec {
        subjects: 1,
        epochs_per_subject: 1,
        ..SynthSpec::default()
    };
    // the first stage of a subject is uniform, so redraw until it matches
    for attempt in 0u64.. {
        spec.seed = rng::derive_key(seed, &[attempt]);
        let rec = generate_subject(&spec, 0).map_err(js_err)?;
        if rec.labels[0] == stage {
            return Ok(rec.epochs.into_iter().next().unwrap_or_default());
        }
    }
    unreachable!()
}

/// Applies a named augmentation (`noise`, `crop`, `bandpass`, `cutout`,
/// `permute`) to an epoch.
#[wasm_bindgen]
pub fn augment_epoch(epoch: &[f64], kind: &str, seed: u64) -> Result<Vec<f64>, JsError> {
    let kind = match kind {
        "noise" => AugmentationKind::GaussianNoise { sigma: 0.5 },
        "crop" => AugmentationKind::RandomCrop { min_frac: 0.5 },
        "bandpass" => AugmentationKind::RandomBandpass { bands: DEFAULT_BANDS.to_vec() },
        "cutout" => AugmentationKind::TemporalCutout { max_frac: 0.25 },
        "permute" => AugmentationKind::Permutation { num_segments: 5 },
        other => return Err(JsError::new(&format!("unknown augmentation `{other}`"))),
    };
    augment::apply(epoch, &kind, &mut rng::stream(seed, &[])).map_err(js_err)
}

/// Log10 power per 0.5 Hz bin from 0 to 50 Hz (one-sided, Hann window).
#[wasm_bindgen]
pub fn power_spectrum(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 {
        return Vec::new();
    }
    let mut buf: Vec<Complex64> = x
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
            Complex64::new(v * w, 0.0)
        })
        .collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = TARGET_RATE / n as f64;
    let per_bin = ((0.5 / df).round() as usize).max(1);
    let bins = ((TARGET_RATE / 2.0) / (per_bin as f64 * df)) as usize;
    (0..bins)
        .map(|b| {
            let p: f64 = buf[b * per_bin..(b + 1) * per_bin].iter().map(|c| c.norm_sqr()).sum();
            (p / n as f64 + 1e-12).log10()
        })
        .collect()
}

/// Indices of the frames left visible when masking `num_frames` at `ratio`.
#[wasm_bindgen]
pub fn mask_kept(num_frames: usize, ratio: f64, seed: u64) -> Result<Vec<u32>, JsError> {
    let plan = sample_mask(num_frames, ratio, &mut rng::stream(seed, &[]), seed).map_err(js_err)?;
    Ok(plan.kept.iter().map(|&k| k as u32).collect())
}

/// Contrastive loss for `n` random unit embeddings of width `dim` whose
/// second views are the first plus Gaussian noise of scale `spread`.
/// Returns `[loss, ln(2n - 1)]`.
#[wasm_bindgen]
pub fn contrastive_loss(n: usize, dim: usize, spread: f64, tau: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if n < 2 || dim < 1 {
        return Err(JsError::new("need n >= 2 and dim >= 1"));
    }
    let mut r = rng::stream(seed, &[]);
    let c1 = Tensor::from_fn(&[n, dim], |_| rng::normal(&mut r));
    let c2 = Tensor::from_fn(&[n, dim], |i| c1.data()[i] + spread * rng::normal(&mut r));
    let loss = nt_xent_value(&unit_rows(c1), &unit_rows(c2), tau).map_err(js_err)?;
    Ok(vec![loss, ((2 * n - 1) as f64).ln()])
}

fn unit_rows(mut t: Tensor) -> Tensor {
    let p = t.dim(1);
    for row in t.data_mut().chunks_mut(p) {
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        row.iter_mut().for_each(|v| *v /= norm);
    }
    t
}
