//! Deterministic synthetic single-channel sleep recordings.

use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::signal_io::annotations::{encode_tal, Annotation};
use crate::signal_io::edf::pack_annotation_records;
use crate::signal_io::{
    write_cache, write_edf, Provenance, RecordingHeader, SignalSpec, StageLabel, StagedRecording, StartDateTime,
    EPOCH_LEN, TARGET_RATE,
};

/// A narrow-band component with a Gaussian spectral profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub center_hz: f64,
    pub width_hz: f64,
    /// RMS amplitude of the component.
    pub amplitude: f64,
}

impl Band {
    pub fn new(center_hz: f64, width_hz: f64, amplitude: f64) -> Self {
        Self {
            center_hz,
            width_hz,
            amplitude,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecipe {
    pub bands: Vec<Band>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    /// One recipe per stage, in W, N1, N2, N3, REM order.
    pub recipes: Vec<StageRecipe>,
    /// RMS of the 1/f background.
    pub background: f64,
    /// Relative per-epoch jitter of every band amplitude.
    pub amplitude_jitter: f64,
    /// Relative per-subject gain spread.
    pub subject_gain_jitter: f64,
    pub subjects: usize,
    pub epochs_per_subject: usize,
    pub seed: u64,
    /// Row-stochastic stage transition matrix; stages are i.i.d. uniform when absent.
    pub transition: Option<Vec<Vec<f64>>>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            recipes: default_recipes(),
            background: 0.3,
            amplitude_jitter: 0.15,
            subject_gain_jitter: 0.2,
            subjects: 20,
            epochs_per_subject: 120,
            seed: 0,
            transition: None,
        }
    }
}

/// Band signatures loosely following scoring conventions: alpha in wake,
/// theta in N1, spindles in N2, slow waves in N3, theta plus beta in REM.
pub fn default_recipes() -> Vec<StageRecipe> {
    let r = |bands: &[(f64, f64, f64)]| StageRecipe {
        bands: bands.iter().map(|&(c, w, a)| Band::new(c, w, a)).collect(),
    };
    vec![
        r(&[(10.0, 1.0, 1.0), (20.0, 3.0, 0.4)]),
        r(&[(6.0, 1.0, 0.8)]),
        r(&[(13.0, 0.7, 0.7), (3.0, 1.0, 0.5)]),
        r(&[(1.5, 0.6, 1.6)]),
        r(&[(5.0, 1.2, 0.5), (24.0, 4.0, 0.7)]),
    ]
}

/// Transition matrix staying in the current stage with probability `stay`
/// and moving uniformly to another stage otherwise.
pub fn sticky_transitions(stay: f64) -> Vec<Vec<f64>> {
    let k = StageLabel::COUNT;
    (0..k)
        .map(|i| (0..k).map(|j| if i == j { stay } else { (1.0 - stay) / (k - 1) as f64 }).collect())
        .collect()
}

impl SynthSpec {
    /// Named specs: `default` (i.i.d. stages) and `markov` (sticky stages,
    /// lower per-epoch signal to noise).
    pub fn named(name: &str) -> Result<Self> {
        match name {
            "default" | "iid" => Ok(Self::default()),
            "markov" => Ok(Self::markov(0.9)),
            _ => Err(Error::Config(format!("unknown synthetic spec `{name}`"))),
        }
    }

    /// Noisy single epochs with independent errors: no per-subject gain
    /// spread, so the stage sequence is what disambiguates them.
    pub fn markov(stay: f64) -> Self {
        Self {
            background: 2.4,
            amplitude_jitter: 0.4,
            subject_gain_jitter: 0.0,
            transition: Some(sticky_transitions(stay)),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.recipes.len() != StageLabel::COUNT {
            return Err(Error::Config(format!("{} recipes for 5 stages", self.recipes.len())));
        }
        for (i, r) in self.recipes.iter().enumerate() {
            if r.bands.is_empty() {
                return Err(Error::Config(format!("stage {i} recipe has no bands")));
            }
            for b in &r.bands {
                if !(b.center_hz > 0.0 && b.center_hz < TARGET_RATE / 2.0 && b.width_hz > 0.0 && b.amplitude >= 0.0) {
                    return Err(Error::Config(format!("bad band {b:?}")));
                }
            }
            if self.recipes[..i].contains(r) {
                return Err(Error::Config(format!("stage {i} recipe duplicates another stage")));
            }
        }
        if !(self.background >= 0.0 && self.amplitude_jitter >= 0.0 && self.subject_gain_jitter >= 0.0) {
            return Err(Error::Config("noise levels must be non-negative".into()));
        }
        if self.subjects == 0 || self.epochs_per_subject == 0 {
            return Err(Error::Config("need at least one subject and one epoch".into()));
        }
        if let Some(t) = &self.transition {
            let k = StageLabel::COUNT;
            let ok = t.len() == k
                && t.iter().all(|row| {
                    row.len() == k
                        && row.iter().all(|&p| (0.0..=1.0).contains(&p))
                        && (row.iter().sum::<f64>() - 1.0).abs() < 1e-9
                });
            if !ok {
                return Err(Error::Config("transition matrix must be 5x5 with rows summing to 1".into()));
            }
        }
        Ok(())
    }
}

pub fn subject_id(index: usize) -> String {
    format!("synth-{index:03}")
}

struct Synthesizer {
    ifft: Arc<dyn Fft<f64>>,
    n: usize,
}

impl Synthesizer {
    fn new(n: usize) -> Self {
        Self {
            ifft: FftPlanner::new().plan_fft_inverse(n),
            n,
        }
    }

    /// Real noise of unit RMS whose amplitude spectrum is `shape(f)`.
    fn shaped_noise(&self, rng: &mut rng::Rng, shape: impl Fn(f64) -> f64) -> Vec<f64> {
        let n = self.n;
        let mut spec = vec![Complex64::new(0.0, 0.0); n];
        for k in 1..n.div_ceil(2) {
            let f = k as f64 * TARGET_RATE / n as f64;
            let m = shape(f);
            if m == 0.0 {
                continue;
            }
            let c = Complex64::new(rng::normal(rng), rng::normal(rng)) * m;
            spec[k] = c;
            spec[n - k] = c.conj();
        }
        self.ifft.process(&mut spec);
        let x: Vec<f64> = spec.iter().map(|c| c.re).collect();
        let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
        if rms > 0.0 {
            x.iter().map(|v| v / rms).collect()
        } else {
            x
        }
    }

    fn epoch(&self, spec: &SynthSpec, stage: StageLabel, gain: f64, rng: &mut rng::Rng) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for b in &spec.recipes[stage.index()].bands {
            let comp = self.shaped_noise(rng, |f| (-0.5 * ((f - b.center_hz) / b.width_hz).powi(2)).exp());
            let amp = b.amplitude * (1.0 + spec.amplitude_jitter * rng::normal(rng)).max(0.0);
            out.iter_mut().zip(&comp).for_each(|(o, c)| *o += amp * c);
        }
        if spec.background > 0.0 {
            let pink = self.shaped_noise(rng, |f| if (0.5..=45.0).contains(&f) { f.powf(-0.5) } else { 0.0 });
            out.iter_mut().zip(&pink).for_each(|(o, c)| *o += spec.background * c);
        }
        out.iter_mut().for_each(|v| *v *= gain);
        out
    }
}

fn stage_sequence(spec: &SynthSpec, rng: &mut rng::Rng) -> Vec<StageLabel> {
    let k = StageLabel::COUNT;
    let mut out = Vec::with_capacity(spec.epochs_per_subject);
    let mut cur = rng.random_range(0..k);
    for i in 0..spec.epochs_per_subject {
        if i > 0 {
            cur = match &spec.transition {
                None => rng.random_range(0..k),
                Some(t) => {
                    let u: f64 = rng.random();
                    let mut acc = 0.0;
                    let mut next = k - 1;
                    for (j, &p) in t[cur].iter().enumerate() {
                        acc += p;
                        if u < acc {
                            next = j;
                            break;
                        }
                    }
                    next
                }
            };
        }
        out.push(StageLabel::from_index(cur).expect("stage index"));
    }
    out
}

/// One subject's recording; independent of how many other subjects exist.
pub fn generate_subject(spec: &SynthSpec, index: usize) -> Result<StagedRecording> {
    spec.validate()?;
    let synth = Synthesizer::new(EPOCH_LEN);
    let mut r = rng::stream(spec.seed, &[rng::hash_str("subject"), index as u64]);
    let gain = (1.0 + spec.subject_gain_jitter * rng::normal(&mut r)).max(0.2);
    let labels = stage_sequence(spec, &mut r);
    let epochs = labels.iter().map(|&s| synth.epoch(spec, s, gain, &mut r)).collect();
    Ok(StagedRecording {
        subject_id: subject_id(index),
        sample_rate: TARGET_RATE,
        epochs,
        labels,
    })
}

pub fn generate(spec: &SynthSpec) -> Result<Vec<StagedRecording>> {
    spec.validate()?;
    (0..spec.subjects).map(|i| generate_subject(spec, i)).collect()
}

pub fn provenance() -> Provenance {
    Provenance {
        source: "synthetic".into(),
        channel: "synthetic".into(),
        source_rate: TARGET_RATE,
        filter: "none".into(),
        ..Provenance::default()
    }
}

/// Writes every recording into the epoch cache format under `dir`.
pub fn write_dataset(dir: &Path, recordings: &[StagedRecording]) -> Result<()> {
    let prov = provenance();
    for rec in recordings {
        write_cache(dir, rec, &prov)?;
    }
    Ok(())
}

const EDF_LABEL: &str = "EEG Fpz-Cz";

/// EDF+ file holding the signal (one 30 s record per epoch) and the stage
/// annotations.
pub fn to_edf(rec: &StagedRecording) -> Result<Vec<u8>> {
    rec.validate()?;
    let peak = rec.epochs.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    let range = (peak * 1.01).max(1e-6);
    let spec = SignalSpec::new(EDF_LABEL, -range, range, EPOCH_LEN);
    let digital: Vec<i16> = rec.epochs.iter().flatten().map(|&v| spec.to_digital(v)).collect();
    let ann_spr = 30;
    let records: Vec<Vec<u8>> = rec
        .labels
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let onset = (i * 30) as f64;
            let token = match s {
                StageLabel::Wake => "W",
                StageLabel::N1 => "1",
                StageLabel::N2 => "2",
                StageLabel::N3 => "3",
                StageLabel::Rem => "R",
            };
            encode_tal(
                onset,
                &[Annotation {
                    onset,
                    duration: Some(30.0),
                    text: format!("Sleep stage {token}"),
                }],
            )
        })
        .collect();
    let ann = pack_annotation_records(&records, ann_spr)?;
    let header = RecordingHeader {
        version_tag: "0".into(),
        patient_id: format!("{} X X X", rec.subject_id),
        recording_id: "Startdate X X X X".into(),
        start: StartDateTime::default(),
        reserved: "EDF+C".into(),
        num_data_records: rec.len(),
        record_duration: 30.0,
        signals: vec![
            spec,
            SignalSpec {
                label: "EDF Annotations".into(),
                ..SignalSpec::new("", -1.0, 1.0, ann_spr)
            },
        ],
    };
    write_edf(&header, &[digital, ann])
}

#[cfg(test)]
mod tests {
    use rustfft::FftPlanner;

    use super::*;
    use crate::signal_io::{load_recording, AnnotationSource};

    fn band_power(x: &[f64], lo: f64, hi: f64) -> f64 {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
        let n = buf.len();
        (1..n / 2)
            .filter(|&k| {
                let f = k as f64 * TARGET_RATE / n as f64;
                f >= lo && f < hi
            })
            .map(|k| buf[k].norm_sqr())
            .sum()
    }

    fn small(seed: u64) -> SynthSpec {
        SynthSpec {
            subjects: 3,
            epochs_per_subject: 40,
            seed,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn regeneration_is_identical() {
        let a = generate(&small(4)).unwrap();
        let b = generate(&small(4)).unwrap();
        assert_eq!(a, b);
        let c = generate(&small(5)).unwrap();
        assert_ne!(a[0].epochs, c[0].epochs);
        // A subject does not depend on how many others are generated.
        assert_eq!(generate_subject(&small(4), 2).unwrap(), a[2]);
    }

    #[test]
    fn slow_wave_and_wake_band_ratios() {
        let spec = SynthSpec {
            subjects: 4,
            epochs_per_subject: 60,
            ..SynthSpec::default()
        };
        let mut seen = [0, 0];
        for rec in generate(&spec).unwrap() {
            assert_eq!(rec.epochs.len(), rec.labels.len());
            for (e, s) in rec.epochs.iter().zip(&rec.labels) {
                let ratio = band_power(e, 0.5, 4.0) / band_power(e, 8.0, 13.0);
                match s {
                    StageLabel::N3 => {
                        assert!(ratio > 3.0, "N3 ratio {ratio}");
                        seen[0] += 1;
                    }
                    StageLabel::Wake => {
                        assert!(ratio < 1.0 / 3.0, "W ratio {ratio}");
                        seen[1] += 1;
                    }
                    _ => {}
                }
            }
        }
        assert!(seen[0] > 10 && seen[1] > 10);
    }

    #[test]
    fn sticky_chain_run_lengths() {
        let spec = SynthSpec {
            subjects: 1,
            epochs_per_subject: 10_000,
            transition: Some(sticky_transitions(0.9)),
            ..SynthSpec::default()
        };
        let labels = stage_sequence(&spec, &mut rng::stream(1, &[]));
        let runs = 1 + labels.windows(2).filter(|w| w[0] != w[1]).count();
        let mean = labels.len() as f64 / runs as f64;
        assert!((mean - 10.0).abs() < 2.0, "{mean}");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = SynthSpec::default();
        s.transition = Some(vec![vec![0.5; 5]; 5]);
        assert!(matches!(s.validate(), Err(Error::Config(_))));
        let mut s = SynthSpec::default();
        s.recipes[1] = s.recipes[0].clone();
        assert!(s.validate().is_err());
        let mut s = SynthSpec::default();
        s.recipes.pop();
        assert!(s.validate().is_err());
        assert!(SynthSpec::named("nope").is_err());
        assert!(SynthSpec::markov(0.9).validate().is_ok());
    }

    #[test]
    fn edf_export_reparses_within_quantisation() {
        let rec = generate_subject(&small(7), 0).unwrap();
        let bytes = to_edf(&rec).unwrap();
        let (back, prov) = load_recording(&rec.subject_id, &bytes, EDF_LABEL, AnnotationSource::Embedded).unwrap();
        assert_eq!(back.labels, rec.labels);
        assert_eq!(prov.resample_up, 1);
        let (header, signals) = crate::signal_io::parse_edf(&bytes).unwrap();
        let step = (header.signals[0].physical_max - header.signals[0].physical_min) / 65535.0;
        for (a, b) in signals[0].iter().zip(rec.epochs.iter().flatten()) {
            assert!((a - b).abs() <= step, "{a} vs {b}");
        }
    }
}
