//! Recording ingestion: EDF parsing, stage annotations, band-pass filtering,
//! resampling to 100 Hz and 30 s epoching.

pub mod annotations;
pub mod cache;
pub mod edf;
pub mod filter;
pub mod resample;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use annotations::{map_stage, parse_csv, parse_tal, stage_labels_per_epoch, Annotation};
pub use cache::{list_cached, read_cache, write_cache, CacheMeta};
pub use edf::{parse_edf, parse_edf_digital, write_edf, EdfFile, RecordingHeader, SignalSpec, StartDateTime};
use filter::{BandType, Sos};

pub const TARGET_RATE: f64 = 100.0;
pub const EPOCH_SECONDS: f64 = 30.0;
pub const EPOCH_LEN: usize = 3000;
pub const FILTER_ORDER: usize = 5;
pub const BAND_HZ: (f64, f64) = (1.0, 50.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum StageLabel {
    Wake,
    N1,
    N2,
    N3,
    Rem,
}

impl StageLabel {
    pub const ALL: [StageLabel; 5] = [StageLabel::Wake, StageLabel::N1, StageLabel::N2, StageLabel::N3, StageLabel::Rem];
    pub const COUNT: usize = 5;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn short(self) -> &'static str {
        match self {
            StageLabel::Wake => "W",
            StageLabel::N1 => "N1",
            StageLabel::N2 => "N2",
            StageLabel::N3 => "N3",
            StageLabel::Rem => "REM",
        }
    }
}

impl std::fmt::Display for StageLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.short())
    }
}

/// A preprocessed single-channel recording cut into labelled 30 s epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedRecording {
    pub subject_id: String,
    pub sample_rate: f64,
    pub epochs: Vec<Vec<f64>>,
    pub labels: Vec<StageLabel>,
}

impl StagedRecording {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.labels.len() != self.epochs.len() {
            return Err(Error::Shape(format!("{} labels for {} epochs", self.labels.len(), self.epochs.len())));
        }
        let want = (EPOCH_SECONDS * self.sample_rate).round() as usize;
        for (i, e) in self.epochs.iter().enumerate() {
            if e.len() != want {
                return Err(Error::Shape(format!("epoch {i} has {} samples, expected {want}", e.len())));
            }
            if !e.iter().all(|v| v.is_finite()) {
                return Err(Error::Numerical {
                    layer: format!("{} epoch {i}", self.subject_id),
                });
            }
        }
        Ok(())
    }
}

/// How a recording was produced; stored next to cached epochs.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub channel: String,
    pub source_rate: f64,
    pub filter: String,
    pub filter_order: usize,
    pub band_hz: (f64, f64),
    pub lowpass_applied: bool,
    pub resample_up: usize,
    pub resample_down: usize,
    pub dropped_epochs: Vec<usize>,
    /// Epochs of signal beyond the annotated span, discarded.
    pub unannotated_tail_epochs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PreprocessInfo {
    pub lowpass_applied: bool,
    pub resample_up: usize,
    pub resample_down: usize,
}

/// Band-pass 1-50 Hz (zero-phase Butterworth) and resample to 100 Hz.
pub fn preprocess(signal: &[f64], source_rate: f64) -> Result<Vec<f64>> {
    preprocess_with_info(signal, source_rate).map(|(y, _)| y)
}

pub fn preprocess_with_info(signal: &[f64], source_rate: f64) -> Result<(Vec<f64>, PreprocessInfo)> {
    if !(source_rate >= TARGET_RATE) {
        return Err(Error::UnsupportedRate(source_rate));
    }
    if (signal.len() as f64) < source_rate {
        return Err(Error::Config(format!(
            "signal of {} samples is shorter than 1 s at {source_rate} Hz",
            signal.len()
        )));
    }
    let mut sos = Sos::butterworth(FILTER_ORDER, BAND_HZ.0, source_rate, BandType::Highpass);
    let lowpass_applied = BAND_HZ.1 < source_rate / 2.0;
    if lowpass_applied {
        sos = sos.chain(Sos::butterworth(FILTER_ORDER, BAND_HZ.1, source_rate, BandType::Lowpass));
    }
    let filtered = sos.filtfilt(signal);
    let (y, (up, down)) = resample::resample(&filtered, source_rate, TARGET_RATE);
    let want = (signal.len() as f64 / source_rate * TARGET_RATE).round() as usize;
    let mut y = y;
    y.resize(want, 0.0);
    Ok((
        y,
        PreprocessInfo {
            lowpass_applied,
            resample_up: up,
            resample_down: down,
        },
    ))
}

/// Cuts a 100 Hz signal into epochs anchored at the start and attaches
/// mapped labels. Epochs whose raw label maps to "drop" are removed; the
/// partial trailing epoch and epochs without a label are discarded.
pub fn epoch_and_label(
    subject_id: &str,
    signal: &[f64],
    raw_labels: &[String],
) -> Result<(StagedRecording, Vec<usize>)> {
    let n = (signal.len() / EPOCH_LEN).min(raw_labels.len());
    let mut epochs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut dropped = Vec::new();
    for (i, raw) in raw_labels.iter().enumerate().take(n) {
        match annotations::map_stage(raw)? {
            Some(l) => {
                epochs.push(signal[i * EPOCH_LEN..(i + 1) * EPOCH_LEN].to_vec());
                labels.push(l);
            }
            None => dropped.push(i),
        }
    }
    Ok((
        StagedRecording {
            subject_id: subject_id.to_string(),
            sample_rate: TARGET_RATE,
            epochs,
            labels,
        },
        dropped,
    ))
}

/// Where the stage annotations for a recording come from.
pub enum AnnotationSource<'a> {
    /// An EDF+ file whose "EDF Annotations" signal holds the hypnogram.
    EdfPlus(&'a [u8]),
    /// The annotation signal of the recording itself.
    Embedded,
    Csv(&'a str),
}

/// Full ingestion of one recording.
pub fn load_recording(
    subject_id: &str,
    edf_bytes: &[u8],
    channel: &str,
    annotations: AnnotationSource<'_>,
) -> Result<(StagedRecording, Provenance)> {
    let file = parse_edf_digital(edf_bytes)?;
    let idx = file.header.find_signal(channel)?;
    let rate = file.header.sample_rate(idx);
    let raw = file.physical(idx);

    let tal_of = |f: &EdfFile| -> Result<Vec<Annotation>> {
        let mut out = Vec::new();
        for (i, s) in f.header.signals.iter().enumerate() {
            if s.is_annotation() {
                out.extend(parse_tal(&f.annotation_bytes(i))?);
            }
        }
        Ok(out)
    };
    let (ann, stages_only) = match annotations {
        AnnotationSource::EdfPlus(bytes) => (tal_of(&parse_edf_digital(bytes)?)?, true),
        AnnotationSource::Embedded => (tal_of(&file)?, true),
        AnnotationSource::Csv(text) => (parse_csv(text)?, false),
    };
    let signal_sec = file.header.duration_sec();
    let span = annotations::annotated_end(&ann, stages_only)
        .map_or(signal_sec, |end| end.min(signal_sec));
    let labels = stage_labels_per_epoch(&ann, span, EPOCH_SECONDS, stages_only)?;

    let (clean, info) = preprocess_with_info(&raw, rate)?;
    let total_epochs = clean.len() / EPOCH_LEN;
    let (rec, dropped) = epoch_and_label(subject_id, &clean, &labels)?;
    rec.validate()?;
    let prov = Provenance {
        source: "edf".into(),
        channel: file.header.signals[idx].label.clone(),
        source_rate: rate,
        filter: "butterworth-zero-phase".into(),
        filter_order: FILTER_ORDER,
        band_hz: BAND_HZ,
        lowpass_applied: info.lowpass_applied,
        resample_up: info.resample_up,
        resample_down: info.resample_down,
        dropped_epochs: dropped,
        unannotated_tail_epochs: total_epochs.saturating_sub(labels.len()),
    };
    Ok((rec, prov))
}

/// Per-recording standardisation to zero mean and unit variance.
pub fn z_normalize(rec: &StagedRecording) -> Result<StagedRecording> {
    let n: usize = rec.epochs.iter().map(Vec::len).sum();
    if n == 0 {
        return Err(Error::Config("empty recording".into()));
    }
    let mean = rec.epochs.iter().flatten().sum::<f64>() / n as f64;
    let var = rec.epochs.iter().flatten().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    let std = var.sqrt();
    if !(std > 1e-12 * mean.abs().max(1.0)) {
        return Err(Error::DegenerateSignal);
    }
    let epochs = rec
        .epochs
        .iter()
        .map(|e| e.iter().map(|v| (v - mean) / std).collect())
        .collect();
    Ok(StagedRecording {
        epochs,
        ..rec.clone()
    })
}
