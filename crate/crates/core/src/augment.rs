//! Single-channel epoch augmentations for the contrastive baselines.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal_io::filter::{BandType, Sos};
use crate::signal_io::TARGET_RATE;

/// Delta, theta, alpha, beta and broadband, in Hz.
pub const DEFAULT_BANDS: [(f64, f64); 5] = [(1.0, 4.0), (4.0, 8.0), (8.0, 13.0), (13.0, 30.0), (1.0, 50.0)];

const BANDPASS_ORDER: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    GaussianNoise { sigma: f64 },
    RandomCrop { min_frac: f64 },
    RandomBandpass { bands: Vec<(f64, f64)> },
    TemporalCutout { max_frac: f64 },
    Permutation { num_segments: usize },
}

impl AugmentationKind {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Self::GaussianNoise { sigma } => *sigma > 0.0 && sigma.is_finite(),
            Self::RandomCrop { min_frac } => *min_frac > 0.0 && *min_frac < 1.0,
            Self::RandomBandpass { bands } => {
                !bands.is_empty() && bands.iter().all(|&(lo, hi)| lo > 0.0 && hi > lo)
            }
            Self::TemporalCutout { max_frac } => *max_frac > 0.0 && *max_frac < 1.0,
            Self::Permutation { num_segments } => *num_segments >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation parameters: {self:?}")))
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::GaussianNoise { .. } => "gaussian_noise",
            Self::RandomCrop { .. } => "random_crop",
            Self::RandomBandpass { .. } => "random_bandpass",
            Self::TemporalCutout { .. } => "temporal_cutout",
            Self::Permutation { .. } => "permutation",
        }
    }
}

/// Transforms `epoch` without changing its length.
pub fn apply(epoch: &[f64], kind: &AugmentationKind, rng: &mut impl Rng) -> Result<Vec<f64>> {
    kind.validate()?;
    if epoch.iter().any(|v| !v.is_finite()) {
        return Err(Error::DegenerateSignal);
    }
    let n = epoch.len();
    if n < 2 {
        return Ok(epoch.to_vec());
    }
    Ok(match kind {
        AugmentationKind::GaussianNoise { sigma } => {
            let dist = Normal::new(0.0, *sigma).expect("validated sigma");
            epoch.iter().map(|&v| v + dist.sample(rng)).collect()
        }
        AugmentationKind::RandomCrop { min_frac } => {
            let min_len = ((min_frac * n as f64).ceil() as usize).clamp(2, n);
            let len = rng.random_range(min_len..=n);
            let start = rng.random_range(0..=n - len);
            stretch(&epoch[start..start + len], n)
        }
        AugmentationKind::RandomBandpass { bands } => {
            let &(lo, hi) = bands.choose(rng).expect("validated bands");
            bandpass(epoch, lo, hi, TARGET_RATE)
        }
        AugmentationKind::TemporalCutout { max_frac } => {
            let max_len = ((max_frac * n as f64).floor() as usize).max(1);
            let len = rng.random_range(1..=max_len);
            let start = rng.random_range(0..=n - len);
            let mean = epoch.iter().sum::<f64>() / n as f64;
            let mut out = epoch.to_vec();
            out[start..start + len].fill(mean);
            out
        }
        AugmentationKind::Permutation { num_segments } => {
            let k = (*num_segments).min(n);
            let mut cuts: Vec<usize> = (1..n).collect::<Vec<_>>().choose_multiple(rng, k - 1).copied().collect();
            cuts.sort_unstable();
            let mut bounds = vec![0];
            bounds.extend(cuts);
            bounds.push(n);
            let mut segs: Vec<&[f64]> = bounds.windows(2).map(|w| &epoch[w[0]..w[1]]).collect();
            segs.shuffle(rng);
            segs.concat()
        }
    })
}

/// Linear interpolation of `x` onto `n` evenly spaced points.
fn stretch(x: &[f64], n: usize) -> Vec<f64> {
    let last = (x.len() - 1) as f64;
    (0..n)
        .map(|i| {
            let pos = if n == 1 { 0.0 } else { i as f64 * last / (n - 1) as f64 };
            let j = (pos.floor() as usize).min(x.len() - 2);
            let w = pos - j as f64;
            x[j] * (1.0 - w) + x[j + 1] * w
        })
        .collect()
}

fn bandpass(x: &[f64], lo: f64, hi: f64, fs: f64) -> Vec<f64> {
    let nyq = fs / 2.0;
    let mut sos: Option<Sos> = None;
    if lo > 0.0 && lo < nyq {
        sos = Some(Sos::butterworth(BANDPASS_ORDER, lo, fs, BandType::Highpass));
    }
    if hi < nyq {
        let lp = Sos::butterworth(BANDPASS_ORDER, hi, fs, BandType::Lowpass);
        sos = Some(match sos {
            Some(s) => s.chain(lp),
            None => lp,
        });
    }
    match sos {
        Some(s) => s.filtfilt(x),
        None => x.to_vec(),
    }
}

/// Defaults used when sampling augmentations for a view.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Noise standard deviation relative to the epoch's own.
    pub noise_rel_std: f64,
    pub min_crop_frac: f64,
    pub max_cutout_frac: f64,
    pub segments: (usize, usize),
    pub bands: Vec<(f64, f64)>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            noise_rel_std: 0.05,
            min_crop_frac: 0.5,
            max_cutout_frac: 0.25,
            segments: (4, 8),
            bands: DEFAULT_BANDS.to_vec(),
        }
    }
}

impl AugmentConfig {
    /// Concrete parameters of the `index`-th kind (0..5) for this epoch.
    pub fn instantiate(&self, index: usize, epoch: &[f64], rng: &mut impl Rng) -> AugmentationKind {
        match index {
            0 => {
                let n = epoch.len().max(1) as f64;
                let mean = epoch.iter().sum::<f64>() / n;
                let std = (epoch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                AugmentationKind::GaussianNoise {
                    sigma: (self.noise_rel_std * std).max(1e-12),
                }
            }
            1 => AugmentationKind::RandomCrop {
                min_frac: self.min_crop_frac,
            },
            2 => AugmentationKind::RandomBandpass {
                bands: self.bands.clone(),
            },
            3 => AugmentationKind::TemporalCutout {
                max_frac: self.max_cutout_frac,
            },
            _ => AugmentationKind::Permutation {
                num_segments: rng.random_range(self.segments.0..=self.segments.1.max(self.segments.0)),
            },
        }
    }

    /// One augmented view: two distinct kinds, applied in the sampled order.
    pub fn view(&self, epoch: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, [AugmentationKind; 2])> {
        let picks: Vec<usize> = (0..5).collect::<Vec<_>>().choose_multiple(rng, 2).copied().collect();
        let first = self.instantiate(picks[0], epoch, rng);
        let out = apply(epoch, &first, rng)?;
        let second = self.instantiate(picks[1], &out, rng);
        let out = apply(&out, &second, rng)?;
        Ok((out, [first, second]))
    }
}
