//! Butterworth design (bilinear transform, second-order sections) and
//! zero-phase forward-backward filtering.

use std::f64::consts::PI;

use num_complex::Complex64;

/// One biquad `b0 + b1 z^-1 + b2 z^-2 / (1 + a1 z^-1 + a2 z^-2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    fn response(&self, z: Complex64) -> Complex64 {
        let zi = z.inv();
        let num = self.b[0] + self.b[1] * zi + self.b[2] * zi * zi;
        let den = self.a[0] + self.a[1] * zi + self.a[2] * zi * zi;
        num / den
    }

    /// Transposed direct-form II state for a unit step at steady state.
    fn step_state(&self) -> [f64; 2] {
        let [b0, b1, b2] = self.b;
        let [_, a1, a2] = self.a;
        let gain = (b0 + b1 + b2) / (1.0 + a1 + a2);
        [gain - b0, b2 - a2 * gain]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BandType {
    Lowpass,
    Highpass,
}

/// Digital Butterworth filter as a cascade of biquads.
#[derive(Clone, Debug, PartialEq)]
pub struct Sos {
    pub sections: Vec<Biquad>,
}

impl Sos {
    pub fn butterworth(order: usize, cutoff_hz: f64, fs: f64, kind: BandType) -> Self {
        assert!(order >= 1);
        assert!(cutoff_hz > 0.0 && cutoff_hz < fs / 2.0, "cutoff {cutoff_hz} outside (0, {})", fs / 2.0);
        let k = 2.0 * fs;
        let warped = k * (PI * cutoff_hz / fs).tan();
        let n = order as f64;
        let mut sections = Vec::new();
        let (zero, reference) = match kind {
            BandType::Lowpass => (-1.0, Complex64::new(1.0, 0.0)),
            BandType::Highpass => (1.0, Complex64::new(-1.0, 0.0)),
        };
        for i in 0..order.div_ceil(2) {
            let theta = PI * (2.0 * i as f64 + n + 1.0) / (2.0 * n);
            let proto = Complex64::from_polar(1.0, theta);
            let s = match kind {
                BandType::Lowpass => proto * warped,
                BandType::Highpass => warped / proto,
            };
            let p = (k + s) / (k - s);
            let mut sec = if (2 * i + 1) == order {
                Biquad {
                    b: [1.0, -zero, 0.0],
                    a: [1.0, -p.re, 0.0],
                }
            } else {
                Biquad {
                    b: [1.0, -2.0 * zero, 1.0],
                    a: [1.0, -2.0 * p.re, p.norm_sqr()],
                }
            };
            let g = sec.response(reference).norm();
            for b in &mut sec.b {
                *b /= g;
            }
            sections.push(sec);
        }
        Self { sections }
    }

    pub fn order(&self) -> usize {
        self.sections.iter().map(|s| if s.a[2] == 0.0 { 1 } else { 2 }).sum()
    }

    pub fn chain(mut self, other: Sos) -> Self {
        self.sections.extend(other.sections);
        self
    }

    /// Magnitude response at `f` Hz.
    pub fn gain_at(&self, f: f64, fs: f64) -> f64 {
        let z = Complex64::from_polar(1.0, 2.0 * PI * f / fs);
        self.sections.iter().map(|s| s.response(z)).product::<Complex64>().norm()
    }

    fn filter(&self, x: &mut [f64], initial: Option<f64>) {
        let mut scale = 1.0;
        for sec in &self.sections {
            let [mut z0, mut z1] = match initial {
                Some(x0) => {
                    let st = sec.step_state();
                    [st[0] * scale * x0, st[1] * scale * x0]
                }
                None => [0.0, 0.0],
            };
            scale *= (sec.b.iter().sum::<f64>()) / (sec.a.iter().sum::<f64>());
            let [b0, b1, b2] = sec.b;
            let [_, a1, a2] = sec.a;
            for v in x.iter_mut() {
                let xin = *v;
                let y = b0 * xin + z0;
                z0 = b1 * xin - a1 * y + z1;
                z1 = b2 * xin - a2 * y;
                *v = y;
            }
        }
    }

    /// Causal filtering from rest.
    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        self.filter(&mut y, None);
        y
    }

    /// Zero-phase forward-backward filtering with odd extension at both ends
    /// and steady-state initial conditions.
    pub fn filtfilt(&self, x: &[f64]) -> Vec<f64> {
        if x.is_empty() {
            return Vec::new();
        }
        let pad = (3 * (2 * self.sections.len() + 1)).min(x.len() - 1);
        let n = x.len();
        let mut ext = Vec::with_capacity(n + 2 * pad);
        ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
        ext.extend_from_slice(x);
        ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
        let first = ext[0];
        self.filter(&mut ext, Some(first));
        ext.reverse();
        let first = ext[0];
        self.filter(&mut ext, Some(first));
        ext.reverse();
        ext[pad..pad + n].to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lowpass_half_power_at_cutoff() {
        let f = Sos::butterworth(5, 20.0, 200.0, BandType::Lowpass);
        assert_eq!(f.order(), 5);
        assert!((f.gain_at(0.0, 200.0) - 1.0).abs() < 1e-12);
        assert!((f.gain_at(20.0, 200.0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(f.gain_at(99.9, 200.0) < 1e-6);
    }

    #[test]
    fn highpass_matches_analog_magnitude_after_prewarp() {
        let fs = 100.0;
        let f = Sos::butterworth(5, 1.0, fs, BandType::Highpass);
        assert!((f.gain_at(50.0, fs) - 1.0).abs() < 1e-12);
        assert!(f.gain_at(0.0, fs) < 1e-12);
        // bilinear maps the analog curve through tan-warped frequencies
        let w = |f: f64| (PI * f / fs).tan();
        for hz in [0.3, 0.7, 1.0, 2.0, 10.0] {
            let expect = 1.0 / (1.0 + (w(1.0) / w(hz)).powi(10)).sqrt();
            assert!((f.gain_at(hz, fs) - expect).abs() < 1e-9, "{hz}");
        }
    }

    #[test]
    fn filtfilt_has_no_phase_shift() {
        let fs = 100.0;
        let f = Sos::butterworth(5, 1.0, fs, BandType::Highpass);
        let x: Vec<f64> = (0..2000).map(|i| (2.0 * PI * 10.0 * i as f64 / fs).sin()).collect();
        let y = f.filtfilt(&x);
        let err = x[500..1500].iter().zip(&y[500..1500]).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-3, "{err}");
    }
}
