//! Rational polyphase resampling with a Kaiser-windowed sinc filter.

use std::f64::consts::PI;

/// Modified Bessel function of the first kind, order 0.
fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `up / down` approximating `to / from`, with `up` bounded so the
/// polyphase filter stays small.
pub fn rational_ratio(from: f64, to: f64) -> (usize, usize) {
    let target = to / from;
    let mut best = (1usize, 1usize, f64::INFINITY);
    for up in 1..=256usize {
        let down = (up as f64 / target).round().max(1.0) as usize;
        let err = (up as f64 / down as f64 - target).abs();
        if err < best.2 - 1e-15 {
            best = (up, down, err);
            if err < 1e-12 {
                break;
            }
        }
    }
    let g = gcd(best.0 as u64, best.1 as u64) as usize;
    (best.0 / g, best.1 / g)
}

/// Lowpass FIR for the upsampled rate: passband edge `pass_hz`, stopband
/// edge `stop_hz`, attenuation `atten_db`. Length is odd so the delay is an
/// integer number of samples.
pub fn kaiser_lowpass(rate: f64, pass_hz: f64, stop_hz: f64, atten_db: f64) -> Vec<f64> {
    let width = 2.0 * PI * (stop_hz - pass_hz) / rate;
    let mut taps = ((atten_db - 8.0) / (2.285 * width)).ceil() as usize + 1;
    if taps % 2 == 0 {
        taps += 1;
    }
    let beta = if atten_db > 50.0 {
        0.1102 * (atten_db - 8.7)
    } else if atten_db >= 21.0 {
        0.5842 * (atten_db - 21.0).powf(0.4) + 0.07886 * (atten_db - 21.0)
    } else {
        0.0
    };
    let fc = 0.5 * (pass_hz + stop_hz) / rate;
    let mid = (taps - 1) as f64 / 2.0;
    let norm = bessel_i0(beta);
    (0..taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 { 2.0 * fc } else { (2.0 * PI * fc * t).sin() / (PI * t) };
            let r = t / mid;
            let w = bessel_i0(beta * (1.0 - r * r).max(0.0).sqrt()) / norm;
            sinc * w
        })
        .collect()
}

/// Resamples by `up / down`. Output length is `round(n * up / down)` and
/// sample `k` is aligned with input time `k * down / up`.
pub fn resample_poly(x: &[f64], up: usize, down: usize, h: &[f64]) -> Vec<f64> {
    let out_len = ((x.len() * up) as f64 / down as f64).round() as usize;
    if up == 1 && down == 1 {
        return x.to_vec();
    }
    let delay = (h.len() - 1) / 2;
    let n_up = x.len() * up;
    let mut out = Vec::with_capacity(out_len);
    for k in 0..out_len {
        let center = k * down + delay;
        // contributions from upsampled indices i = center - j with i % up == 0
        let lo = center.saturating_sub(h.len() - 1);
        let first = lo.div_ceil(up) * up;
        let mut acc = 0.0;
        let mut i = first;
        while i <= center && i < n_up {
            acc += h[center - i] * x[i / up];
            i += up;
        }
        out.push(acc * up as f64);
    }
    out
}

/// Anti-aliased resampling from `from` Hz to `to` Hz.
pub fn resample(x: &[f64], from: f64, to: f64) -> (Vec<f64>, (usize, usize)) {
    let (up, down) = rational_ratio(from, to);
    if up == down {
        return (x.to_vec(), (1, 1));
    }
    let nyq = 0.5 * from.min(to);
    let h = kaiser_lowpass(from * up as f64, 0.84 * nyq, nyq, 60.0);
    (resample_poly(x, up, down, &h), (up, down))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratios_for_common_rates() {
        assert_eq!(rational_ratio(125.0, 100.0), (4, 5));
        assert_eq!(rational_ratio(200.0, 100.0), (1, 2));
        assert_eq!(rational_ratio(256.0, 100.0), (25, 64));
        assert_eq!(rational_ratio(100.0, 100.0), (1, 1));
    }

    #[test]
    fn output_length_and_alignment() {
        let fs = 125.0;
        let x: Vec<f64> = (0..1250).map(|i| (2.0 * PI * 5.0 * i as f64 / fs).sin()).collect();
        let (y, ratio) = resample(&x, fs, 100.0);
        assert_eq!(ratio, (4, 5));
        assert_eq!(y.len(), 1000);
        for (k, v) in y.iter().enumerate().skip(100).take(800) {
            let t = k as f64 / 100.0;
            assert!((v - (2.0 * PI * 5.0 * t).sin()).abs() < 2e-3, "k={k}");
        }
    }
}
