//! Central finite-difference gradient checking.

use std::collections::HashMap;

use rand::seq::index::sample;
use rand::Rng;

use crate::nn::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;

/// Denominator floor so gradients that are numerically zero compare as equal.
pub const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Parameter name (or input label) and flat index of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

impl GradCheckReport {
    fn record(&mut self, label: &str, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        self.checked += 1;
        if err >= self.max_rel_err {
            self.max_rel_err = err;
            self.worst = Some((label.to_string(), index, analytic, numeric));
        }
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.or(self.worst.take());
        }
    }
}

/// Compares analytic parameter gradients against central differences.
///
/// `loss` evaluates the scalar objective for the current store contents;
/// `analytic` holds the gradients produced by the tape at the unperturbed
/// point. Up to `per_param` entries of each listed parameter are sampled.
pub fn check_params(
    store: &mut ParamStore,
    ids: &[ParamId],
    analytic: &HashMap<ParamId, Tensor>,
    per_param: usize,
    rng: &mut impl Rng,
    mut loss: impl FnMut(&ParamStore) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).len();
        let zero = Tensor::zeros(store.get(id).shape());
        let grad = analytic.get(&id).unwrap_or(&zero);
        let picks = sample(rng, n, per_param.min(n));
        for i in picks {
            let orig = store.get(id).data()[i];
            let h = DEFAULT_STEP * orig.abs().max(1.0);
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = loss(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = loss(store);
            store.get_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            let name = store.name(id).to_string();
            report.record(&name, i, grad.data()[i], numeric);
        }
    }
    report
}

/// Gradient check with respect to a free-standing input tensor.
pub fn check_input(
    label: &str,
    x: &Tensor,
    analytic: &Tensor,
    mut loss: impl FnMut(&Tensor) -> f64,
) -> GradCheckReport {
    let mut report = GradCheckReport::default();
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = x.data()[i];
        let h = DEFAULT_STEP * orig.abs().max(1.0);
        xp.data_mut()[i] = orig + h;
        let up = loss(&xp);
        xp.data_mut()[i] = orig - h;
        let down = loss(&xp);
        xp.data_mut()[i] = orig;
        report.record(label, i, analytic.data()[i], (up - down) / (2.0 * h));
    }
    report
}
