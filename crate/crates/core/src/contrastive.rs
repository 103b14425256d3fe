//! Projection head and the NT-Xent loss over two views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub hidden: usize,
    pub out: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { hidden: 1024, out: 512 }
    }
}

#[derive(Clone, Debug)]
pub struct ProjectionHead {
    fc1: Linear,
    fc2: Linear,
}

impl ProjectionHead {
    pub fn new(store: &mut ParamStore, prefix: &str, in_dim: usize, cfg: &ProjectionConfig, rng: &mut impl Rng) -> Self {
        Self {
            fc1: Linear::new(store, &format!("{prefix}.fc1"), in_dim, cfg.hidden, true, rng),
            fc2: Linear::new(store, &format!("{prefix}.fc2"), cfg.hidden, cfg.out, true, rng),
        }
    }

    /// `[N, in_dim]` to unit-norm `[N, out]`.
    pub fn forward(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let x = self.fc1.forward(g, h);
        let x = g.elu(x);
        let x = self.fc2.forward(g, x);
        let d = *g.shape(x).last().unwrap();
        if g.value(x).data().chunks(d).any(|r| r.iter().all(|&v| v == 0.0)) || !g.value(x).all_finite() {
            return Err(Error::Numerical {
                layer: "projection".into(),
            });
        }
        Ok(g.l2_normalize_last(x))
    }
}

/// Logit placed on the diagonal so a sample never counts as its own negative.
const SELF_LOGIT: f64 = -1e30;

/// NT-Xent over paired views `c1, c2: [N, P]` (expected unit-norm, so the
/// dot product is the cosine similarity). Views are interleaved so sample
/// `k` occupies rows `2k` and `2k + 1`; each row's positive is its partner.
pub fn nt_xent(g: &mut Graph, c1: Var, c2: Var, tau: f64) -> Result<Var> {
    let shape = g.shape(c1).to_vec();
    if shape.len() != 2 || g.shape(c2) != shape.as_slice() {
        return Err(Error::Shape(format!("views {:?} and {:?}", shape, g.shape(c2))));
    }
    let (n, p) = (shape[0], shape[1]);
    if n < 2 {
        return Err(Error::Config(format!("NT-Xent needs a batch of at least 2, got {n}")));
    }
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature {tau} must be positive")));
    }
    let a = g.reshape(c1, &[n, 1, p]);
    let b = g.reshape(c2, &[n, 1, p]);
    let c = g.concat(&[a, b], 1);
    let c = g.reshape(c, &[1, 2 * n, p]);
    let sim = g.bmm(c, c, false, true);
    let sim = g.reshape(sim, &[2 * n, 2 * n]);
    let logits = g.scale(sim, 1.0 / tau);
    let diag = Tensor::from_fn(&[2 * n, 2 * n], |i| if i / (2 * n) == i % (2 * n) { SELF_LOGIT } else { 0.0 });
    let logits = g.add_const(logits, &diag);
    let targets: Vec<usize> = (0..2 * n).map(|i| i ^ 1).collect();
    Ok(g.cross_entropy(logits, &targets, None))
}

/// Loss value for plain tensors.
pub fn nt_xent_value(c1: &Tensor, c2: &Tensor, tau: f64) -> Result<f64> {
    let mut g = Graph::new();
    let a = g.input(c1.clone());
    let b = g.input(c2.clone());
    let l = nt_xent(&mut g, a, b, tau)?;
    Ok(g.value(l).item())
}
