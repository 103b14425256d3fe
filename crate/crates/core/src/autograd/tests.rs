use super::*;
use crate::gradcheck::check_input;
use crate::rng;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, &[shape.len() as u64]);
    Tensor::from_fn(shape, |_| rng::normal(&mut r))
}

fn project(g: &mut Graph, y: Var) -> Var {
    let w = Tensor::from_fn(g.shape(y), |i| ((i * 7919) % 23) as f64 / 23.0 - 0.4);
    let w = g.input(w);
    let p = g.mul(y, w);
    g.sum_all(p)
}

fn eval(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = f(&mut g, &vars);
    let l = project(&mut g, y);
    g.value(l).item()
}

/// Finite-difference check of every input of `f` under a fixed random
/// projection of its output.
fn check(inputs: Vec<Tensor>, f: impl Fn(&mut Graph, &[Var]) -> Var) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let y = f(&mut g, &vars);
    let l = project(&mut g, y);
    let grads = g.backward(l);
    for (k, x) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(x.shape());
        let analytic = grads.get(vars[k]).unwrap_or(&zero);
        let report = check_input("x", x, analytic, |xp| {
            let mut xs = inputs.clone();
            xs[k] = xp.clone();
            eval(&xs, &f)
        });
        assert!(
            report.max_rel_err < 1e-4,
            "input {k}: rel err {} at {:?}",
            report.max_rel_err,
            report.worst
        );
    }
}

#[test]
fn elementwise() {
    check(vec![randn(&[3, 4], 1), randn(&[3, 4], 2)], |g, v| {
        let a = g.add(v[0], v[1]);
        let b = g.sub(a, v[1]);
        let c = g.mul(b, v[1]);
        let d = g.scale(c, 1.7);
        g.neg(d)
    });
}

#[test]
fn broadcasts() {
    check(vec![randn(&[2, 3, 4], 3), randn(&[4], 4), randn(&[3, 4], 5)], |g, v| {
        let a = g.add_broadcast(v[0], v[1]);
        let b = g.mul_broadcast(a, v[2]);
        let c = g.add_const(b, &Tensor::full(&[4], 0.5));
        let e = g.expand_leading(v[2], 2);
        g.mul(c, e)
    });
}

#[test]
fn activations() {
    for act in [
        Activation::Elu,
        Activation::Gelu,
        Activation::Silu,
        Activation::Softplus,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Exp,
        Activation::Square,
    ] {
        check(vec![randn(&[5, 3], 6)], move |g, v| g.activation(v[0], act));
    }
}

#[test]
fn reductions() {
    check(vec![randn(&[2, 3, 5], 7)], |g, v| {
        let m = g.mean_last(v[0]);
        let s = g.mean_all(v[0]);
        let s = g.expand_leading(s, 3);
        let s = g.expand_leading(s, 2);
        let s = g.reshape(s, &[2, 3]);
        g.mul(m, s)
    });
}

#[test]
fn matmul_and_bmm() {
    check(vec![randn(&[2, 3, 4], 8), randn(&[4, 5], 9)], |g, v| g.matmul(v[0], v[1]));
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let a = if ta { randn(&[2, 4, 3], 10) } else { randn(&[2, 3, 4], 10) };
        let b = if tb { randn(&[2, 5, 4], 11) } else { randn(&[2, 4, 5], 11) };
        check(vec![a, b], move |g, v| g.bmm(v[0], v[1], ta, tb));
    }
}

#[test]
fn shape_ops() {
    check(vec![randn(&[2, 3, 4], 12), randn(&[2, 2, 4], 13)], |g, v| {
        let p = g.permute(v[0], &[2, 0, 1]);
        let p = g.permute(p, &[1, 2, 0]);
        let c = g.concat(&[p, v[1]], 1);
        let n = g.narrow(c, 1, 1, 3);
        let n = g.narrow(n, 2, 1, 2);
        g.reshape(n, &[12])
    });
    check(vec![randn(&[2, 3, 4], 14)], |g, v| g.gather_rows(v[0], &[2, 0, 2, 1, 1, 1, 0, 2], 4));
}

#[test]
fn detach_blocks_gradient() {
    let mut g = Graph::new();
    let x = g.leaf(randn(&[3], 15), true);
    let d = g.detach(x);
    let y = g.mul(x, d);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    let gx = grads.get(x).unwrap();
    assert_eq!(gx.data(), g.value(x).data());
}

#[test]
fn softmax_family() {
    check(vec![randn(&[3, 5], 16)], |g, v| g.softmax_last(v[0]));
    check(vec![randn(&[3, 5], 17)], |g, v| g.log_softmax_last(v[0]));
    check(vec![randn(&[3, 5], 18)], |g, v| g.l2_normalize_last(v[0]));
    check(vec![randn(&[4, 5], 19)], |g, v| {
        let l = g.cross_entropy(v[0], &[0, 4, 2, 2], None);
        let w = g.cross_entropy(v[0], &[1, 3, 2, 0], Some(&[0.5, 1.0, 2.0, 1.5, 1.0]));
        g.add(l, w)
    });
}

#[test]
fn layer_norm() {
    check(vec![randn(&[2, 3, 6], 20), randn(&[6], 21), randn(&[6], 22)], |g, v| {
        g.layer_norm(v[0], v[1], v[2], 1e-5)
    });
}

#[test]
fn conv_and_pool() {
    check(vec![randn(&[2, 2, 11], 23), randn(&[3, 2, 5], 24), randn(&[3], 25)], |g, v| {
        g.conv1d(v[0], v[1], Some(v[2]), 2, 2)
    });
    check(vec![randn(&[2, 3, 7], 26), randn(&[3, 3, 3], 27)], |g, v| g.conv1d(v[0], v[1], None, 1, 1));
    check(vec![randn(&[2, 3, 9], 28)], |g, v| g.max_pool1d(v[0], 2));
}

#[test]
fn batch_norm() {
    check(vec![randn(&[3, 2, 5], 29), randn(&[2], 30), randn(&[2], 31)], |g, v| {
        g.batch_norm_train(v[0], v[1], v[2], 1e-5).0
    });
    check(vec![randn(&[3, 2, 5], 32), randn(&[2], 33), randn(&[2], 34)], |g, v| {
        g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[1.5, 0.7], 1e-5)
    });
}

#[test]
fn selective_scan_gradients() {
    let (b, l, d, n) = (2, 5, 3, 4);
    let delta = randn(&[b, l, d], 36).map(|v| 0.1 + 0.3 * v.abs());
    let a = randn(&[d, n], 37).map(|v| -(0.2 + v.abs()));
    check(
        vec![
            randn(&[b, l, d], 35),
            delta,
            a,
            randn(&[b, l, n], 38),
            randn(&[b, l, n], 39),
            randn(&[d], 40),
        ],
        |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap(),
    );
}

#[test]
fn causal_conv_gradients() {
    check(vec![randn(&[2, 6, 3], 41), randn(&[3, 4], 42), randn(&[3], 43)], |g, v| {
        g.causal_depthwise_conv(v[0], v[1], v[2])
    });
}

#[test]
fn shared_leaf_accumulates() {
    let mut g = Graph::new();
    let x = g.leaf(Tensor::new(&[2], vec![1.0, 2.0]), true);
    let y = g.mul(x, x);
    let y = g.add(y, x);
    let s = g.sum_all(y);
    let grads = g.backward(s);
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 5.0]);
}
