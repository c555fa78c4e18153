use mcomm_core::gradcore::{GradError, Graph, Matrix, NodeId, Op};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

const STEP: f64 = 1e-5;
const INSTANCES: u64 = 100;

fn random(r: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| r.gen_range(lo..hi)).collect())
}

/// Entries bounded away from zero, either sign.
fn nonzero(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
    let m = random(r, rows, cols, 0.2, 1.5);
    let signs = random(r, rows, cols, -1.0, 1.0);
    m.zip_map(&signs, |v, s| if s < 0.0 { -v } else { v })
}

/// Reduces `y` to a scalar with a fixed random weighting so every output
/// entry contributes a distinct sensitivity.
fn weighted_sum(g: &mut Graph, y: NodeId, r: &mut ChaCha8Rng) -> NodeId {
    let (rows, cols) = g.value(y).shape();
    let w = g.constant(random(r, rows, cols, -1.0, 1.0));
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

/// Compares analytic gradients of every parameter in `g` against central
/// differences of the "loss" output.
fn check(g: &Graph, loss: NodeId, what: &str) {
    let grads = g.backward(loss).unwrap();
    let inputs: HashMap<String, Matrix> = g
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Input(name) => Some((name.clone(), n.value.clone())),
            _ => None,
        })
        .collect();
    let params: Vec<(String, Matrix)> = g
        .nodes()
        .iter()
        .filter_map(|n| match &n.op {
            Op::Param(name) => Some((name.clone(), n.value.clone())),
            _ => None,
        })
        .collect();
    for (name, value) in params {
        let analytic = grads.param(&name).unwrap();
        for k in 0..value.data().len() {
            let eval_at = |delta: f64| {
                let mut v = value.clone();
                v.data_mut()[k] += delta;
                let mut bound = inputs.clone();
                bound.insert(name.clone(), v);
                g.eval(&bound).unwrap()["loss"].get(0, 0)
            };
            let numeric = (eval_at(STEP) - eval_at(-STEP)) / (2.0 * STEP);
            let a = analytic.data()[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            assert!(rel < 1e-4, "{what}: d/d{name}[{k}] analytic {a} numeric {numeric}");
        }
    }
}

fn fd_case(what: &str, build: impl Fn(&mut Graph, &mut ChaCha8Rng) -> NodeId) {
    for seed in 0..INSTANCES {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new();
        let y = build(&mut g, &mut r);
        let loss = weighted_sum(&mut g, y, &mut r);
        g.mark_output("loss", loss);
        check(&g, loss, what);
    }
}

#[test]
fn matmul() {
    fd_case("matmul", |g, r| {
        let a = g.param("a", random(r, 3, 4, -1.0, 1.0));
        let b = g.param("b", random(r, 4, 2, -1.0, 1.0));
        g.matmul(a, b).unwrap()
    });
}

#[test]
fn add_sub_mul_div() {
    fd_case("add", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        let b = g.param("b", random(r, 2, 3, -1.0, 1.0));
        g.add(a, b).unwrap()
    });
    fd_case("sub", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        let b = g.param("b", random(r, 2, 3, -1.0, 1.0));
        g.sub(a, b).unwrap()
    });
    fd_case("mul", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        let b = g.param("b", random(r, 2, 3, -1.0, 1.0));
        g.mul(a, b).unwrap()
    });
    fd_case("div", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        let b = g.param("b", nonzero(r, 2, 3));
        g.div(a, b).unwrap()
    });
}

#[test]
fn add_row() {
    fd_case("add_row", |g, r| {
        let a = g.param("a", random(r, 4, 3, -1.0, 1.0));
        let b = g.param("b", random(r, 1, 3, -1.0, 1.0));
        g.add_row(a, b).unwrap()
    });
}

#[test]
fn elementwise_nonlinearities() {
    fd_case("tanh", |g, r| {
        let a = g.param("a", random(r, 3, 3, -2.0, 2.0));
        g.tanh(a).unwrap()
    });
    fd_case("sigmoid", |g, r| {
        let a = g.param("a", random(r, 3, 3, -3.0, 3.0));
        g.sigmoid(a).unwrap()
    });
    fd_case("log", |g, r| {
        let a = g.param("a", random(r, 3, 3, 0.2, 3.0));
        g.log(a).unwrap()
    });
    fd_case("abs", |g, r| {
        let a = g.param("a", nonzero(r, 3, 3));
        g.abs(a).unwrap()
    });
    fd_case("sqrt", |g, r| {
        let a = g.param("a", random(r, 3, 3, 0.2, 3.0));
        g.sqrt(a).unwrap()
    });
    fd_case("xlogx", |g, r| {
        let a = g.param("a", random(r, 3, 3, 0.05, 2.0));
        g.xlogx(a).unwrap()
    });
}

#[test]
fn softmax_and_log_softmax() {
    fd_case("softmax", |g, r| {
        let a = g.param("a", random(r, 3, 4, -3.0, 3.0));
        g.softmax(a).unwrap()
    });
    fd_case("log_softmax", |g, r| {
        let a = g.param("a", random(r, 3, 4, -3.0, 3.0));
        g.log_softmax(a).unwrap()
    });
}

#[test]
fn reductions() {
    fd_case("sum", |g, r| {
        let a = g.param("a", random(r, 3, 2, -1.0, 1.0));
        let s = g.sum(a).unwrap();
        g.tanh(s).unwrap()
    });
    fd_case("mean", |g, r| {
        let a = g.param("a", random(r, 3, 2, -1.0, 1.0));
        let s = g.mean(a).unwrap();
        g.tanh(s).unwrap()
    });
    fd_case("sum_rows", |g, r| {
        let a = g.param("a", random(r, 3, 4, -1.0, 1.0));
        g.sum_rows(a).unwrap()
    });
}

#[test]
fn structural_ops() {
    fd_case("concat_cols", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        let b = g.param("b", random(r, 2, 1, -1.0, 1.0));
        g.concat_cols(&[a, b, a]).unwrap()
    });
    fd_case("slice_cols", |g, r| {
        let a = g.param("a", random(r, 2, 5, -1.0, 1.0));
        g.slice_cols(a, 1, 4).unwrap()
    });
    fd_case("scale", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        g.scale(a, -1.7).unwrap()
    });
    fd_case("transpose", |g, r| {
        let a = g.param("a", random(r, 2, 3, -1.0, 1.0));
        g.transpose(a).unwrap()
    });
    fd_case("reshape", |g, r| {
        let a = g.param("a", random(r, 2, 6, -1.0, 1.0));
        g.reshape(a, 4, 3).unwrap()
    });
}

#[test]
fn block_ops() {
    fd_case("block_mix", |g, r| {
        let w = g.param("w", random(r, 6, 3, -1.0, 1.0));
        let v = g.param("v", random(r, 6, 2, -1.0, 1.0));
        g.block_mix(w, v, 3).unwrap()
    });
    fd_case("block_gram", |g, r| {
        let a = g.param("a", random(r, 4, 3, -1.0, 1.0));
        let b = g.param("b", random(r, 4, 3, -1.0, 1.0));
        g.block_gram(a, b, 2).unwrap()
    });
    fd_case("block_transpose", |g, r| {
        let a = g.param("a", random(r, 6, 3, -1.0, 1.0));
        g.block_transpose(a, 3).unwrap()
    });
}

#[test]
fn two_layer_network() {
    fd_case("mlp", |g, r| {
        let x = g.input("x", random(r, 5, 3, -1.0, 1.0));
        let w1 = g.param("w1", random(r, 3, 4, -1.0, 1.0));
        let b1 = g.param("b1", random(r, 1, 4, -0.5, 0.5));
        let w2 = g.param("w2", random(r, 4, 2, -1.0, 1.0));
        let b2 = g.param("b2", random(r, 1, 2, -0.5, 0.5));
        let h = g.matmul(x, w1).unwrap();
        let h = g.add_row(h, b1).unwrap();
        let h = g.tanh(h).unwrap();
        let o = g.matmul(h, w2).unwrap();
        let o = g.add_row(o, b2).unwrap();
        g.log_softmax(o).unwrap()
    });
}

#[test]
fn straight_through_routes_gradient_to_soft_branch() {
    let mut g = Graph::new();
    let a = g.param("a", Matrix::from_rows(&[vec![0.3, -0.2]]));
    let soft = g.sigmoid(a).unwrap();
    let st = g.straight_through(soft, Matrix::from_rows(&[vec![1.0, 0.0]])).unwrap();
    assert_eq!(*g.value(st), Matrix::from_rows(&[vec![1.0, 0.0]]));
    let s = g.sum(st).unwrap();
    let grads = g.backward(s).unwrap();
    let want: Vec<f64> = [0.3f64, -0.2].iter().map(|x| {
        let p = 1.0 / (1.0 + (-x).exp());
        p * (1.0 - p)
    }).collect();
    let got = grads.param("a").unwrap();
    for (a, b) in got.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn tanh_of_product_matches_scalar_recomputation() {
    let mut r = ChaCha8Rng::seed_from_u64(3);
    let w = random(&mut r, 3, 2, -0.5, 0.5);
    let x = random(&mut r, 2, 1, -1.0, 1.0);
    let mut g = Graph::new();
    let wn = g.input("w", w.clone());
    let xn = g.input("x", x.clone());
    let p = g.matmul(wn, xn).unwrap();
    let y = g.tanh(p).unwrap();
    g.mark_output("y", y);
    let out = g.eval(&[("w".to_string(), w.clone()), ("x".to_string(), x.clone())].into()).unwrap();
    for i in 0..3 {
        let mut s = 0.0;
        for k in 0..2 {
            s += w.get(i, k) * x.get(k, 0);
        }
        assert!((out["y"].get(i, 0) - s.tanh()).abs() < 1e-15);
    }
}

#[test]
fn overflow_is_reported() {
    let mut g = Graph::new();
    let a = g.param("a", Matrix::scalar(1e200));
    let b = g.param("b", Matrix::scalar(1e200));
    assert!(matches!(g.mul(a, b), Err(GradError::NonFinite { .. })));
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(data in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut g = Graph::new();
        let a = g.constant(Matrix::from_vec(3, 4, data));
        let s = g.softmax(a).unwrap();
        for i in 0..3 {
            let row = g.value(s).row(i);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
