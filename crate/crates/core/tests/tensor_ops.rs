mod common;

use common::{check, check_op, uniform, weighted_sum, OPS};
use mslt::rng::labeled_rng;
use mslt::tensor::{ParamStore, Tape};
use proptest::prelude::*;
use rand::Rng as _;

#[test]
fn matmul_gradient() {
    let r = check(
        &[("a", vec![3, 4], uniform("a", 12)), ("b", vec![4, 2], uniform("b", 8))],
        |t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        },
    );
    assert!(r.global_max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn batched_transposed_matmul_gradient() {
    let r = check(
        &[("a", vec![2, 3, 4], uniform("a", 24)), ("b", vec![2, 5, 4], uniform("b", 40))],
        |t, v| {
            let y = t.matmul_ext(v[0], v[1], true)?;
            weighted_sum(t, y)
        },
    );
    assert!(r.global_max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn softmax_gradient() {
    let r = check(&[("x", vec![5], uniform("x", 5))], |t, v| {
        let y = t.softmax(v[0], 0)?;
        weighted_sum(t, y)
    });
    assert!(r.global_max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn layer_norm_gradient_of_all_inputs() {
    let r = check(
        &[
            ("x", vec![2, 8], uniform("x", 16)),
            ("gamma", vec![8], uniform("g", 8)),
            ("beta", vec![8], uniform("b", 8)),
        ],
        |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-12)?;
            weighted_sum(t, y)
        },
    );
    assert!(r.global_max_rel_error < 1e-5, "{r:?}");
    assert_eq!(r.per_param.len(), 3);
}

#[test]
fn gelu_gradient() {
    let r = check(&[("x", vec![9], uniform("x", 9))], |t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y)
    });
    assert!(r.global_max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn gelu_asymptote() {
    let s = ParamStore::new();
    let mut t = Tape::new(&s);
    let x = t.constant(vec![0.0, 100.0], vec![2]).unwrap();
    let y = t.gelu(x);
    assert_eq!(t.value(y)[0], 0.0);
    assert!((t.value(y)[1] - 100.0).abs() < 1e-9);
}

/// Log-sum-exp written out directly, without the tape.
fn cross_entropy_oracle(logits: &[f64], v: usize, targets: &[i64]) -> f64 {
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits[r * v..(r + 1) * v];
        let m = row.iter().cloned().fold(f64::MIN, f64::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
        total += lse - row[t as usize];
    }
    total / targets.len() as f64
}

#[test]
fn cross_entropy_matches_direct_formula() {
    let logits = uniform("logits", 15).iter().map(|x| 3.0 * x).collect::<Vec<_>>();
    let targets = [4i64, 0, 2];
    let s = ParamStore::new();
    let mut t = Tape::new(&s);
    let l = t.constant(logits.clone(), vec![3, 5]).unwrap();
    let loss = t.cross_entropy(l, &targets, -1).unwrap();
    assert!((t.scalar(loss) - cross_entropy_oracle(&logits, 5, &targets)).abs() < 1e-10);
}

#[test]
fn cross_entropy_gradient_with_ignored_rows() {
    let r = check(&[("l", vec![4, 5], uniform("l", 20))], |t, v| t.cross_entropy(v[0], &[1, -1, 3, 0], -1));
    assert!(r.global_max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn composite_ops_gradient() {
    // gather, permute, reshape, key_mask, tanh, scale and add_bias in one graph
    let r = check(
        &[
            ("table", vec![6, 4], uniform("table", 24)),
            ("bias", vec![4], uniform("bias", 4)),
        ],
        |t, v| {
            let x = t.gather_rows(v[0], &[5, 0, 3, 3, 1, 2, 0, 4])?;
            let x = t.add_bias(x, v[1])?;
            let x = t.tanh(x);
            let x = t.reshape(x, vec![1, 2, 4, 4])?;
            let x = t.permute(x, &[0, 1, 3, 2])?;
            let x = t.scale(x, 1.7);
            let x = t.key_mask(x, &[1, 1, 0, 1])?;
            let x = t.softmax(x, 3)?;
            weighted_sum(t, x)
        },
    );
    assert!(r.global_max_rel_error < 1e-6, "{r:?}");
}

#[test]
fn squared_scalar_has_gradient_six() {
    let mut s = ParamStore::new();
    let w = s.add("w", vec![1], vec![3.0], true).unwrap();
    let mut t = Tape::new(&s);
    let p = t.param(w);
    let sq = t.mul(p, p).unwrap();
    let g = t.backward(sq).unwrap().grads;
    assert_eq!(g.get(w).unwrap(), &[6.0]);
}

#[test]
fn repeated_backward_accumulates() {
    let mut s = ParamStore::new();
    let w = s.add("w", vec![1], vec![3.0], true).unwrap();
    for expected in [6.0, 12.0] {
        let grads = {
            let mut t = Tape::new(&s);
            let p = t.param(w);
            let sq = t.mul(p, p).unwrap();
            t.backward(sq).unwrap().grads
        };
        s.accumulate(&grads).unwrap();
        assert_eq!(s.get(w).grad().unwrap(), &[expected]);
    }
}

#[test]
fn frozen_parameters_never_get_grad_buffers() {
    let mut s = ParamStore::new();
    let a = s.add("a", vec![2], vec![1.0, 2.0], true).unwrap();
    let f = s.add("f", vec![2], vec![0.5, -0.5], true).unwrap();
    s.set_trainable(f, false);
    let grads = {
        let mut t = Tape::new(&s);
        let (pa, pf) = (t.param(a), t.param(f));
        let y = t.mul(pa, pf).unwrap();
        let y = t.sum(y);
        t.backward(y).unwrap().grads
    };
    assert!(grads.get(f).is_none());
    s.accumulate(&grads).unwrap();
    assert!(s.get(f).grad().is_none());
    assert_eq!(s.allocated_grads(), 1);
}

fn finite_vec(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-50.0f64..50.0, 1..max_len)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn softmax_rows_sum_to_one(x in finite_vec(40), scale in 0.01f64..30.0) {
        let n = x.len();
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let c = t.constant(x.iter().map(|v| v * scale).collect(), vec![n]).unwrap();
        let y = t.softmax(c, 0).unwrap();
        let total: f64 = t.value(y).iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(t.value(y).iter().all(|&p| p >= 0.0));
    }

    #[test]
    fn softmax_columns_sum_to_one(rows in 1usize..6, cols in 1usize..6, seed in 0u64..1000) {
        let mut r = labeled_rng(seed, "cols");
        let x: Vec<f64> = (0..rows * cols).map(|_| r.random_range(-80.0..80.0)).collect();
        let s = ParamStore::new();
        let mut t = Tape::new(&s);
        let c = t.constant(x, vec![rows, cols]).unwrap();
        let y = t.softmax(c, 0).unwrap();
        for j in 0..cols {
            let total: f64 = (0..rows).map(|i| t.value(y)[i * cols + j]).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn every_op_matches_finite_differences(op in 0usize..13, seed in 0u64..10_000, n in 3usize..7) {
        let rep = check_op(op, seed, n);
        prop_assert!(rep.global_max_rel_error < 1e-5, "{}: {:?}", OPS[op], rep);
    }
}
