use mslt::optim::{lamb_step, lr_at, rebuild_state, LambHyper};
use mslt::tensor::{Gradients, ParamId, ParamStore};
use proptest::prelude::*;

/// Constant learning rate `lr` from the first step on.
fn flat(lr: f64, weight_decay: f64, trust_ratio: bool) -> LambHyper {
    LambHyper {
        peak_lr: lr,
        weight_decay,
        warmup_steps: 1,
        total_steps: 1,
        trust_ratio,
        ..Default::default()
    }
}

fn set_grad(s: &mut ParamStore, id: ParamId, g: &[f64]) {
    s.zero_grads();
    let mut grads = Gradients::default();
    grads.add(id, g);
    s.accumulate(&grads).unwrap();
}

#[test]
fn single_lamb_step_matches_hand_computation() {
    let mut s = ParamStore::new();
    let w = s.add("w", vec![2], vec![3.0, 4.0], true).unwrap();
    set_grad(&mut s, w, &[1.0, 0.0]);
    let mut st = rebuild_state(&s);
    lamb_step(&mut s, &mut st, &flat(0.01, 0.01, true), 1).unwrap();
    // m_hat = g, v_hat = g^2, so the Adam direction is [1 / (1 + 1e-6), 0];
    // decay adds 0.01 w; the trust ratio is |w| / |u| = 5 / |u|.
    let u: [f64; 2] = [1.0 / (1.0 + 1e-6) + 0.03, 0.04];
    let ratio = 5.0 / (u[0] * u[0] + u[1] * u[1]).sqrt();
    let expect = [3.0 - 0.01 * ratio * u[0], 4.0 - 0.01 * ratio * u[1]];
    let got = &s.get(w).data;
    for i in 0..2 {
        assert!((got[i] - expect[i]).abs() < 1e-12, "{got:?} vs {expect:?}");
    }
    assert!((got[0] - 2.950_037_661_315_561_4).abs() < 1e-12);
    assert!((got[1] - 3.998_059_713_118_774_3).abs() < 1e-12);
}

#[test]
fn without_trust_ratio_and_decay_it_is_adam() {
    let mut s = ParamStore::new();
    let w = s.add("w", vec![2], vec![3.0, 4.0], true).unwrap();
    let mut st = rebuild_state(&s);
    let h = flat(0.01, 0.0, false);
    for (step, g) in [(1, [1.0, -2.0]), (2, [0.5, 0.5])] {
        set_grad(&mut s, w, &g);
        lamb_step(&mut s, &mut st, &h, step).unwrap();
    }
    let got = &s.get(w).data;
    assert!((got[0] - 2.980_678_225_404_874_5).abs() < 1e-12, "{got:?}");
    assert!((got[1] - 4.014_694_673_490_847_5).abs() < 1e-12, "{got:?}");
}

#[test]
fn no_decay_parameters_skip_weight_decay() {
    let mut s = ParamStore::new();
    let b = s.add("b", vec![2], vec![3.0, 4.0], false).unwrap();
    set_grad(&mut s, b, &[0.0, 0.0]);
    let mut st = rebuild_state(&s);
    lamb_step(&mut s, &mut st, &flat(0.1, 0.5, true), 1).unwrap();
    assert_eq!(s.get(b).data, vec![3.0, 4.0]);
}

#[test]
fn zero_norm_weight_uses_unit_ratio() {
    let mut s = ParamStore::new();
    let w = s.add("w", vec![1], vec![0.0], true).unwrap();
    set_grad(&mut s, w, &[2.0]);
    let mut st = rebuild_state(&s);
    lamb_step(&mut s, &mut st, &flat(0.1, 0.0, true), 1).unwrap();
    assert!((s.get(w).data[0] + 0.1 * 2.0 / (2.0 + 1e-6)).abs() < 1e-15);
}

proptest! {
    #[test]
    fn schedule_is_piecewise_linear(warmup in 0u64..500, extra in 1u64..5000, step in 0u64..6000) {
        let h = LambHyper { peak_lr: 1e-3, warmup_steps: warmup, total_steps: warmup + extra, ..Default::default() };
        let lr = lr_at(step, &h);
        prop_assert!((0.0..=1e-3).contains(&lr));
        if step < warmup {
            prop_assert!((lr - 1e-3 * step as f64 / warmup as f64).abs() < 1e-18);
        } else if step <= warmup + extra {
            let frac = (warmup + extra - step) as f64 / extra as f64;
            prop_assert!((lr - 1e-3 * frac).abs() < 1e-18);
        } else {
            prop_assert_eq!(lr, 0.0);
        }
    }
}
