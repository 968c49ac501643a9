//! Finite-difference helpers shared by the op tests and the acceptance suite.

use mslt::rng::labeled_rng;
use mslt::tensor::{finite_diff_check, GradCheckOptions, GradCheckReport, ParamId, ParamStore, Tape, Var};
use mslt::Result;
use rand::Rng as _;

pub type Inputs<'a> = [(&'a str, Vec<usize>, Vec<f64>)];

#[allow(dead_code)]
pub fn uniform(label: &str, n: usize) -> Vec<f64> {
    let mut r = labeled_rng(7, label);
    (0..n).map(|_| r.random_range(-1.5..1.5)).collect()
}

fn store(inputs: &Inputs<'_>) -> (ParamStore, Vec<ParamId>) {
    let mut s = ParamStore::new();
    let ids = inputs
        .iter()
        .map(|(n, sh, d)| s.add(*n, sh.clone(), d.clone(), true).unwrap())
        .collect();
    (s, ids)
}

/// Reduces `y` to a scalar with fixed irregular weights, so every output
/// coordinate reaches the loss with a distinct sensitivity.
pub fn weighted_sum(t: &mut Tape<'_>, y: Var) -> Result<Var> {
    let n = t.value(y).len();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + ((i * 7919) % 13) as f64 / 7.0).collect();
    let w = t.constant(w, t.shape(y).to_vec())?;
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

pub fn check(inputs: &Inputs<'_>, f: impl Fn(&mut Tape<'_>, &[Var]) -> Result<Var>) -> GradCheckReport {
    let (mut s, ids) = store(inputs);
    let ids2 = ids.clone();
    finite_diff_check(&mut s, &ids, &GradCheckOptions::default(), move |t| {
        let vars: Vec<Var> = ids2.iter().map(|&id| t.param(id)).collect();
        f(t, &vars)
    })
    .unwrap()
}

pub const OPS: [&str; 13] = [
    "matmul", "matmul_t", "add", "mul", "add_bias", "scale", "softmax", "layer_norm", "gelu", "tanh", "gather_rows",
    "permute", "cross_entropy",
];

/// Finite-difference check of op `OPS[op]` on `[3, n]` inputs drawn from `seed`.
pub fn check_op(op: usize, seed: u64, n: usize) -> GradCheckReport {
    let mut r = labeled_rng(seed, "ops");
    let mut draw = |k: usize| -> Vec<f64> { (0..k).map(|_| r.random_range(-1.0..1.0)).collect() };
    let inputs = [
        ("x", vec![3, n], draw(3 * n)),
        ("w", vec![n, n], draw(n * n)),
        ("v", vec![n], draw(n)),
        ("u", vec![3, n], draw(3 * n)),
    ];
    check(&inputs, |t, v| {
        let y = match op {
            0 => t.matmul(v[0], v[1])?,
            1 => t.matmul_ext(v[0], v[1], true)?,
            2 => t.add(v[0], v[3])?,
            3 => t.mul(v[0], v[3])?,
            4 => t.add_bias(v[0], v[2])?,
            5 => t.scale(v[0], -2.5),
            6 => t.softmax(v[0], 1)?,
            7 => t.layer_norm(v[0], v[2], v[2], 1e-12)?,
            8 => t.gelu(v[0]),
            9 => t.tanh(v[0]),
            10 => t.gather_rows(v[1], &[n - 1, 0, 1, n - 1])?,
            11 => t.permute(v[0], &[1, 0])?,
            _ => return t.cross_entropy(v[0], &[0, (n - 1) as i64, 2], -1),
        };
        weighted_sum(t, y)
    })
}
