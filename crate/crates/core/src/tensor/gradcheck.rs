//! Central finite-difference gradient checking.

use rand::seq::index::sample;
use serde::Serialize;

use super::param::{ParamId, ParamStore};
use super::tape::{Mutation, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Coordinates checked per parameter; larger tensors are subsampled.
    pub max_coords: usize,
    pub seed: u64,
    pub mutation: Mutation,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            max_coords: 64,
            seed: 0,
            mutation: Mutation::None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub per_param: Vec<ParamCheck>,
    pub global_max_rel_error: f64,
    pub worst_param: Option<String>,
}

/// Denominator floor of [`relative_error`]. Central differences of an O(1)
/// loss carry roughly `1e-16 / eps` of rounding noise, so gradients that are
/// exactly zero (a key bias under softmax, for one) would otherwise report
/// noise as error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, REL_ERROR_FLOOR)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let mut tape = Tape::new(store);
    let loss = f(&mut tape)?;
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {v}")));
    }
    Ok(v)
}

/// Compares backward-pass gradients of `f` against central differences for
/// each parameter in `ids`. Parameters are restored bitwise afterwards.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    opts: &GradCheckOptions,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<'_>) -> Result<Var>,
{
    if !(opts.eps > 0.0 && opts.eps <= 1e-2) {
        return Err(Error::Config(format!("eps must lie in (0, 1e-2], got {}", opts.eps)));
    }
    let analytic = {
        let mut tape = Tape::new(store).with_mutation(opts.mutation);
        let loss = f(&mut tape)?;
        if !tape.scalar(loss).is_finite() {
            return Err(Error::NonFinite(format!("loss evaluated to {}", tape.scalar(loss))));
        }
        tape.backward(loss)?.grads
    };
    let mut rng = rng::rng(opts.seed, Stream::GradCheck);
    let mut report = GradCheckReport {
        per_param: Vec::new(),
        global_max_rel_error: 0.0,
        worst_param: None,
    };
    for &id in ids {
        let p = store.get(id);
        let name = p.name.clone();
        let n = p.numel();
        let grad = analytic.get(id).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        let mut worst = 0.0f64;
        for &c in &coords {
            let orig = store.get(id).data[c];
            store.data_mut(id)[c] = orig + opts.eps;
            let plus = eval(store, &f);
            store.data_mut(id)[c] = orig - opts.eps;
            let minus = eval(store, &f);
            store.data_mut(id)[c] = orig;
            let numeric = (plus? - minus?) / (2.0 * opts.eps);
            worst = worst.max(relative_error(grad[c], numeric));
        }
        if report.worst_param.is_none() || worst > report.global_max_rel_error {
            report.global_max_rel_error = worst;
            report.worst_param = Some(name.clone());
        }
        report.per_param.push(ParamCheck {
            name,
            coords_checked: coords.len(),
            max_rel_error: worst,
        });
    }
    Ok(report)
}
