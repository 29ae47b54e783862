//! Central finite-difference gradient verification (f64).

use crate::autodiff::{Tape, Var};
use crate::error::{Result, SitError};
use crate::params::{ParamId, ParamStore};

/// Largest disagreement between analytic and central-difference gradients,
/// `max |g_a − g_n| / max(1, |g_a|, |g_n|)` over every coordinate of every
/// parameter in `store`.
pub fn grad_check<F>(store: &ParamStore<f64>, f: F, eps: f64) -> Result<f64>
where
    F: for<'p> Fn(&'p ParamStore<f64>, &mut Tape<'p, f64>) -> Result<Var>,
{
    grad_check_coords(store, f, eps, None)
}

/// Like [`grad_check`] but probes at most `max_per_param` evenly spaced
/// coordinates of each parameter.
pub fn grad_check_coords<F>(
    store: &ParamStore<f64>,
    f: F,
    eps: f64,
    max_per_param: Option<usize>,
) -> Result<f64>
where
    F: for<'p> Fn(&'p ParamStore<f64>, &mut Tape<'p, f64>) -> Result<Var>,
{
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new();
        let loss = f(store, &mut tape)?;
        let grads = tape.backward(loss)?;
        store
            .iter()
            .map(|(id, p)| {
                grads
                    .param(id)
                    .map_or_else(|| vec![0.0; p.tensor.numel()], <[f64]>::to_vec)
            })
            .collect()
    };

    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::frozen();
        let loss = f(s, &mut tape)?;
        let v = tape.value(loss).data()[0];
        if !v.is_finite() {
            return Err(SitError::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut probe = store.clone();
    let mut worst = 0.0f64;
    for (pi, ga) in analytic.iter().enumerate() {
        let id = ParamId(pi);
        let n = ga.len();
        let stride = match max_per_param {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for k in (0..n).step_by(stride) {
            let orig = probe.get(id).data()[k];
            probe.get_mut(id).data_mut()[k] = orig + eps;
            let up = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig - eps;
            let down = eval(&probe)?;
            probe.get_mut(id).data_mut()[k] = orig;
            let gn = (up - down) / (2.0 * eps);
            let a = ga[k];
            if !a.is_finite() {
                return Err(SitError::NonFinite(format!(
                    "gradient of {}",
                    store.param(id).name
                )));
            }
            let rel = (a - gn).abs() / 1f64.max(a.abs()).max(gn.abs());
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}
