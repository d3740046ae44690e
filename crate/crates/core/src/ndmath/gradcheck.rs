//! Central-difference verification of reverse-mode gradients.

use super::params::ParameterStore;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of [`grad_check`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter and flat index holding the worst error.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst element.
    pub worst_pair: (f64, f64),
    pub checked: usize,
}

/// Compares the tape gradient of `loss_fn` against
/// `(f(θ+eps) − f(θ−eps)) / (2·eps)` for every trainable scalar in `store`.
///
/// Relative error is `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
/// Parameters with `trainable == false` are skipped. Gradient buffers are
/// left zeroed and parameter values are restored bit-exactly.
pub fn grad_check<F>(store: &mut ParameterStore, eps: f64, loss_fn: F) -> Result<GradCheckReport>
where
    F: Fn(&ParameterStore) -> Result<(Tape, Var)>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("eps {eps} outside [1e-7, 1e-3]")));
    }
    store.zero_grad();
    let (tape, loss) = loss_fn(store)?;
    let base = tape.real(loss)?.data()[0];
    if !base.is_finite() {
        return Err(Error::Numeric {
            name: "loss".into(),
            detail: format!("non-finite loss {base} at the base point"),
        });
    }
    let grads = tape.backward(loss)?;
    tape.accumulate_into(&grads, store)?;
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.data().to_vec()).collect();
    store.zero_grad();

    let eval = |s: &ParameterStore| -> Result<f64> {
        let (t, l) = loss_fn(s)?;
        Ok(t.real(l)?.data()[0])
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_pair: (0.0, 0.0),
        checked: 0,
    };
    for pi in 0..store.len() {
        let id = super::params::ParamId(pi);
        if !store.get(id).trainable {
            continue;
        }
        for i in 0..store.get(id).value.len() {
            let orig = store.get(id).value.data()[i];
            store.get_mut(id).value.data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numeric {
                    name: store.get(id).name.clone(),
                    detail: format!("non-finite loss while perturbing element {i}"),
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[pi][i];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((store.get(id).name.clone(), i));
                report.worst_pair = (a, numeric);
            }
        }
    }
    Ok(report)
}
