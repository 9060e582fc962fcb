//! Central finite-difference gradient oracle.
//!
//! Independent of the tape: it only evaluates the scalar function at
//! perturbed parameter values.

use super::{ParamId, ParamStore};

pub const DEFAULT_STEP: f64 = 1e-5;

/// `(f(p + h·e_i) − f(p − h·e_i)) / 2h` for every entry of every listed
/// parameter. `f` must evaluate the loss from the store's current values.
pub fn numeric_gradients(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Vec<Vec<f64>> {
    ids.iter()
        .map(|&id| {
            let n = store.value(id).len();
            (0..n)
                .map(|i| {
                    let orig = store.value(id).data()[i];
                    store.value_mut(id).data_mut()[i] = orig + h;
                    let plus = f(store);
                    store.value_mut(id).data_mut()[i] = orig - h;
                    let minus = f(store);
                    store.value_mut(id).data_mut()[i] = orig;
                    (plus - minus) / (2.0 * h)
                })
                .collect()
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

/// Largest per-parameter relative error between the store's accumulated
/// gradients and the central-difference estimate.
pub fn max_relative_error(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    f: impl FnMut(&ParamStore) -> f64,
) -> f64 {
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| store.grad(id).data().to_vec()).collect();
    let numeric = numeric_gradients(store, ids, h, f);
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .fold(0.0, f64::max)
}
