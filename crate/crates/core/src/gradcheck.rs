//! Central finite differences for checking reverse-mode gradients.

use alloc::string::String;
use alloc::vec::Vec;

use crate::graph::{ParamId, ParamStore};
use crate::tensor::Matrix;

/// Numeric gradient of `f` with respect to every parameter, by central
/// differences with step `h`. Parameters are restored afterwards.
pub fn numeric_gradients(store: &mut ParamStore, h: f64, mut f: impl FnMut(&ParamStore) -> f64) -> Vec<Matrix> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let (rows, cols) = store.get(id).shape();
        let mut grad = Matrix::zeros(rows, cols);
        for k in 0..rows * cols {
            let orig = store.get(id).data[k];
            store.get_mut(id).data[k] = orig + h;
            let plus = f(store);
            store.get_mut(id).data[k] = orig - h;
            let minus = f(store);
            store.get_mut(id).data[k] = orig;
            grad.data[k] = (plus - minus) / (2.0 * h);
        }
        out.push(grad);
    }
    out
}

/// `|a - n| / max(|a|, |n|)` over a whole tensor; zero when both are below `floor`.
pub fn relative_error(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    let diff: f64 = analytic
        .data
        .iter()
        .zip(&numeric.data)
        .map(|(a, n)| (a - n) * (a - n))
        .sum();
    let scale = libm::sqrt(analytic.norm_sq()).max(libm::sqrt(numeric.norm_sq()));
    if scale < floor {
        0.0
    } else {
        libm::sqrt(diff) / scale
    }
}

/// Tensors whose gradient norm stays below this are treated as zero; central
/// differences at `h = 1e-6` carry round-off of roughly `1e-9`.
pub const NOISE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub rel_error: f64,
}

/// Compares analytic gradients (missing entries count as zero) against central differences.
pub fn check_gradients(
    store: &mut ParamStore,
    analytic: &[Option<Matrix>],
    h: f64,
    f: impl FnMut(&ParamStore) -> f64,
) -> Vec<TensorCheck> {
    let numeric = numeric_gradients(store, h, f);
    store
        .ids()
        .zip(numeric)
        .map(|(id, n)| {
            let a = analytic[id.0].clone().unwrap_or_else(|| Matrix::zeros(n.rows, n.cols));
            TensorCheck {
                name: store.name(id).into(),
                rel_error: relative_error(&a, &n, NOISE_FLOOR),
            }
        })
        .collect()
}
