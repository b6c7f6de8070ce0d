//! Central finite-difference gradient checking.
//!
//! The numeric route here is deliberately independent of the reverse-mode
//! sweep: it only re-evaluates the loss closure under elementwise parameter
//! perturbations.

use super::params::{ParamKey, ParamStore};
use super::tensor::Tensor;

/// Central-difference gradient of `loss` w.r.t. every element of every entry
/// in `store`. The closure must rebuild its graph from the store each call.
pub fn central_diff(
    store: &mut ParamStore,
    mut loss: impl FnMut(&ParamStore) -> f64,
    eps: f64,
) -> Vec<(ParamKey, Tensor)> {
    let keys: Vec<ParamKey> = store.keys().collect();
    let mut out = Vec::with_capacity(keys.len());
    for key in keys {
        let n = store.tensor(key).numel();
        let mut grad = vec![0.0; n];
        for i in 0..n {
            let orig = store.tensor(key).data()[i];
            store.tensor_mut(key).data_mut()[i] = orig + eps;
            let hi = loss(store);
            store.tensor_mut(key).data_mut()[i] = orig - eps;
            let lo = loss(store);
            store.tensor_mut(key).data_mut()[i] = orig;
            grad[i] = (hi - lo) / (2.0 * eps);
        }
        let shape = store.tensor(key).shape().to_vec();
        out.push((key, Tensor::new(shape, grad)));
    }
    out
}

/// max over elements of |a − n| / max(1, |a|, |n|).
pub fn max_rel_err(analytic: &[(ParamKey, Tensor)], numeric: &[(ParamKey, Tensor)]) -> f64 {
    let mut worst = 0.0f64;
    for ((ka, ta), (kn, tn)) in analytic.iter().zip(numeric) {
        assert_eq!(ka, kn, "gradient lists must align");
        for (&a, &n) in ta.data().iter().zip(tn.data()) {
            let denom = 1.0f64.max(a.abs()).max(n.abs());
            worst = worst.max((a - n).abs() / denom);
        }
    }
    worst
}
