//! Parameter storage and the Adam optimizer.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::Tensor;

static STORE_IDS: AtomicU64 = AtomicU64::new(1);

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamKey(pub(crate) usize);

struct Entry {
    name: String,
    value: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Named collection of trainable tensors with per-entry Adam moments and a
/// shared step counter. Each store gets a process-unique id so graphs can
/// tell stores apart when binding leaves.
pub struct ParamStore {
    id: u64,
    entries: Vec<Entry>,
    by_name: HashMap<String, usize>,
    step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore {
            id: STORE_IDS.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
            by_name: HashMap::new(),
            step: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Adam step counter (number of update calls so far).
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.step = steps;
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamKey {
        assert!(
            !self.by_name.contains_key(name),
            "duplicate parameter name {name}"
        );
        let m = Tensor::zeros(value.shape());
        let v = Tensor::zeros(value.shape());
        self.entries.push(Entry {
            name: name.to_string(),
            value,
            m,
            v,
        });
        let key = ParamKey(self.entries.len() - 1);
        self.by_name.insert(name.to_string(), key.0);
        key
    }

    pub fn key(&self, name: &str) -> Option<ParamKey> {
        self.by_name.get(name).map(|&i| ParamKey(i))
    }

    pub fn tensor(&self, key: ParamKey) -> &Tensor {
        &self.entries[key.0].value
    }

    pub fn tensor_mut(&mut self, key: ParamKey) -> &mut Tensor {
        &mut self.entries[key.0].value
    }

    pub fn name(&self, key: ParamKey) -> &str {
        &self.entries[key.0].name
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|e| (e.name.as_str(), &e.value))
    }

    pub fn keys(&self) -> impl Iterator<Item = ParamKey> {
        (0..self.entries.len()).map(ParamKey)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Deterministic fingerprint of all parameter values (order-sensitive).
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for e in &self.entries {
            for &x in e.value.data() {
                for b in x.to_le_bytes() {
                    h ^= b as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Clip gradients to a global norm, then apply one bias-corrected Adam
    /// step to every entry. Returns the pre-clip global norm.
    pub fn adam_update(
        &mut self,
        grads: &mut [(ParamKey, Tensor)],
        hyper: &AdamHyper,
        max_norm: f64,
    ) -> f64 {
        let mut tensors: Vec<&mut Tensor> = grads.iter_mut().map(|(_, g)| g).collect();
        let norm = clip_grad_norm(&mut tensors, max_norm);
        self.step += 1;
        let t = self.step;
        for (key, g) in grads.iter() {
            let e = &mut self.entries[key.0];
            adam_step(
                e.value.data_mut(),
                g.data(),
                e.m.data_mut(),
                e.v.data_mut(),
                t,
                hyper,
            );
        }
        norm
    }

    /// Adam moment tensors, exposed for checkpointing.
    pub fn moments(&self, key: ParamKey) -> (&Tensor, &Tensor) {
        let e = &self.entries[key.0];
        (&e.m, &e.v)
    }

    pub fn set_moments(&mut self, key: ParamKey, m: Tensor, v: Tensor) {
        let e = &mut self.entries[key.0];
        assert_eq!(m.shape(), e.value.shape(), "moment shape mismatch");
        assert_eq!(v.shape(), e.value.shape(), "moment shape mismatch");
        e.m = m;
        e.v = v;
    }

    /// Overwrite an entry's value; shapes must match.
    pub fn set_value(&mut self, key: ParamKey, value: Tensor) {
        let e = &mut self.entries[key.0];
        assert_eq!(value.shape(), e.value.shape(), "value shape mismatch");
        e.value = value;
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

/// Adam hyperparameters. Betas follow the standard 0.9/0.999.
#[derive(Clone, Copy, Debug)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamHyper {
    pub fn new(lr: f64, eps: f64) -> Self {
        AdamHyper {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps,
        }
    }
}

/// One bias-corrected Adam update on a flat parameter slice.
pub fn adam_step(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    hyper: &AdamHyper,
) {
    assert_eq!(param.len(), grad.len(), "adam_step: shape mismatch");
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for i in 0..param.len() {
        m[i] = hyper.beta1 * m[i] + (1.0 - hyper.beta1) * grad[i];
        v[i] = hyper.beta2 * v[i] + (1.0 - hyper.beta2) * grad[i] * grad[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        param[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
}

/// Scale a gradient set so its global L2 norm is at most `max_norm`.
/// Exact no-op when already within bound; returns the pre-clip norm.
pub fn clip_grad_norm(grads: &mut [&mut Tensor], max_norm: f64) -> f64 {
    assert!(max_norm > 0.0, "clip_grad_norm: max_norm must be positive");
    let sq: f64 = grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.data_mut() {
                *x *= scale;
            }
        }
    }
    norm
}

/// Xavier/Glorot uniform initialization.
pub fn xavier_uniform(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_rows(fan_in, fan_out, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_lr() {
        // First step with g=1: mhat=1, vhat=1, delta = lr/(1+eps) ~ lr.
        let mut p = vec![0.5];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        let h = AdamHyper::new(0.1, 1e-8);
        adam_step(&mut p, &[1.0], &mut m, &mut v, 1, &h);
        assert!((p[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_grad_fresh_state_no_move() {
        let mut p = vec![1.0, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        adam_step(&mut p, &[0.0, 0.0], &mut m, &mut v, 1, &AdamHyper::new(0.1, 1e-8));
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_three_steps_match_hand_tracked_moments() {
        // f(x) = x^2, grad = 2x, x0 = 1, lr = 0.1.
        let h = AdamHyper::new(0.1, 1e-8);
        let mut x = 1.0f64;
        let (mut m, mut v) = (0.0f64, 0.0f64);
        let mut hand = Vec::new();
        for t in 1..=3u64 {
            let g = 2.0 * x;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mhat = m / (1.0 - 0.9f64.powi(t as i32));
            let vhat = v / (1.0 - 0.999f64.powi(t as i32));
            x -= 0.1 * mhat / (vhat.sqrt() + 1e-8);
            hand.push(x);
        }
        let mut p = vec![1.0];
        let mut pm = vec![0.0];
        let mut pv = vec![0.0];
        for t in 1..=3u64 {
            let g = vec![2.0 * p[0]];
            adam_step(&mut p, &g, &mut pm, &mut pv, t, &h);
            assert!((p[0] - hand[(t - 1) as usize]).abs() < 1e-12);
        }
    }

    #[test]
    fn clip_below_is_identity() {
        let mut g = Tensor::from_vec(vec![3.0, 4.0]); // norm 5
        let before = g.clone();
        let n = clip_grad_norm(&mut [&mut g], 10.0);
        assert_eq!(n, 5.0);
        assert_eq!(g, before);
    }

    #[test]
    fn clip_above_scales_by_half() {
        let mut g = Tensor::from_vec(vec![12.0, 16.0]); // norm 20
        let n = clip_grad_norm(&mut [&mut g], 10.0);
        assert_eq!(n, 20.0);
        assert!((g.data()[0] - 6.0).abs() < 1e-12);
        assert!((g.data()[1] - 8.0).abs() < 1e-12);
        // idempotent
        clip_grad_norm(&mut [&mut g], 10.0);
        assert!((g.data()[0] - 6.0).abs() < 1e-12);
    }
}
