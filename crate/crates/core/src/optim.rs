//! Adam optimizer and gradient conditioning helpers.

use crate::error::{Result, SapmError};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per trainable parameter,
/// aligned with the store layout.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(store: &ParamStore) -> AdamState {
        let m = store
            .iter()
            .map(|(_, e)| {
                if e.trainable {
                    vec![0.0; e.value.len()]
                } else {
                    Vec::new()
                }
            })
            .collect::<Vec<_>>();
        AdamState {
            v: m.clone(),
            m,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One bias-corrected Adam update. `grads` is aligned with the store;
    /// `None` entries are skipped. Non-finite gradients abort the step
    /// before any parameter is touched.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Tensor>],
        cfg: &AdamConfig,
    ) -> Result<()> {
        assert_eq!(
            grads.len(),
            store.len(),
            "gradient list misaligned with store"
        );
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                let (id, entry) = store.iter().nth(i).expect("index in range");
                assert!(
                    entry.trainable,
                    "gradient for non-trainable parameter {}",
                    entry.name
                );
                assert_eq!(
                    g.shape(),
                    store.value(id).shape(),
                    "gradient shape mismatch"
                );
                if !g.all_finite() {
                    return Err(SapmError::numeric(format!(
                        "non-finite gradient for parameter {}",
                        entry.name
                    )));
                }
            }
        }
        self.t += 1;
        let b1c = 1.0 - cfg.beta1.powi(self.t as i32);
        let b2c = 1.0 - cfg.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let p = store.value_mut(crate::params::ParamId(i));
            for ((pv, (mv, vv)), &gv) in p
                .data_mut()
                .iter_mut()
                .zip(m.iter_mut().zip(v.iter_mut()))
                .zip(g.data())
            {
                *mv = cfg.beta1 * *mv + (1.0 - cfg.beta1) * gv;
                *vv = cfg.beta2 * *vv + (1.0 - cfg.beta2) * gv * gv;
                let mhat = *mv / b1c;
                let vhat = *vv / b2c;
                *pv -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Euclidean norm over every gradient jointly.
pub fn global_grad_norm(grads: &[Option<Tensor>]) -> f64 {
    let mut sq = 0.0;
    for g in grads.iter().flatten() {
        for &v in g.data() {
            sq += v * v;
        }
    }
    sq.sqrt()
}

/// Scale all gradients so their joint norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Rescale one gradient to the target norm `eta * sqrt(len)`; the adaptive
/// scaling used for adder filters. Zero gradients are left untouched.
pub fn scale_adder_grad(g: &mut Tensor, eta: f64) {
    let norm = g.norm();
    if norm <= 0.0 {
        return;
    }
    let s = eta * (g.len() as f64).sqrt() / norm;
    for v in g.data_mut() {
        *v *= s;
    }
}
