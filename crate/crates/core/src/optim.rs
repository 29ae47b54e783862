//! SGD-momentum and AdamW with per-group learning rates.

use serde::{Deserialize, Serialize};

use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    AdamW { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    pub lr_backbone: f64,
    pub lr_recalibration: f64,
    pub weight_decay: f64,
    pub step_count: u64,
    first: Vec<Vec<T>>,
    second: Vec<Vec<T>>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(
        kind: OptimizerKind,
        lr_backbone: f64,
        lr_recalibration: f64,
        weight_decay: f64,
    ) -> Self {
        Optimizer {
            kind,
            lr_backbone,
            lr_recalibration,
            weight_decay,
            step_count: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Backbone => self.lr_backbone,
            ParamGroup::Recalibration => self.lr_recalibration,
        }
    }

    /// Applies one update from the gradients stored on each parameter,
    /// scaling both group rates by `lr_factor` (schedule), then clears them.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &mut ParamStore<T>, lr_factor: f64) {
        if self.first.len() < store.len() {
            self.first.resize(store.len(), Vec::new());
            self.second.resize(store.len(), Vec::new());
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let (lr_b, lr_r, wd, kind) = (
            self.lr_backbone,
            self.lr_recalibration,
            self.weight_decay,
            self.kind,
        );
        for (i, p) in store.iter_mut().enumerate() {
            let Some(grad) = p.tensor.take_grad() else {
                continue;
            };
            let lr = lr_factor
                * match p.group {
                    ParamGroup::Backbone => lr_b,
                    ParamGroup::Recalibration => lr_r,
                };
            // Vectors (biases, norms, temperatures) are not decayed.
            let decay = if p.tensor.rank() >= 2 { wd } else { 0.0 };
            let m = &mut self.first[i];
            if m.is_empty() {
                m.resize(grad.len(), T::zero());
            }
            let w = p.tensor.data_mut();
            match kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    let (mu, lr_t, wd_t) = (T::lit(momentum), T::lit(lr), T::lit(decay));
                    for ((w, &g), m) in w.iter_mut().zip(&grad).zip(m.iter_mut()) {
                        *m = mu * *m + g + wd_t * *w;
                        *w -= lr_t * *m;
                    }
                }
                OptimizerKind::AdamW { beta1, beta2, eps } => {
                    let v = &mut self.second[i];
                    if v.is_empty() {
                        v.resize(grad.len(), T::zero());
                    }
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    let (b1, b2) = (T::lit(beta1), T::lit(beta2));
                    let (one_b1, one_b2) = (T::lit(1.0 - beta1), T::lit(1.0 - beta2));
                    let step = T::lit(lr / bc1);
                    let inv_bc2 = T::lit(1.0 / bc2);
                    let eps = T::lit(eps);
                    let shrink = T::lit(1.0 - lr * decay);
                    for (((w, &g), m), v) in
                        w.iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut())
                    {
                        *m = b1 * *m + one_b1 * g;
                        *v = b2 * *v + one_b2 * g * g;
                        *w = *w * shrink - step * *m / ((*v * inv_bc2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Linear warmup followed by cosine decay to zero; returns the multiplier
/// applied to the base learning rates at `step` (0-based).
pub fn warmup_cosine(step: usize, total_steps: usize, warmup_steps: usize) -> f64 {
    if total_steps == 0 {
        return 1.0;
    }
    if step < warmup_steps {
        return (step + 1) as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps).max(1) as f64;
    let progress = ((step - warmup_steps) as f64 / span).min(1.0);
    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}
