//! Adam with global-norm clipping and the two-group learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autograd::{ParamGroup, ParamStore};
use crate::error::{ArgusError, Result};
use crate::tensor::{Float, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 1.0 }
    }
}

/// Euclidean norm over every gradient entry.
pub fn global_norm<F: Float>(grads: &[Option<Tensor<F>>]) -> f64 {
    grads.iter().flatten().map(|g| g.sum_squares()).sum::<f64>().sqrt()
}

/// Rescales gradients so their global norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut [Option<Tensor<F>>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = F::of(max_norm / norm);
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied {
        grad_norm: f64,
        clipped_norm: f64,
    },
    /// A gradient entry was NaN or infinite; nothing was updated.
    Skipped,
}

/// Adam state for every parameter of a store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub config: AdamConfig,
    /// Number of applied updates.
    pub step: u64,
    pub skipped: u64,
    pub m: Vec<Tensor<F>>,
    pub v: Vec<Tensor<F>>,
}

impl<F: Float> Adam<F> {
    pub fn new(config: AdamConfig, store: &ParamStore<F>) -> Self {
        let zeros = || store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect::<Vec<_>>();
        Self { config, step: 0, skipped: 0, m: zeros(), v: zeros() }
    }

    /// Clips, then applies one bias-corrected update with a per-group rate.
    /// Parameters without a gradient are left untouched.
    pub fn update(
        &mut self,
        store: &mut ParamStore<F>,
        grads: &mut [Option<Tensor<F>>],
        lr: impl Fn(ParamGroup) -> f64,
    ) -> Result<StepOutcome> {
        if grads.len() != store.len() {
            return Err(ArgusError::Shape(format!("{} gradients for {} parameters", grads.len(), store.len())));
        }
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            self.skipped += 1;
            log::warn!("non-finite gradient at step {}; update skipped ({} so far)", self.step, self.skipped);
            return Ok(StepOutcome::Skipped);
        }
        let grad_norm = clip_global_norm(grads, self.config.clip_norm);
        let clipped_norm = global_norm(grads);
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let ids: Vec<_> = store.iter().map(|(id, p)| (id, p.group)).collect();
        for (i, (id, group)) in ids.into_iter().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != self.m[i].shape() {
                return Err(ArgusError::Shape(format!("gradient {:?} vs moment {:?}", g.shape(), self.m[i].shape())));
            }
            let rate = lr(group);
            let (fb1, fb2) = (F::of(b1), F::of(b2));
            let (ob1, ob2) = (F::of(1.0 - b1), F::of(1.0 - b2));
            let (fc1, fc2) = (F::of(c1), F::of(c2));
            let (frate, feps) = (F::of(rate), F::of(self.config.eps));
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let p = store.value_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                *m = fb1 * *m + ob1 * g;
                *v = fb2 * *v + ob2 * g * g;
                let mh = *m / fc1;
                let vh = *v / fc2;
                *p -= frate * mh / (vh.sqrt() + feps);
            }
        }
        Ok(StepOutcome::Applied { grad_norm, clipped_norm })
    }
}

/// Backbone: linear warmup then constant. Head: constant through warmup,
/// then linear decay to `head_end` at `total_steps`. Steps past the end
/// keep the final rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LrSchedule {
    pub backbone_start: f64,
    pub backbone_peak: f64,
    pub head_start: f64,
    pub head_end: f64,
    pub warmup_steps: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { backbone_start: 1e-5, backbone_peak: 1e-4, head_start: 1e-3, head_end: 1e-4, warmup_steps: 300 }
    }
}

impl LrSchedule {
    /// Warmup actually used for a run of `total_steps`.
    pub fn effective_warmup(&self, total_steps: u64) -> u64 {
        self.warmup_steps.min(total_steps)
    }

    pub fn lr(&self, step: u64, group: ParamGroup, total_steps: u64) -> f64 {
        let w = self.effective_warmup(total_steps);
        let step = step.min(total_steps);
        match group {
            ParamGroup::Backbone => {
                if step >= w {
                    self.backbone_peak
                } else {
                    let a = step as f64 / w as f64;
                    self.backbone_start + a * (self.backbone_peak - self.backbone_start)
                }
            }
            ParamGroup::Head => {
                if step >= total_steps {
                    self.head_end
                } else if step <= w {
                    self.head_start
                } else {
                    let a = (step - w) as f64 / (total_steps - w) as f64;
                    self.head_start + a * (self.head_end - self.head_start)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(x: f64) -> (ParamStore<f64>, crate::ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("x", ParamGroup::Backbone, Tensor::scalar(x));
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let (mut s, id) = scalar_store(1.5);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        for _ in 0..3 {
            adam.update(&mut s, &mut [Some(Tensor::scalar(0.0))], |_| 0.1).unwrap();
        }
        assert_eq!(s.value(id).item(), 1.5);
    }

    #[test]
    fn non_finite_gradient_skips() {
        let (mut s, id) = scalar_store(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let out = adam.update(&mut s, &mut [Some(Tensor::scalar(f64::NAN))], |_| 0.1).unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!((adam.step, adam.skipped), (0, 1));
        assert_eq!(s.value(id).item(), 1.0);
    }

    #[test]
    fn clipping_bounds_norm() {
        let mut g = vec![Some(Tensor::<f64>::from_f64(&[2], &[3.0, 4.0]).unwrap()), None];
        let pre = clip_global_norm(&mut g, 1.0);
        assert_eq!(pre, 5.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn head_midpoint() {
        let s = LrSchedule { warmup_steps: 100, ..LrSchedule::default() };
        let mid = s.lr(100 + 4950, ParamGroup::Head, 10_000);
        assert!((mid - 5.5e-4).abs() < 1e-12);
    }

    #[test]
    fn warmup_capped_by_total() {
        let s = LrSchedule { warmup_steps: 300, ..LrSchedule::default() };
        assert_eq!(s.lr(200, ParamGroup::Backbone, 200), 1e-4);
        assert_eq!(s.lr(200, ParamGroup::Head, 200), 1e-4);
    }
}
