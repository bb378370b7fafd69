//! AdamW with decoupled weight decay, the learning-rate schedule and
//! global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::params::Parameterized;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Moment estimates, one pair per parameter tensor in `params()` order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> OptimState<T> {
    pub fn new<M: Parameterized<T>>(model: &M) -> Self {
        let zeros: Vec<Tensor<T>> = model.params().iter().map(|p| Tensor::zeros(p.tensor.shape())).collect();
        OptimState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// One AdamW update. Decay `θ ← θ − lr·wd·θ` is applied first and only to
/// tensors flagged for decay; then the bias-corrected Adam step.
pub fn adamw_step<T: Scalar, M: Parameterized<T>>(
    model: &mut M,
    grads: &M,
    state: &mut OptimState<T>,
    cfg: &AdamWConfig,
    lr: f64,
) -> Result<()> {
    if !(lr >= 0.0) {
        return Err(Error::Config(format!("learning rate must be non-negative, got {lr}")));
    }
    let gs = grads.params();
    if let Some(g) = gs.iter().find(|g| !g.tensor.all_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient in parameter group {}", g.name)));
    }
    let mut ps = model.params_mut();
    if ps.len() != gs.len() || ps.len() != state.m.len() {
        return Err(Error::Dimension("optimizer state does not match the model".into()));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let (b1, b2) = (T::from_f64(cfg.beta1), T::from_f64(cfg.beta2));
    let (ob1, ob2) = (T::from_f64(1.0 - cfg.beta1), T::from_f64(1.0 - cfg.beta2));
    let step_size = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);
    let eps = T::from_f64(cfg.eps);
    for (i, (p, g)) in ps.iter_mut().zip(&gs).enumerate() {
        if p.tensor.shape() != g.tensor.shape() || state.m[i].shape() != p.tensor.shape() {
            return Err(Error::Dimension(format!("shape mismatch in parameter group {}", p.name)));
        }
        let decay = if p.decay { T::from_f64(1.0 - lr * cfg.weight_decay) } else { T::one() };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gr), mi), vi) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).zip(m).zip(v) {
            *w = *w * decay;
            *mi = b1 * *mi + ob1 * gr;
            *vi = b2 * *vi + ob2 * gr * gr;
            *w = *w - step_size * *mi / ((*vi * inv_bc2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Linear warmup then cosine decay from `peak` down to `min(1e-5, peak)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub const FLOOR: f64 = 1e-5;

    /// Warmup covers 5% of the run (at least one step).
    pub fn new(peak: f64, total_steps: u64) -> Self {
        LrSchedule {
            peak,
            warmup_steps: ((total_steps as f64 * 0.05).round() as u64).max(1),
            total_steps: total_steps.max(1),
        }
    }

    /// Rate used for zero-based step `step`.
    pub fn lr(&self, step: u64) -> f64 {
        if step < self.warmup_steps {
            return self.peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let floor = Self::FLOOR.min(self.peak);
        let span = self.total_steps.saturating_sub(self.warmup_steps + 1).max(1) as f64;
        let progress = ((step - self.warmup_steps) as f64 / span).min(1.0);
        floor + 0.5 * (self.peak - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Scales gradients so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm<T: Scalar, M: Parameterized<T>>(grads: &mut M, max_norm: f64) -> f64 {
    let sq: f64 = grads
        .params()
        .iter()
        .flat_map(|p| p.tensor.data().iter())
        .map(|v| v.to_f64() * v.to_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = T::from_f64(max_norm / norm);
        for p in grads.params_mut() {
            for v in p.tensor.data_mut() {
                *v = *v * s;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut th = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::<f64>::zeros(&[3]);
        let mut st = OptimState::new(&th);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        let before = th.clone();
        adamw_step(&mut th, &g, &mut st, &cfg, 0.1).unwrap();
        assert_eq!(th, before);
    }

    #[test]
    fn first_step_closed_form() {
        let mut th = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let g = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let mut st = OptimState::new(&th);
        let cfg = AdamWConfig { weight_decay: 0.0, ..Default::default() };
        adamw_step(&mut th, &g, &mut st, &cfg, 0.1).unwrap();
        assert!((th.data()[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nan_gradient_names_group() {
        let mut th = Tensor::<f32>::zeros(&[2]);
        let g = Tensor::<f32>::from_f64(&[2], &[0.0, f64::NAN]).unwrap();
        let mut st = OptimState::new(&th);
        let err = adamw_step(&mut th, &g, &mut st, &AdamWConfig::default(), 0.1).unwrap_err();
        assert!(matches!(&err, Error::Numerical(m) if m.contains("value")), "{err}");
        assert_eq!(st.step, 0);
    }

    #[test]
    fn schedule_shape() {
        let s = LrSchedule::new(1e-3, 100);
        assert_eq!(s.warmup_steps, 5);
        assert!((s.lr(0) - 2e-4).abs() < 1e-15);
        assert!((s.lr(4) - 1e-3).abs() < 1e-15);
        assert!((s.lr(5) - 1e-3).abs() < 1e-15);
        assert!((s.lr(100) - 1e-5).abs() < 1e-15);
        assert!((1..100).all(|k| k < 5 || s.lr(k) <= s.lr(k - 1)));
        assert_eq!(LrSchedule::new(0.0, 10).lr(7), 0.0);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = Tensor::<f64>::from_f64(&[2], &[30.0, 40.0]).unwrap();
        assert_eq!(clip_grad_norm(&mut g, 5.0), 50.0);
        assert!((g.data()[0] - 3.0).abs() < 1e-12 && (g.data()[1] - 4.0).abs() < 1e-12);
    }
}
