//! Adam-style optimizer and learning-rate schedules shared by every training loop.

use serde::{Deserialize, Serialize};

use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Linear warmup over `warmup_ratio` of the run, then cosine decay to zero.
    WarmupCosine { warmup_ratio: f64 },
}

impl LrSchedule {
    /// Multiplier applied to the base learning rate at `step` (0-based) of `total`.
    pub fn factor(&self, step: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::WarmupCosine { warmup_ratio } => {
                let total = total.max(1);
                let warm = (warmup_ratio * total as f64).ceil() as usize;
                if step < warm {
                    (step + 1) as f64 / warm as f64
                } else {
                    let span = (total - warm).max(1) as f64;
                    let progress = ((step - warm) as f64 / span).min(1.0);
                    0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(sizes: &[usize], cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: sizes.iter().map(|&n| vec![T::zero(); n]).collect(),
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update. `lrs[i]` is the learning rate of `params[i]`.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lrs: &[T]) {
        assert_eq!(params.len(), self.m.len(), "parameter group count");
        assert_eq!(grads.len(), self.m.len(), "gradient count");
        self.t += 1;
        let (b1, b2) = (T::of(self.cfg.beta1), T::of(self.cfg.beta2));
        let bc1 = T::one() - b1.powi(self.t);
        let bc2 = T::one() - b2.powi(self.t);
        let eps = T::of(self.cfg.eps);
        let wd = T::of(self.cfg.weight_decay);
        for (i, p) in params.iter_mut().enumerate() {
            let lr = lrs[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &g), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(grads[i].data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * g;
                *vi = b2 * *vi + (T::one() - b2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if wd > T::zero() {
                    *w -= lr * wd * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = LrSchedule::WarmupCosine { warmup_ratio: 0.1 };
        assert!((s.factor(0, 100) - 0.1).abs() < 1e-12);
        assert!((s.factor(9, 100) - 1.0).abs() < 1e-12);
        assert!((s.factor(10, 100) - 1.0).abs() < 1e-12);
        assert!(s.factor(99, 100) < 0.01);
        assert!(s.factor(50, 100) < s.factor(20, 100));
        assert_eq!(LrSchedule::Constant.factor(3, 4), 1.0);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut x = Tensor::vector(vec![3.0_f64, -2.0]);
        let mut opt = Adam::new(&[2], AdamConfig::default());
        for _ in 0..2000 {
            let g = x.map(|v| 2.0 * v);
            opt.step(&mut [&mut x], &[g], &[0.05]);
        }
        assert!(x.data().iter().all(|v| v.abs() < 1e-3), "{x:?}");
    }
}
