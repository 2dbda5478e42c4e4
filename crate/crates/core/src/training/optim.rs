use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    /// Peak learning rate.
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay.
    pub weight_decay: f64,
    /// Fraction of the run spent in linear warmup.
    pub warmup_ratio: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_ratio: 0.03,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && (0.0..=1.0).contains(&self.warmup_ratio);
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Linear warmup to the peak, then cosine decay to zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub warmup: usize,
    pub total: usize,
}

impl Schedule {
    pub fn new(peak: f64, warmup_ratio: f64, total: usize) -> Self {
        let warmup = ((warmup_ratio * total as f64).round() as usize).min(total);
        Self { peak, warmup, total }
    }

    /// Learning rate used for update `step` (0-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup);
        if span == 0 {
            return self.peak;
        }
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.peak * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// AdamW with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct AdamW<T: Scalar> {
    cfg: OptimizerConfig,
    m: Vec<Matrix<T>>,
    v: Vec<Matrix<T>>,
    step: u64,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(cfg: OptimizerConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let zeros: Vec<Matrix<T>> = shapes.into_iter().map(|(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            cfg,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Matrix<T>], &[Matrix<T>]) {
        (&self.m, &self.v)
    }

    pub fn step(&mut self, params: &mut [&mut Matrix<T>], grads: &[Matrix<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invariant(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one_b1, one_b2) = (T::lit(1.0 - c.beta1), T::lit(1.0 - c.beta2));
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let (lr_t, eps, decay) = (T::lit(lr), T::lit(c.eps), T::lit(lr * c.weight_decay));
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if p.shape() != g.shape() || p.shape() != m.shape() {
                return Err(Error::Shape {
                    op: "adamw",
                    left: p.shape(),
                    right: g.shape(),
                });
            }
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, &gi) in g.data().iter().enumerate() {
                md[i] = b1 * md[i] + one_b1 * gi;
                vd[i] = b2 * vd[i] + one_b2 * gi * gi;
                let m_hat = md[i] / corr1;
                let v_hat = vd[i] / corr2;
                pd[i] = pd[i] - decay * pd[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn no_decay() -> OptimizerConfig {
        OptimizerConfig {
            weight_decay: 0.0,
            ..OptimizerConfig::default()
        }
    }

    #[test]
    fn zero_gradients_leave_params() {
        let mut p = Matrix::from_rows(&[&[1.5, -2.0]]);
        let before = p.clone();
        let mut opt = AdamW::<f64>::new(no_decay(), [(1, 2)]);
        for _ in 0..5 {
            opt.step(&mut [&mut p], &[Matrix::zeros(1, 2)], 1e-2).unwrap();
        }
        assert!(p.bitwise_eq(&before));
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = no_decay();
        let g = 0.3;
        let lr = 0.05;
        let mut p = Matrix::from_rows(&[&[2.0]]);
        let mut opt = AdamW::<f64>::new(cfg, [(1, 1)]);
        opt.step(&mut [&mut p], &[Matrix::from_rows(&[&[g]])], lr).unwrap();
        let m_hat = (1.0 - cfg.beta1) * g / (1.0 - cfg.beta1);
        let v_hat = (1.0 - cfg.beta2) * g * g / (1.0 - cfg.beta2);
        let want = 2.0 - lr * m_hat / (v_hat.sqrt() + cfg.eps);
        assert!((p.get(0, 0) - want).abs() < 1e-15);
    }

    #[test]
    fn decay_is_decoupled() {
        let cfg = OptimizerConfig {
            weight_decay: 0.1,
            ..OptimizerConfig::default()
        };
        let mut p = Matrix::from_rows(&[&[4.0]]);
        let mut opt = AdamW::<f64>::new(cfg, [(1, 1)]);
        opt.step(&mut [&mut p], &[Matrix::zeros(1, 1)], 0.5).unwrap();
        assert!((p.get(0, 0) - 4.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn warmup_reaches_peak_then_decays() {
        let s = Schedule::new(1e-3, 0.03, 2000);
        assert_eq!(s.warmup, 60);
        assert_eq!(s.lr_at(59), 1e-3);
        assert_eq!(s.lr_at(60), 1e-3);
        assert!(s.lr_at(0) > 0.0 && s.lr_at(0) < s.lr_at(30));
        assert!(s.lr_at(1000) < 1e-3);
        assert!(s.lr_at(1999) < 1e-8);
        let none = Schedule::new(2.0, 0.0, 10);
        assert_eq!(none.lr_at(0), 2.0);
    }
}
