//! Adam with a linear warmup-then-decay learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seqcore::{Gradients, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            warmup_steps: 500,
            batch_size: 8,
            epochs: 3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr {} must be a finite non-negative number", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps be positive".into()));
        }
        Ok(())
    }
}

/// Learning rate at `step` (0-based) of `total` steps: ramps up linearly over
/// `warmup` steps, then decays linearly to zero at `total`.
pub fn linear_schedule(base: f64, step: usize, warmup: usize, total: usize) -> f64 {
    if step < warmup {
        return base * (step + 1) as f64 / warmup as f64;
    }
    let remaining = total.saturating_sub(step) as f64;
    let span = total.saturating_sub(warmup).max(1) as f64;
    base * (remaining / span).clamp(0.0, 1.0)
}

#[derive(Clone, Debug)]
pub struct Adam {
    cfg: OptimConfig,
    m: ParamStore,
    v: ParamStore,
    t: u32,
}

impl Adam {
    pub fn new(params: &ParamStore, cfg: OptimConfig) -> Self {
        Self {
            cfg,
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }

    /// Applies one bias-corrected update with learning rate `lr`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients, lr: f64) -> Result<()> {
        self.t += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        for (name, p) in params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::input(format!("no gradient for {name}")))?;
            let m = self.m.get_mut(name).expect("same names as params");
            let v = self.v.get_mut(name).expect("same names as params");
            let (pd, gd) = (p.data_mut(), g.data());
            for (i, (pi, &gi)) in pd.iter_mut().zip(gd).enumerate() {
                let mi = &mut m.data_mut()[i];
                *mi = b1 * *mi + (1.0 - b1) * gi;
                let mhat = *mi / c1;
                let vi = &mut v.data_mut()[i];
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let vhat = *vi / c2;
                *pi -= lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Matrix;

    #[test]
    fn schedule_shape() {
        assert_eq!(linear_schedule(1.0, 0, 4, 10), 0.25);
        assert_eq!(linear_schedule(1.0, 3, 4, 10), 1.0);
        assert_eq!(linear_schedule(1.0, 4, 4, 10), 1.0);
        assert!((linear_schedule(1.0, 7, 4, 10) - 0.5).abs() < 1e-12);
        assert_eq!(linear_schedule(1.0, 10, 4, 10), 0.0);
        assert_eq!(linear_schedule(1.0, 0, 0, 4), 1.0);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::from_vec(1, 2, vec![1.0, -1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Matrix::from_vec(1, 2, vec![0.5, -3.0]));
        let mut adam = Adam::new(&p, OptimConfig::default());
        adam.step(&mut p, &g, 0.1).unwrap();
        let w = p.get("w").unwrap();
        assert!((w.get(0, 0) - 0.9).abs() < 1e-6);
        assert!((w.get(0, 1) + 0.9).abs() < 1e-6);
    }

    #[test]
    fn zero_lr_keeps_bits() {
        let mut p = ParamStore::new();
        p.insert("w", Matrix::from_vec(1, 3, vec![0.0, 0.3, -2.0]));
        let before = p.clone();
        let mut g = ParamStore::new();
        g.insert("w", Matrix::from_vec(1, 3, vec![1.0, -1.0, 0.0]));
        Adam::new(&p, OptimConfig::default()).step(&mut p, &g, 0.0).unwrap();
        assert!(p.bit_eq(&before));
    }
}
