use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps_taken(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) -> Result<()> {
        check_dim("gradient", self.m.len(), grad.len())?;
        check_dim("parameters", self.m.len(), params.len())?;
        if !grad.iter().all(|g| g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + self.eps);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlateauConfig {
    pub factor: f64,
    /// Epochs without relative improvement before the rate is cut.
    pub patience: usize,
    /// Relative improvement that counts as progress.
    pub threshold: f64,
    pub min_lr: f64,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            factor: 0.5,
            patience: 3,
            threshold: 1e-4,
            min_lr: 1e-6,
        }
    }
}

/// Reduce-on-plateau learning-rate schedule driven by validation loss.
#[derive(Clone, Debug)]
pub struct Plateau {
    cfg: PlateauConfig,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl Plateau {
    pub fn new(lr0: f64, cfg: PlateauConfig) -> Self {
        Self {
            cfg,
            lr: lr0,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records one epoch's validation loss and returns the rate to use next.
    pub fn observe(&mut self, val_loss: f64) -> f64 {
        if val_loss < self.best * (1.0 - self.cfg.threshold) {
            self.best = val_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
            if self.bad_epochs > self.cfg.patience {
                self.lr = (self.lr * self.cfg.factor).max(self.cfg.min_lr.min(self.lr));
                self.bad_epochs = 0;
            }
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_first_step_is_exact_noop() {
        let mut adam = Adam::new(3);
        let mut p = vec![0.3, -1.2, 5.0];
        let before = p.clone();
        adam.step(&mut p, &[0.0; 3], 0.01).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // m̂ = g, v̂ = g², so the update is lr·g/(|g| + ε).
        let mut adam = Adam::new(2);
        let mut p = vec![0.0, 0.0];
        adam.step(&mut p, &[2.0, -0.5], 0.1).unwrap();
        assert!((p[0] + 0.1 * 2.0 / (2.0 + 1e-8)).abs() < 1e-15);
        assert!((p[1] - 0.1 * 0.5 / (0.5 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut adam = Adam::new(2);
        let mut p = vec![3.0, -2.0];
        for _ in 0..2000 {
            let g = vec![2.0 * p[0], 8.0 * p[1]];
            adam.step(&mut p, &g, 0.05).unwrap();
        }
        assert!(p[0].abs() < 1e-3 && p[1].abs() < 1e-3);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut adam = Adam::new(1);
        assert!(adam.step(&mut [0.0], &[f64::NAN], 0.1).is_err());
    }

    #[test]
    fn plateau_halves_after_patience() {
        let mut s = Plateau::new(0.01, PlateauConfig::default());
        assert_eq!(s.observe(1.0), 0.01);
        for _ in 0..3 {
            assert_eq!(s.observe(1.0), 0.01);
        }
        assert_eq!(s.observe(1.0), 0.005);
        assert_eq!(s.observe(0.5), 0.005);
    }
}
