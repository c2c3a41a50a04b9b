//! Adam and the one-cycle learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::diffcore::{lit, Mat, Real};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    #[serde(rename = "adam_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates. Moment buffers are created on
/// the first step, one per parameter tensor in the order given.
#[derive(Clone, Debug)]
pub struct Adam<T: Real> {
    pub config: AdamConfig,
    pub(crate) m: Vec<Mat<T>>,
    pub(crate) v: Vec<Mat<T>>,
    pub(crate) steps: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, params: &mut [&mut Mat<T>], grads: &[Mat<T>], lr: f64) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
            self.v = grads.iter().map(|g| Mat::zeros(g.dim())).collect();
        }
        self.steps += 1;
        let t = self.steps as i32;
        let (b1, b2) = (lit::<T>(self.config.beta1), lit::<T>(self.config.beta2));
        let c1 = T::one() - b1.powi(t);
        let c2 = T::one() - b2.powi(t);
        let eps = lit::<T>(self.config.eps);
        let lr = lit::<T>(lr);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            ndarray::Zip::from(&mut **p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (T::one() - b1) * g;
                    *v = b2 * *v + (T::one() - b2) * g * g;
                    let m_hat = *m / c1;
                    let v_hat = *v / c2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
    }
}

/// Cosine one-cycle schedule: warm up from `max_lr / div_factor` to `max_lr`
/// over the first `warmup_fraction` of the steps, then anneal to
/// `max_lr / final_div`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneCycle {
    pub max_lr: f64,
    pub div_factor: f64,
    pub final_div: f64,
    pub warmup_fraction: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            max_lr: 1e-3,
            div_factor: 25.0,
            final_div: 1e4,
            warmup_fraction: 0.3,
        }
    }
}

fn cosine_blend(from: f64, to: f64, frac: f64) -> f64 {
    let w = 0.5 * (1.0 - (std::f64::consts::PI * frac).cos());
    from * (1.0 - w) + to * w
}

impl OneCycle {
    pub fn initial_lr(&self) -> f64 {
        self.max_lr / self.div_factor
    }

    pub fn final_lr(&self) -> f64 {
        self.max_lr / self.final_div
    }

    /// Learning rate at `step` of a `total_steps` run.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> Result<f64> {
        if step >= total_steps {
            return Err(Error::Usage(format!(
                "step {step} outside schedule of {total_steps} steps"
            )));
        }
        let peak = self.warmup_fraction * total_steps as f64;
        let s = step as f64;
        if s <= peak {
            let frac = if peak > 0.0 { s / peak } else { 1.0 };
            return Ok(cosine_blend(self.initial_lr(), self.max_lr, frac));
        }
        let span = (total_steps - 1) as f64 - peak;
        let frac = ((s - peak) / span).min(1.0);
        Ok(cosine_blend(self.max_lr, self.final_lr(), frac))
    }

    /// Upper bound on `|lr(k+1) - lr(k)|` over a `total_steps` run.
    pub fn max_step_change(&self, total_steps: usize) -> f64 {
        let peak = self.warmup_fraction * total_steps as f64;
        let span = (total_steps.saturating_sub(1)) as f64 - peak;
        let pi = std::f64::consts::PI;
        let up = if peak > 0.0 {
            (self.max_lr - self.initial_lr()) * pi / (2.0 * peak)
        } else {
            self.max_lr - self.initial_lr()
        };
        let down = if span > 0.0 {
            (self.max_lr - self.final_lr()) * pi / (2.0 * span)
        } else {
            self.max_lr - self.final_lr()
        };
        up.max(down)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.max_lr > 0.0 && self.div_factor > 0.0 && self.final_div > 0.0) {
            return Err(Error::Usage("learning rates and divisors must be positive".into()));
        }
        if !(self.warmup_fraction > 0.0 && self.warmup_fraction < 1.0) {
            return Err(Error::Usage(format!(
                "warmup_fraction {} outside (0, 1)",
                self.warmup_fraction
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use ndarray::array;

    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = OneCycle {
            max_lr: 0.01,
            ..Default::default()
        };
        let total = 100;
        assert_eq!(s.lr_at(0, total).unwrap(), 0.01 / 25.0);
        assert!((s.lr_at(30, total).unwrap() - 0.01).abs() < 1e-15);
        let last = s.lr_at(total - 1, total).unwrap();
        assert!((last - 0.01 / 1e4).abs() < 1e-15);
        assert!(matches!(s.lr_at(total, total), Err(Error::Usage(_))));
    }

    #[test]
    fn schedule_steps_bounded_and_continuous() {
        let s = OneCycle::default();
        for total in [2usize, 3, 10, 97, 1000] {
            let bound = s.max_step_change(total);
            let lrs: Vec<f64> = (0..total).map(|k| s.lr_at(k, total).unwrap()).collect();
            for w in lrs.windows(2) {
                assert!((w[1] - w[0]).abs() <= bound + 1e-15, "total {total}");
            }
            let peak = lrs.iter().cloned().fold(0.0, f64::max);
            assert!(peak <= s.max_lr + 1e-18);
        }
    }

    #[test]
    fn adam_two_steps_by_hand() {
        // p0 = 1, gradients 2 then -1, lr 0.1, default betas.
        // step 1: m = 0.2, v = 0.004; m_hat = 2, v_hat = 4 -> p = 1 - 0.1*2/(2+1e-8)
        // step 2: m = 0.18 - 0.1 = 0.08, v = 0.003996 + 0.001 = 0.004996
        //         m_hat = 0.08/0.19, v_hat = 0.004996/0.001999
        let mut p = array![[1.0f64]];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [&mut p], &[array![[2.0]]], 0.1);
        let p1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p[[0, 0]] - p1).abs() < 1e-15);
        adam.step(&mut [&mut p], &[array![[-1.0]]], 0.1);
        let m_hat: f64 = 0.08 / (1.0 - 0.9f64.powi(2));
        let v_hat: f64 = 0.004996 / (1.0 - 0.999f64.powi(2));
        let p2 = p1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p[[0, 0]] - p2).abs() < 1e-12, "{} vs {p2}", p[[0, 0]]);
        assert_eq!(adam.steps(), 2);
    }

    #[test]
    fn rejects_bad_warmup() {
        let s = OneCycle {
            warmup_fraction: 1.0,
            ..Default::default()
        };
        assert!(s.validate().is_err());
    }
}
