//! SGD with momentum, Adam, and the cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_grads(grads: &[Tensor]) -> Result<()> {
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric("non-finite gradient; step aborted".into()));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl SgdConfig {
    pub fn plain(lr: f32) -> Self {
        SgdConfig {
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

/// Heavy-ball SGD with coupled weight decay (g ← g + λp; b ← m·b + g; p ← p − lr·b).
#[derive(Clone, Debug)]
pub struct Sgd {
    pub config: SgdConfig,
    pub velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Sgd {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        check_grads(grads)?;
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        let SgdConfig {
            momentum,
            weight_decay,
            ..
        } = self.config;
        for ((p, g), b) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            let pd = p.data_mut();
            for ((x, &gi), bi) in pd.iter_mut().zip(g.data()).zip(b.data_mut()) {
                let d = gi + weight_decay * *x;
                *bi = if momentum > 0.0 {
                    momentum * *bi + d
                } else {
                    d
                };
                *x -= lr * *bi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            weight_decay: 1e-3,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u32,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f32) -> Result<()> {
        check_grads(grads)?;
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let AdamConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let d = g.data()[i] + weight_decay * *x;
                md[i] = beta1 * md[i] + (1.0 - beta1) * d;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * d * d;
                *x -= lr * (md[i] / c1) / ((vd[i] / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// η_t = η_min + (η_0 − η_min)(1 + cos(πt/T))/2.
pub fn cosine_lr(initial: f32, floor: f32, step: usize, total: usize) -> f32 {
    let floor = floor.min(initial);
    if total == 0 {
        return initial;
    }
    let t = step.min(total) as f32 / total as f32;
    floor + (initial - floor) * (1.0 + (std::f32::consts::PI * t).cos()) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Vec<Tensor> {
        vec![Tensor::scalar(v)]
    }

    #[test]
    fn one_plain_sgd_step() {
        let mut p = scalar(1.0);
        Sgd::new(SgdConfig::plain(0.1))
            .step(&mut p, &scalar(2.0), 0.1)
            .unwrap();
        assert!((p[0].item() - 0.8).abs() < 1e-7);
        let mut p = scalar(1.0);
        Sgd::new(SgdConfig::plain(0.1))
            .step(&mut p, &scalar(0.0), 0.1)
            .unwrap();
        assert_eq!(p[0].item(), 1.0);
    }

    #[test]
    fn sgd_converges_on_quadratic() {
        for momentum in [0.0, 0.9] {
            let mut opt = Sgd::new(SgdConfig {
                lr: 0.1,
                momentum,
                weight_decay: 0.0,
            });
            let mut w = scalar(0.0);
            let steps = if momentum > 0.0 { 300 } else { 100 };
            for _ in 0..steps {
                let g = scalar(2.0 * (w[0].item() - 3.0));
                opt.step(&mut w, &g, 0.1).unwrap();
            }
            assert!(
                (w[0].item() - 3.0).abs() < 1e-3,
                "momentum {momentum}: {}",
                w[0].item()
            );
        }
    }

    #[test]
    fn momentum_matches_reference_sequence() {
        // b1 = g, b2 = 0.9 b1 + g
        let mut opt = Sgd::new(SgdConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 0.5,
        });
        let mut w = scalar(1.0);
        opt.step(&mut w, &scalar(1.0), 0.1).unwrap();
        let b1 = 1.0 + 0.5;
        assert!((w[0].item() - (1.0 - 0.1 * b1)).abs() < 1e-6);
        let w1 = 1.0 - 0.1 * b1;
        opt.step(&mut w, &scalar(1.0), 0.1).unwrap();
        let b2 = 0.9 * b1 + 1.0 + 0.5 * w1;
        assert!((w[0].item() - (w1 - 0.1 * b2)).abs() < 1e-6);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut opt = Adam::new(AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        });
        let mut w = scalar(1.0);
        opt.step(&mut w, &scalar(5.0), 3e-4).unwrap();
        assert!((w[0].item() - (1.0 - 3e-4)).abs() < 1e-6);
        assert!(opt.step(&mut w, &scalar(f32::NAN), 3e-4).is_err());
    }

    #[test]
    fn cosine_endpoints_and_monotone() {
        assert_eq!(cosine_lr(3e-4, 3e-5, 0, 10), 3e-4);
        assert!((cosine_lr(3e-4, 3e-5, 10, 10) - 3e-5).abs() < 1e-9);
        // a floor above the initial rate is clamped to the initial rate
        assert_eq!(cosine_lr(3e-4, 4e-3, 5, 10), 3e-4);
        let lrs: Vec<f32> = (0..=10).map(|t| cosine_lr(1.0, 0.1, t, 10)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
