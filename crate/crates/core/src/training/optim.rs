use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSlot;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum OptimizerKind {
    Adam,
    Nadam,
    RmsProp,
}

impl OptimizerKind {
    /// Maps the searched optimizer code: 1 = Adam, 2 = Nadam, 3 = RMSprop.
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            1 => Ok(Self::Adam),
            2 => Ok(Self::Nadam),
            3 => Ok(Self::RmsProp),
            other => Err(Error::invalid(format!(
                "unknown optimizer code {other} (expected 1, 2 or 3)"
            ))),
        }
    }

    pub fn code(self) -> u8 {
        match self {
            Self::Adam => 1,
            Self::Nadam => 2,
            Self::RmsProp => 3,
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adam => "Adam",
            Self::Nadam => "Nadam",
            Self::RmsProp => "RMSprop",
        })
    }
}

/// First-order optimizer with per-parameter state, using the Keras default
/// coefficients for the secondary hyperparameters.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// RMSprop decay of the squared-gradient average.
    pub rho: f64,
    pub epsilon: f64,
    /// Nadam momentum-schedule decay.
    pub momentum_decay: f64,
    step: u64,
    mu_product: f64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

pub fn make_optimizer(code: u8, learning_rate: f64) -> Result<Optimizer> {
    Optimizer::new(OptimizerKind::from_code(code)?, learning_rate)
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        Ok(Self {
            kind,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            rho: 0.9,
            epsilon: 1e-7,
            momentum_decay: 0.004,
            step: 0,
            mu_product: 1.0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every slot. Slots must arrive in the same order
    /// on every call.
    pub fn step(&mut self, slots: Vec<ParamSlot<'_>>) {
        self.step += 1;
        if self.second.len() != slots.len() {
            self.second = slots.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            if self.kind != OptimizerKind::RmsProp {
                self.first = slots.iter().map(|(p, _)| vec![0.0; p.len()]).collect();
            }
        }
        let t = self.step as f64;
        let lr = self.learning_rate;
        let eps = self.epsilon as f32;
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let c1 = 1.0 - self.beta1.powf(t);
                let c2 = 1.0 - self.beta2.powf(t);
                let step_size = (lr / c1) as f32;
                let inv_c2 = (1.0 / c2) as f32;
                for (i, (p, g)) in slots.into_iter().enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        p[j] -= step_size * m[j] / ((v[j] * inv_c2).sqrt() + eps);
                    }
                }
            }
            OptimizerKind::Nadam => {
                let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
                let mu = self.beta1 * (1.0 - 0.5 * 0.96f64.powf(t * self.momentum_decay));
                let mu_next = self.beta1 * (1.0 - 0.5 * 0.96f64.powf((t + 1.0) * self.momentum_decay));
                self.mu_product *= mu;
                let grad_coef = (lr * (1.0 - mu) / (1.0 - self.mu_product)) as f32;
                let mom_coef = (lr * mu_next / (1.0 - self.mu_product * mu_next)) as f32;
                let inv_c2 = (1.0 / (1.0 - self.beta2.powf(t))) as f32;
                for (i, (p, g)) in slots.into_iter().enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for j in 0..p.len() {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        let denom = (v[j] * inv_c2).sqrt() + eps;
                        p[j] -= (grad_coef * g[j] + mom_coef * m[j]) / denom;
                    }
                }
            }
            OptimizerKind::RmsProp => {
                let rho = self.rho as f32;
                let lr = lr as f32;
                for (i, (p, g)) in slots.into_iter().enumerate() {
                    let v = &mut self.second[i];
                    for j in 0..p.len() {
                        v[j] = rho * v[j] + (1.0 - rho) * g[j] * g[j];
                        p[j] -= lr * g[j] / (v[j].sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_step(kind: OptimizerKind, lr: f64, p0: f32, g: f32) -> f32 {
        let mut opt = Optimizer::new(kind, lr).unwrap();
        let mut p = [p0];
        let grad = [g];
        opt.step(vec![(&mut p[..], &grad[..])]);
        p[0]
    }

    #[test]
    fn codes_map_to_algorithms() {
        let nadam = make_optimizer(2, 0.001).unwrap();
        assert_eq!((nadam.kind, nadam.learning_rate), (OptimizerKind::Nadam, 0.001));
        let rms = make_optimizer(3, 0.005).unwrap();
        assert_eq!((rms.kind, rms.learning_rate), (OptimizerKind::RmsProp, 0.005));
        assert!(make_optimizer(0, 0.001).is_err());
        assert!(make_optimizer(1, 0.0).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g² on the first step, so the update is lr·g/(|g|+ε).
        let p = one_step(OptimizerKind::Adam, 0.01, 1.0, 0.5);
        assert!((p - (1.0 - 0.01 * 0.5 / (0.5 + 1e-7))).abs() < 1e-6);
    }

    #[test]
    fn rmsprop_first_step() {
        // v = (1-ρ)g², update = lr·g/(sqrt(v)+ε) = lr/sqrt(0.1) for g > 0.
        let p = one_step(OptimizerKind::RmsProp, 0.005, 0.0, 2.0);
        let expected = -0.005 * 2.0 / ((0.1f64 * 4.0).sqrt() + 1e-7);
        assert!((p as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn nadam_first_step() {
        // Hand evaluation of the Nadam update at t = 1.
        let mu1 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.004));
        let mu2 = 0.9 * (1.0 - 0.5 * 0.96f64.powf(0.008));
        let g: f64 = 0.3;
        let m = 0.1 * g;
        let denom = ((0.001 * g * g) / (1.0 - 0.999)).sqrt() + 1e-7;
        let expected = -(0.002 * (1.0 - mu1) / (1.0 - mu1) * g + 0.002 * mu2 / (1.0 - mu1 * mu2) * m) / denom;
        let p = one_step(OptimizerKind::Nadam, 0.002, 0.0, g as f32);
        assert!((p as f64 - expected).abs() < 1e-6, "{p} vs {expected}");
    }

    #[test]
    fn all_optimizers_descend_a_quadratic() {
        for kind in [OptimizerKind::Adam, OptimizerKind::Nadam, OptimizerKind::RmsProp] {
            let mut opt = Optimizer::new(kind, 0.05).unwrap();
            let mut p = vec![3.0f32, -2.0];
            for _ in 0..500 {
                let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
                opt.step(vec![(&mut p[..], &g[..])]);
            }
            assert!(p.iter().all(|x| x.abs() < 0.1), "{kind}: {p:?}");
        }
    }
}
