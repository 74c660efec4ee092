//! First-order optimizers over any [`Parameters`] set.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{check_same_shapes, Parameters};
use crate::numkern::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { kind: OptimizerKind::Adam, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "adam settings beta1={} beta2={} eps={} out of range",
                self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// Optimizer state for an ordered list of tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Optimizer {
    pub cfg: OptimizerConfig,
    pub lr: f64,
    step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Optimizer {
    /// State shaped like `tensors`.
    pub fn new(cfg: OptimizerConfig, lr: f64, tensors: &[&Matrix]) -> Result<Self> {
        cfg.validate()?;
        if !(lr >= 0.0) || !lr.is_finite() {
            return Err(Error::Config(format!("learning rate {lr} must be >= 0")));
        }
        let zeros = || tensors.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect::<Vec<_>>();
        let (m, v) = match cfg.kind {
            OptimizerKind::Sgd => (Vec::new(), Vec::new()),
            OptimizerKind::Adam => (zeros(), zeros()),
        };
        Ok(Self { cfg, lr, step: 0, m, v })
    }

    pub fn for_params<P: Parameters>(cfg: OptimizerConfig, lr: f64, params: &P) -> Result<Self> {
        Self::new(cfg, lr, &params.tensors())
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One descent step; `params` and `grads` are matched by position.
    pub fn step(&mut self, params: Vec<&mut Matrix>, grads: Vec<&Matrix>) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::shape("optimizer_step", format!("{} tensors vs {} gradients", params.len(), grads.len())));
        }
        for (k, (p, g)) in params.iter().zip(&grads).enumerate() {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", format!("tensor {k}: {:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        self.step += 1;
        match self.cfg.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    p.axpy(-self.lr, g)?;
                }
            }
            OptimizerKind::Adam => {
                if self.m.len() != params.len() {
                    return Err(Error::shape("optimizer_step", format!("state for {} tensors, got {}", self.m.len(), params.len())));
                }
                let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
                let t = self.step as i32;
                let c1 = 1.0 - b1.powi(t);
                let c2 = 1.0 - b2.powi(t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let (p, g, m, v) = (p.data_mut(), g.data(), m.data_mut(), v.data_mut());
                    for k in 0..p.len() {
                        m[k] = b1 * m[k] + (1.0 - b1) * g[k];
                        v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
                        p[k] -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }

    pub fn step_params<P: Parameters>(&mut self, params: &mut P, grad: &P) -> Result<()> {
        check_same_shapes(params, grad, "optimizer_step")?;
        self.step(params.tensors_mut(), grad.tensors())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use crate::numkern::RngStream;

    fn toy() -> Linear {
        Linear::init(3, 2, &mut RngStream::new(1, "opt"))
    }

    #[test]
    fn sgd_step_is_minus_lr_times_gradient() {
        let mut p = toy();
        let before = p.clone();
        let g = Linear { weight: Matrix::filled(3, 2, 0.5), bias: Matrix::filled(1, 2, -1.0) };
        let cfg = OptimizerConfig { kind: OptimizerKind::Sgd, ..Default::default() };
        Optimizer::for_params(cfg, 0.1, &p).unwrap().step_params(&mut p, &g).unwrap();
        for (a, b) in p.flatten().iter().zip(before.flatten()) {
            let d = a - b;
            assert!((d + 0.05).abs() < 1e-15 || (d - 0.1).abs() < 1e-15, "{d}");
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr_times_sign() {
        let mut p = toy();
        let before = p.clone();
        let g = Linear { weight: Matrix::filled(3, 2, 3.0), bias: Matrix::filled(1, 2, -0.2) };
        Optimizer::for_params(OptimizerConfig::default(), 0.01, &p).unwrap().step_params(&mut p, &g).unwrap();
        for ((a, b), gv) in p.flatten().iter().zip(before.flatten()).zip(g.flatten()) {
            assert!(((a - b) + 0.01 * gv.signum()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_learning_rate_is_identity() {
        let mut p = toy();
        let before = p.clone();
        let g = Linear { weight: Matrix::filled(3, 2, 1.0), bias: Matrix::filled(1, 2, 1.0) };
        let mut opt = Optimizer::for_params(OptimizerConfig::default(), 0.0, &p).unwrap();
        opt.step_params(&mut p, &g).unwrap();
        assert_eq!(p, before);
    }
}
