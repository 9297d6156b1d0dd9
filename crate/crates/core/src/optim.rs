//! First-order optimizers with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    /// Heavy-ball momentum: `v ← μ·v + g; θ ← θ − lr·v`.
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerConfig {
    pub fn adam(lr: f64) -> Self {
        OptimizerConfig::Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn lr(&self) -> f64 {
        match *self {
            OptimizerConfig::Sgd { lr, .. } | OptimizerConfig::Adam { lr, .. } => lr,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            OptimizerConfig::Sgd { lr, momentum } => lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&momentum),
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                lr > 0.0 && lr.is_finite() && (0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2) && eps > 0.0
            }
        };
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid optimizer settings {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UpdateStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    clip: Option<f64>,
    first: ParamStore,
    second: ParamStore,
    steps: u64,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, clip: Option<f64>, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        if let Some(c) = clip {
            if !(c > 0.0) {
                return Err(Error::InvalidArgument(format!("clip norm must be positive, got {c}")));
            }
        }
        Ok(Self {
            config,
            clip,
            first: params.zeros_like(),
            second: params.zeros_like(),
            steps: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Clips `grads` to the configured global norm and applies one update.
    pub fn step(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<UpdateStats> {
        if let Some(msg) = params.layout_mismatch(grads) {
            return Err(Error::Architecture(msg));
        }
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::Degenerate(format!("non-finite gradient norm {grad_norm}")));
        }
        let mut g = grads.clone();
        let clipped = matches!(self.clip, Some(c) if grad_norm > c);
        if let (true, Some(c)) = (clipped, self.clip) {
            g.scale_in_place(c / grad_norm);
        }
        self.steps += 1;
        match self.config {
            OptimizerConfig::Sgd { lr, momentum } => {
                self.first.scale_in_place(momentum);
                self.first.axpy(1.0, &g)?;
                params.axpy(-lr, &self.first)?;
            }
            OptimizerConfig::Adam { lr, beta1, beta2, eps } => {
                let bc1 = 1.0 - beta1.powi(self.steps as i32);
                let bc2 = 1.0 - beta2.powi(self.steps as i32);
                for (name, p) in params.iter_mut() {
                    let gd = g.get(name).expect("layout checked").data();
                    let m = self.first.get_mut(name).expect("layout checked").data_mut();
                    for (mi, gi) in m.iter_mut().zip(gd) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gi;
                    }
                    let v = self.second.get_mut(name).expect("layout checked").data_mut();
                    for (vi, gi) in v.iter_mut().zip(gd) {
                        *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                    }
                    let (m, v) = (self.first.get(name).unwrap().data(), self.second.get(name).unwrap().data());
                    for ((pi, mi), vi) in p.data_mut().iter_mut().zip(m).zip(v) {
                        *pi -= lr * (mi / bc1) / ((vi / bc2).sqrt() + eps);
                    }
                }
            }
        }
        Ok(UpdateStats { grad_norm, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn store(v: Vec<f64>) -> ParamStore {
        [("w".to_string(), Tensor::from_vec(v))].into_iter().collect()
    }

    #[test]
    fn sgd_momentum_matches_hand_recursion() {
        let mut p = store(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.1, momentum: 0.9 }, None, &p).unwrap();
        opt.step(&mut p, &store(vec![1.0])).unwrap();
        assert!((p.get("w").unwrap().item() - 0.9).abs() < 1e-15);
        opt.step(&mut p, &store(vec![1.0])).unwrap();
        // v = 0.9·1 + 1 = 1.9
        assert!((p.get("w").unwrap().item() - (0.9 - 0.19)).abs() < 1e-15);
    }

    #[test]
    fn clipping_rescales_to_the_bound() {
        let mut p = store(vec![0.0, 0.0]);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 1.0, momentum: 0.0 }, Some(1.0), &p).unwrap();
        let s = opt.step(&mut p, &store(vec![3.0, 4.0])).unwrap();
        assert_eq!(s.grad_norm, 5.0);
        assert!(s.clipped);
        assert!((p.global_norm() - 1.0).abs() < 1e-15);
        let s = opt.step(&mut p, &store(vec![0.3, 0.4])).unwrap();
        assert!(!s.clipped);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = store(vec![0.5, -0.5]);
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.01), None, &p).unwrap();
        opt.step(&mut p, &store(vec![2.0, -0.001])).unwrap();
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.49).abs() < 1e-9);
        assert!((w[1] + 0.49).abs() < 1e-4);
    }

    #[test]
    fn rejects_bad_settings_and_layouts() {
        let p = store(vec![0.0]);
        assert!(Optimizer::new(OptimizerConfig::Sgd { lr: -1.0, momentum: 0.9 }, None, &p).is_err());
        assert!(Optimizer::new(OptimizerConfig::adam(0.1), Some(0.0), &p).is_err());
        let mut opt = Optimizer::new(OptimizerConfig::adam(0.1), None, &p).unwrap();
        let mut q = p.clone();
        assert!(opt.step(&mut q, &store(vec![0.0, 1.0])).is_err());
    }
}
