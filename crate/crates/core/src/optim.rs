use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over a flattened parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub steps: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Adam => num_params,
            OptimizerKind::Sgd => 0,
        };
        Self {
            kind,
            lr,
            first_moment: vec![0.0; moments],
            second_moment: vec![0.0; moments],
            steps: 0,
        }
    }

    pub fn for_params(kind: OptimizerKind, lr: f64, params: &impl ParamSet) -> Self {
        Self::new(kind, lr, params.num_params())
    }

    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let mut theta = params.flatten();
        let g = grads.flatten();
        if g.len() != theta.len() {
            return Err(Error::shape("gradient", &[theta.len()], &[g.len()]));
        }
        self.steps += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in theta.iter_mut().zip(&g) {
                    *p -= self.lr * g;
                }
            }
            OptimizerKind::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for i in 0..theta.len() {
                    let m = &mut self.first_moment[i];
                    let v = &mut self.second_moment[i];
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g[i];
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g[i] * g[i];
                    theta[i] -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                }
            }
        }
        params.load_flat(&theta);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;
    use ndarray::{array, Array1};

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = Linear { weight: array![[1.0, -2.0]], bias: Array1::zeros(1) };
        let g = Linear { weight: array![[0.5, -3.0]], bias: array![0.0] };
        let mut opt = Optimizer::for_params(OptimizerKind::Adam, 0.1, &p);
        opt.step(&mut p, &g).unwrap();
        assert!((p.weight[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((p.weight[[0, 1]] + 1.9).abs() < 1e-6);
        assert_eq!(p.bias[0], 0.0);
    }

    #[test]
    fn sgd_step() {
        let mut p = Linear { weight: array![[1.0]], bias: array![1.0] };
        let g = Linear { weight: array![[2.0]], bias: array![-1.0] };
        Optimizer::for_params(OptimizerKind::Sgd, 0.5, &p).step(&mut p, &g).unwrap();
        assert_eq!(p.weight[[0, 0]], 0.0);
        assert_eq!(p.bias[0], 1.5);
    }
}
