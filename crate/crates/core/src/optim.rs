//! Adam and plain SGD over flat parameter slices.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result, SparksError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = SparksError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => invalid(format!("unknown optimizer {other:?}")),
        }
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimizer state for one parameter group.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, len: usize, weight_decay: f64) -> Self {
        let state = match kind {
            OptimizerKind::Adam => len,
            OptimizerKind::Sgd => 0,
        };
        Optimizer {
            kind,
            weight_decay,
            m: vec![0.0; state],
            v: vec![0.0; state],
            t: 0,
        }
    }

    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut f64>, grads: &[f64], lr: f64) {
        self.t += 1;
        let wd = self.weight_decay;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, &g) in params.into_iter().zip(grads) {
                    *p -= lr * (g + wd * *p);
                }
            }
            OptimizerKind::Adam => {
                assert_eq!(self.m.len(), grads.len(), "parameter group size changed");
                let bc1 = 1.0 - ADAM_BETA1.powi(self.t);
                let bc2 = 1.0 - ADAM_BETA2.powi(self.t);
                for (((p, &g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    let g = g + wd * *p;
                    *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                    *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                    *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = [1.0, -1.0];
        let mut opt = Optimizer::new(OptimizerKind::Adam, 2, 0.0);
        opt.step(p.iter_mut(), &[0.5, -3.0], 0.01);
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((p[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn sgd_minimizes_quadratic() {
        let mut p = [4.0];
        let mut opt = Optimizer::new(OptimizerKind::Sgd, 1, 0.0);
        for _ in 0..200 {
            let g = [2.0 * p[0]];
            opt.step(p.iter_mut(), &g, 0.05);
        }
        assert!(p[0].abs() < 1e-6);
    }
}
