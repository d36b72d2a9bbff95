use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
    SgdMomentum,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const SGD_MOMENTUM: f64 = 0.9;

/// Per-parameter optimizer state.
#[derive(Debug, Clone)]
pub struct Optimizer<F> {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<F>>,
    second: Vec<Vec<F>>,
}

impl<F: Real> Optimizer<F> {
    pub fn new(kind: OptimizerKind, lr: f64, params: &[Tensor<F>]) -> Self {
        let zeros = || params.iter().map(|p| vec![F::zero(); p.len()]).collect();
        Optimizer {
            kind,
            lr,
            step: 0,
            first: zeros(),
            second: match kind {
                OptimizerKind::Adam => zeros(),
                OptimizerKind::SgdMomentum => Vec::new(),
            },
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Adam: bias-corrected moments; SGD: heavy-ball
    /// velocity `v = mu v + g`, `p -= lr v`.
    pub fn step(&mut self, params: &mut [Tensor<F>], grads: &[Tensor<F>]) -> Result<()> {
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Contract(format!(
                "optimizer tracks {} tensors, got {} parameters and {} gradients",
                self.first.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape("optimizer_step", p.shape(), g.shape()));
            }
        }
        self.step += 1;
        let lr = F::from_f64(self.lr);
        match self.kind {
            OptimizerKind::Adam => {
                let (b1, b2) = (F::from_f64(ADAM_BETA1), F::from_f64(ADAM_BETA2));
                let c1 = F::from_f64(1.0 - ADAM_BETA1.powi(self.step as i32));
                let c2 = F::from_f64(1.0 - ADAM_BETA2.powi(self.step as i32));
                let eps = F::from_f64(ADAM_EPS);
                let one = F::one();
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = b1 * m[j] + (one - b1) * gj;
                        v[j] = b2 * v[j] + (one - b2) * gj * gj;
                        let m_hat = m[j] / c1;
                        let v_hat = v[j] / c2;
                        *x = *x - lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                let mu = F::from_f64(SGD_MOMENTUM);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let vel = &mut self.first[i];
                    for (j, (x, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        vel[j] = mu * vel[j] + gj;
                        *x = *x - lr * vel[j];
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64) -> Vec<Tensor<f64>> {
        vec![Tensor::from_f64(vec![1], &[v]).unwrap()]
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        for kind in [OptimizerKind::Adam, OptimizerKind::SgdMomentum] {
            let mut p = scalar_param(0.7);
            let mut opt = Optimizer::new(kind, 0.1, &p);
            opt.step(&mut p, &[Tensor::zeros(vec![1])]).unwrap();
            assert_eq!(p[0].data(), &[0.7]);
        }
    }

    #[test]
    fn sgd_unit_gradient() {
        let mut p = scalar_param(1.0);
        let mut opt = Optimizer::new(OptimizerKind::SgdMomentum, 0.1, &p);
        opt.step(&mut p, &[Tensor::full(vec![1], 1.0)]).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // m1 = (1-b1) g, v1 = (1-b2) g^2; bias correction gives m_hat = g,
        // v_hat = g^2, so the step is lr * g / (|g| + eps).
        let g = 0.37;
        let lr = 1e-3;
        let mut p = scalar_param(0.5);
        let mut opt = Optimizer::new(OptimizerKind::Adam, lr, &p);
        opt.step(&mut p, &[Tensor::full(vec![1], g)]).unwrap();
        let m1 = (1.0 - ADAM_BETA1) * g;
        let v1 = (1.0 - ADAM_BETA2) * g * g;
        let expected = 0.5 - lr * (m1 / (1.0 - ADAM_BETA1)) / ((v1 / (1.0 - ADAM_BETA2)).sqrt() + ADAM_EPS);
        assert!((p[0].data()[0] - expected).abs() < 1e-15);
        assert!((p[0].data()[0] - (0.5 - lr * g / (g + ADAM_EPS))).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = scalar_param(1.0);
        let mut opt = Optimizer::new(OptimizerKind::Adam, 0.1, &p);
        assert!(opt.step(&mut p, &[Tensor::zeros(vec![2])]).is_err());
    }
}
