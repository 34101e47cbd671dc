use serde::{Deserialize, Serialize};

use crate::autodiff::Array;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd {
        #[serde(default)]
        momentum: f64,
    },
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig::Sgd { momentum: 0.0 }
    }
}

impl OptimizerConfig {
    pub fn adam() -> Self {
        OptimizerConfig::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// First-order optimizer over a fixed list of tensors.
#[derive(Debug, Clone)]
pub struct Optimizer<S> {
    config: OptimizerConfig,
    first: Vec<Array<S>>,
    second: Vec<Array<S>>,
    steps: i32,
}

impl<S: Scalar> Optimizer<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    /// Applies one update. A zero learning rate leaves every tensor and the
    /// optimizer state untouched.
    pub fn step(&mut self, params: Vec<&mut Array<S>>, grads: &[Array<S>], lr: f64) {
        debug_assert_eq!(params.len(), grads.len());
        if lr == 0.0 {
            return;
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| Array::zeros(g.shape())).collect();
            if matches!(self.config, OptimizerConfig::Adam { .. }) {
                self.second = grads.iter().map(|g| Array::zeros(g.shape())).collect();
            }
        }
        self.steps += 1;
        let lr = S::of(lr);
        match self.config {
            OptimizerConfig::Sgd { momentum } => {
                let mu = S::of(momentum);
                for ((p, g), vel) in params.into_iter().zip(grads).zip(&mut self.first) {
                    for ((x, &gi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(vel.data_mut()) {
                        if momentum == 0.0 {
                            *x -= lr * gi;
                        } else {
                            *vi = mu * *vi + gi;
                            *x -= lr * *vi;
                        }
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                let (b1, b2, eps) = (S::of(beta1), S::of(beta2), S::of(eps));
                let c1 = S::one() - b1.powi(self.steps);
                let c2 = S::one() - b2.powi(self.steps);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first)
                    .zip(&mut self.second)
                {
                    let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut());
                    for (((x, &gi), mi), vi) in it {
                        *mi = b1 * *mi + (S::one() - b1) * gi;
                        *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                        let m_hat = *mi / c1;
                        let v_hat = *vi / c2;
                        *x -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgd_step_is_gradient_descent() {
        let mut p = Array::vector(vec![1.0f64, -2.0]);
        let g = Array::vector(vec![0.5, 0.25]);
        Optimizer::new(OptimizerConfig::default()).step(vec![&mut p], &[g], 0.1);
        assert_eq!(p.data(), &[0.95, -2.025]);
    }

    #[test]
    fn momentum_accumulates_velocity() {
        let mut p = Array::vector(vec![0.0f64]);
        let g = Array::vector(vec![1.0]);
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { momentum: 0.5 });
        opt.step(vec![&mut p], std::slice::from_ref(&g), 1.0);
        opt.step(vec![&mut p], std::slice::from_ref(&g), 1.0);
        assert_eq!(p.data(), &[-2.5]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = Array::vector(vec![0.0f64, 0.0]);
        let g = Array::vector(vec![3.0, -0.01]);
        Optimizer::new(OptimizerConfig::adam()).step(vec![&mut p], &[g], 0.1);
        assert!((p.data()[0] + 0.1).abs() < 1e-6);
        assert!((p.data()[1] - 0.1).abs() < 1e-4);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let mut p = Array::vector(vec![-0.0f64, 1.5]);
        let before = p.clone();
        let mut opt = Optimizer::new(OptimizerConfig::adam());
        opt.step(vec![&mut p], &[Array::vector(vec![1.0, 1.0])], 0.0);
        assert!(p.bits_eq(&before));
    }

    #[test]
    fn config_parses_from_toml() {
        let c: OptimizerConfig = toml::from_str("kind = \"adam\"\nbeta1 = 0.8").unwrap();
        assert_eq!(
            c,
            OptimizerConfig::Adam { beta1: 0.8, beta2: 0.999, eps: 1e-8 }
        );
        let s: OptimizerConfig = toml::from_str("kind = \"sgd\"").unwrap();
        assert_eq!(s, OptimizerConfig::default());
    }
}
