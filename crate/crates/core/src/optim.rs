//! First-order optimizers over lists of parameter tensors.
//!
//! Gradients arrive as one flat vector per parameter, in the same order as
//! [`Parameterized::params_mut`](crate::networks::Parameterized).

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Rmsprop,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    /// RMSProp decay; unused otherwise.
    pub alpha: f64,
    pub eps: f64,
    /// Global-norm clip per parameter group; 0 disables clipping.
    pub max_grad_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::Rmsprop,
            learning_rate: 7e-4,
            alpha: 0.99,
            eps: 1e-5,
            max_grad_norm: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self, prefix: &str) -> std::result::Result<(), (String, String)> {
        let bad = |f: &str, m: &str| Err((format!("{prefix}.{f}"), m.to_string()));
        if !(self.learning_rate >= 0.0) {
            return bad("learning_rate", "must be non-negative");
        }
        if !(0.0..1.0).contains(&self.alpha) {
            return bad("alpha", "must lie in [0, 1)");
        }
        if !(self.eps > 0.0) {
            return bad("eps", "must be positive");
        }
        if !(self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm", "must be non-negative");
        }
        Ok(())
    }
}

const ADAM_B1: f64 = 0.9;
const ADAM_B2: f64 = 0.999;

#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: OptimizerConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    steps: u64,
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` in place so their joint norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Optimizer {
            config,
            first: Vec::new(),
            second: Vec::new(),
            steps: 0,
        }
    }

    pub fn sgd(learning_rate: f64) -> Self {
        Self::new(OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate,
            max_grad_norm: 0.0,
            ..Default::default()
        })
    }

    pub fn adam(learning_rate: f64) -> Self {
        Self::new(OptimizerConfig {
            kind: OptimizerKind::Adam,
            learning_rate,
            eps: 1e-8,
            max_grad_norm: 0.0,
            ..Default::default()
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Moves parameters along `+grads` (maximisation).
    pub fn ascend(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        self.apply(params, grads, 1.0)
    }

    /// Moves parameters along `−grads` (minimisation).
    pub fn descend(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>]) -> Result<()> {
        self.apply(params, grads, -1.0)
    }

    fn apply(&mut self, params: Vec<&mut Tensor>, grads: &[Vec<f64>], sign: f64) -> Result<()> {
        if params.len() != grads.len() {
            return contract(format!("{} parameters but {} gradients", params.len(), grads.len()));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.numel() != g.len() {
                return contract(format!("gradient of length {} for parameter of {} values", g.len(), p.numel()));
            }
        }
        if self.first.is_empty() {
            self.first = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.second = self.first.clone();
        }
        let mut grads = grads.to_vec();
        clip_global_norm(&mut grads, self.config.max_grad_norm);
        self.steps += 1;
        let c = self.config;
        let lr = c.learning_rate * sign;
        for (k, (p, g)) in params.into_iter().zip(&grads).enumerate() {
            let data = p.data_mut();
            match c.kind {
                OptimizerKind::Sgd => {
                    for (w, gi) in data.iter_mut().zip(g) {
                        *w += lr * gi;
                    }
                }
                OptimizerKind::Rmsprop => {
                    let sq = &mut self.second[k];
                    for ((w, gi), s) in data.iter_mut().zip(g).zip(sq.iter_mut()) {
                        *s = c.alpha * *s + (1.0 - c.alpha) * gi * gi;
                        *w += lr * gi / (s.sqrt() + c.eps);
                    }
                }
                OptimizerKind::Adam => {
                    let t = self.steps as i32;
                    let bc1 = 1.0 - ADAM_B1.powi(t);
                    let bc2 = 1.0 - ADAM_B2.powi(t);
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (((w, gi), mi), vi) in data.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = ADAM_B1 * *mi + (1.0 - ADAM_B1) * gi;
                        *vi = ADAM_B2 * *vi + (1.0 - ADAM_B2) * gi * gi;
                        *w += lr * (*mi / bc1) / ((*vi / bc2).sqrt() + c.eps);
                    }
                }
            }
        }
        Ok(())
    }
}
