//! Actor-critic objective over representation particles.
//!
//! `J(Z;θ) = log π(a|Z)·(R − V̄) − α1 (R − V(Z))² + α2 H(π(·|Z))`, averaged
//! over every state and every particle of that state. `V̄` is the mean value
//! over the state's particles and is held constant, as is the whole
//! advantage factor in the policy term.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::networks::{collect_grads, BoundPolicyValue};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RlCoefficients {
    pub gamma: f64,
    /// Bootstrap horizon `n`: the return sums `n − 1` rewards before
    /// bootstrapping.
    pub n_step: usize,
    /// Value-regression weight α1.
    pub value_coef: f64,
    /// Entropy bonus weight α2.
    pub entropy_coef: f64,
}

impl Default for RlCoefficients {
    fn default() -> Self {
        RlCoefficients {
            gamma: 0.99,
            n_step: 5,
            value_coef: 0.5,
            entropy_coef: 0.01,
        }
    }
}

impl RlCoefficients {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(("rl.gamma".into(), "must lie in [0, 1)".into()));
        }
        if self.n_step == 0 {
            return Err(("rl.n_step".into(), "must be at least 1".into()));
        }
        if !(self.value_coef >= 0.0) {
            return Err(("rl.value_coef".into(), "must be non-negative".into()));
        }
        if !(self.entropy_coef >= 0.0) {
            return Err(("rl.entropy_coef".into(), "must be non-negative".into()));
        }
        Ok(())
    }
}

/// How a transition ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepEnd {
    Continue,
    /// True terminal state: no bootstrap.
    Terminal,
    /// Time limit: the episode stops but the successor still has value.
    Truncated,
}

impl StepEnd {
    pub fn is_done(self) -> bool {
        self != StepEnd::Continue
    }
}

/// Bootstrapped returns for one contiguous trajectory segment.
///
/// `bootstrap_values[t]` is the value of the successor observation of step
/// `t`. Each return sums up to `max(n − 1, 1)` rewards, stops at the first
/// episode end, and adds the discounted successor value unless that end is
/// a true terminal.
pub fn nstep_returns(
    rewards: &[f64],
    ends: &[StepEnd],
    bootstrap_values: &[f64],
    gamma: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let len = rewards.len();
    if ends.len() != len || bootstrap_values.len() != len {
        return Err(Error::Dimension {
            op: "nstep_returns",
            lhs: vec![len],
            rhs: vec![ends.len(), bootstrap_values.len()],
        });
    }
    if n == 0 {
        return contract("n-step horizon must be at least 1");
    }
    let window = n.saturating_sub(1).max(1);
    let mut out = Vec::with_capacity(len);
    for t in 0..len {
        let mut ret = 0.0;
        let mut disc = 1.0;
        let mut k = 0;
        loop {
            let i = t + k;
            ret += disc * rewards[i];
            disc *= gamma;
            match ends[i] {
                StepEnd::Terminal => break,
                StepEnd::Truncated => {
                    ret += disc * bootstrap_values[i];
                    break;
                }
                StepEnd::Continue if k + 1 == window || i + 1 == len => {
                    ret += disc * bootstrap_values[i];
                    break;
                }
                StepEnd::Continue => k += 1,
            }
        }
        out.push(ret);
    }
    Ok(out)
}

/// One update's worth of transitions from `num_envs` parallel copies, each
/// contributing `horizon` consecutive steps. Index `k·horizon + t` is step
/// `t` of env `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    pub obs_dim: usize,
    pub num_envs: usize,
    pub horizon: usize,
    pub observations: Vec<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    pub ends: Vec<StepEnd>,
    pub bootstrap_values: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn observation(&self, i: usize) -> &[f64] {
        &self.observations[i * self.obs_dim..(i + 1) * self.obs_dim]
    }

    pub fn check(&self) -> Result<()> {
        let n = self.num_envs * self.horizon;
        let ok = self.actions.len() == n
            && self.rewards.len() == n
            && self.ends.len() == n
            && self.bootstrap_values.len() == n
            && self.returns.len() == n
            && self.observations.len() == n * self.obs_dim;
        if !ok {
            return Err(Error::Dimension {
                op: "rollout_batch",
                lhs: vec![n],
                rhs: vec![
                    self.actions.len(),
                    self.rewards.len(),
                    self.ends.len(),
                    self.returns.len(),
                ],
            });
        }
        if let Some(r) = self.returns.iter().find(|r| !r.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("rollout return {r}"),
            });
        }
        Ok(())
    }

    /// Recomputes the returns segment by segment from rewards, ends and
    /// bootstrap values.
    pub fn compute_returns(&mut self, gamma: f64, n: usize) -> Result<()> {
        let mut out = Vec::with_capacity(self.rewards.len());
        for k in 0..self.num_envs {
            let s = k * self.horizon..(k + 1) * self.horizon;
            out.extend(nstep_returns(
                &self.rewards[s.clone()],
                &self.ends[s.clone()],
                &self.bootstrap_values[s],
                gamma,
                n,
            )?);
        }
        self.returns = out;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct A2cDiagnostics {
    /// Mean of `log π(a|Z)·(R − V̄)`.
    pub policy_term: f64,
    /// Mean of `(R − V(Z))²` (before the α1 weight).
    pub value_loss: f64,
    pub entropy: f64,
    pub objective: f64,
}

pub struct A2cObjective<'t> {
    /// Scalar `J` (mean aggregation over states and particles).
    pub objective: Var<'t>,
    /// `J` of every row before averaging, `[B·m]`.
    pub per_row: Var<'t>,
    pub rows: usize,
    pub diagnostics: A2cDiagnostics,
}

/// Builds `J` on the tape for particles `z` (`[B·m, d_z]`, rows grouped by
/// state) with one action and return per state.
pub fn a2c_objective<'t>(
    tape: &'t Tape,
    theta: &BoundPolicyValue<'t>,
    z: &Var<'t>,
    m: usize,
    actions: &[usize],
    returns: &[f64],
    coeffs: &RlCoefficients,
) -> Result<A2cObjective<'t>> {
    let b = actions.len();
    if b == 0 {
        return contract("empty batch");
    }
    if m == 0 {
        return contract("particle count must be at least 1");
    }
    if returns.len() != b || z.shape().first() != Some(&(b * m)) {
        return Err(Error::Dimension {
            op: "a2c_objective",
            lhs: vec![b, m],
            rhs: z.shape(),
        });
    }
    let n = b * m;
    let (logp, values) = theta.forward(z)?;
    let v = values.data();
    let mut adv = Vec::with_capacity(n);
    let mut rep_returns = Vec::with_capacity(n);
    let mut rep_actions = Vec::with_capacity(n);
    for t in 0..b {
        let baseline = v[t * m..(t + 1) * m].iter().sum::<f64>() / m as f64;
        for _ in 0..m {
            adv.push(returns[t] - baseline);
            rep_returns.push(returns[t]);
            rep_actions.push(actions[t]);
        }
    }
    let adv = tape.constant(&Tensor::vector(adv));
    let rets = tape.constant(&Tensor::vector(rep_returns));

    let policy_rows = logp.gather_last(&rep_actions)?.mul(&adv)?;
    let value_rows = rets.sub(&values)?.square();
    let entropy_rows = logp.exp()?.mul(&logp)?.sum_last().neg();
    let per_row = policy_rows
        .sub(&value_rows.scale(coeffs.value_coef))?
        .add(&entropy_rows.scale(coeffs.entropy_coef))?;
    let objective = per_row.mean();
    let mean = |v: &Var<'_>| v.data().iter().sum::<f64>() / n as f64;
    let diagnostics = A2cDiagnostics {
        policy_term: mean(&policy_rows),
        value_loss: mean(&value_rows),
        entropy: mean(&entropy_rows),
        objective: objective.item(),
    };
    Ok(A2cObjective {
        objective,
        per_row,
        rows: n,
        diagnostics,
    })
}

/// `∂J/∂θ` for the bound heads. Clears previously accumulated gradients.
pub fn theta_gradient<'t>(objective: &Var<'t>, theta_vars: &[Var<'t>]) -> Result<Vec<Vec<f64>>> {
    let tape = objective.tape();
    tape.zero_grads();
    tape.backward(*objective)?;
    Ok(collect_grads(theta_vars))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::{Activation, Linear, Mlp, PolicyValueParams};

    #[test]
    fn zero_discount_returns_rewards() {
        let r = nstep_returns(&[1.0, 2.0, 3.0], &[StepEnd::Continue; 3], &[9.0; 3], 0.0, 5).unwrap();
        assert_eq!(r, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn worked_example() {
        let r = nstep_returns(
            &[1.0, 2.0],
            &[StepEnd::Continue, StepEnd::Continue],
            &[0.0, 3.0],
            0.99,
            3,
        )
        .unwrap();
        assert!((r[0] - 5.9203).abs() < 1e-12);
    }

    #[test]
    fn terminal_masks_bootstrap() {
        let r = nstep_returns(
            &[0.5, 7.0],
            &[StepEnd::Terminal, StepEnd::Continue],
            &[100.0, 100.0],
            0.99,
            5,
        )
        .unwrap();
        assert_eq!(r[0], 0.5);
        let trunc = nstep_returns(&[0.5], &[StepEnd::Truncated], &[2.0], 0.5, 5).unwrap();
        assert_eq!(trunc[0], 1.5);
    }

    #[test]
    fn misaligned_inputs() {
        assert!(matches!(
            nstep_returns(&[1.0], &[], &[0.0], 0.9, 2),
            Err(Error::Dimension { .. })
        ));
    }

    fn uniform_heads() -> PolicyValueParams {
        PolicyValueParams::zeros(2, 4, &[3])
    }

    #[test]
    fn entropy_of_uniform_policy() {
        let theta = uniform_heads();
        let tape = Tape::new();
        let b = theta.bind(&tape);
        let z = tape.constant(&Tensor::new(vec![3, 2], vec![0.1, 0.2, -1.0, 0.0, 0.5, 0.5]).unwrap());
        let coeffs = RlCoefficients {
            value_coef: 0.0,
            entropy_coef: 0.3,
            ..Default::default()
        };
        // value head is zero and returns are zero, so the advantage vanishes
        let j = a2c_objective(&tape, &b, &z, 1, &[0, 1, 2], &[0.0; 3], &coeffs).unwrap();
        assert!((j.diagnostics.entropy - 4f64.ln()).abs() < 1e-12);
        assert!((j.objective.item() - 0.3 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_fit_without_entropy_is_zero() {
        let mut theta = uniform_heads();
        theta.value.bias = Tensor::vector(vec![2.5]);
        let tape = Tape::new();
        let b = theta.bind(&tape);
        let z = tape.constant(&Tensor::zeros(vec![2, 2]));
        let coeffs = RlCoefficients {
            entropy_coef: 0.0,
            ..Default::default()
        };
        let j = a2c_objective(&tape, &b, &z, 1, &[0, 3], &[2.5, 2.5], &coeffs).unwrap();
        assert_eq!(j.objective.item(), 0.0);
    }

    #[test]
    fn single_transition_by_hand() {
        // no trunk: logits = z·W + b directly
        let theta = PolicyValueParams {
            trunk: Mlp {
                layers: vec![],
                activation: Activation::Tanh,
                activate_output: true,
            },
            policy: Linear {
                weight: Tensor::new(vec![2, 2], vec![1.0, -1.0, 0.5, 2.0]).unwrap(),
                bias: Tensor::vector(vec![0.1, 0.0]),
            },
            value: Linear {
                weight: Tensor::new(vec![2, 1], vec![0.3, -0.7]).unwrap(),
                bias: Tensor::vector(vec![0.2]),
            },
        };
        let z = [0.4, -0.6];
        let l0 = 0.4 * 1.0 + -0.6 * 0.5 + 0.1;
        let l1 = 0.4 * -1.0 + -0.6 * 2.0;
        let lse = (f64::exp(l0) + f64::exp(l1)).ln();
        let (lp0, lp1) = (l0 - lse, l1 - lse);
        let v = 0.4 * 0.3 + -0.6 * -0.7 + 0.2;
        let ret = 1.7;
        let (a1, a2) = (0.5, 0.01);
        let ent = -(lp0.exp() * lp0 + lp1.exp() * lp1);
        let expected = lp1 * (ret - v) - a1 * (ret - v) * (ret - v) + a2 * ent;

        let tape = Tape::new();
        let b = theta.bind(&tape);
        let zv = tape.constant(&Tensor::new(vec![1, 2], z.to_vec()).unwrap());
        let coeffs = RlCoefficients {
            value_coef: a1,
            entropy_coef: a2,
            ..Default::default()
        };
        let j = a2c_objective(&tape, &b, &zv, 1, &[1], &[ret], &coeffs).unwrap();
        assert!((j.objective.item() - expected).abs() < 1e-10);
    }

    #[test]
    fn empty_batch_rejected() {
        let theta = uniform_heads();
        let tape = Tape::new();
        let b = theta.bind(&tape);
        let z = tape.constant(&Tensor::zeros(vec![1, 2]));
        assert!(a2c_objective(&tape, &b, &z, 1, &[], &[], &RlCoefficients::default()).is_err());
    }

    #[test]
    fn coefficient_validation() {
        let c = RlCoefficients {
            gamma: 1.0,
            ..Default::default()
        };
        assert_eq!(c.validate().unwrap_err().0, "rl.gamma");
    }
}
