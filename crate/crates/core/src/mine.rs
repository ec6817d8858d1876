//! Mutual information estimation with a trained statistics network.
//!
//! The batch estimate for pairs `(x_i, z_i)` and a shuffle `σ` is
//! `mean_i T(x_i, z_i) − ln mean_i exp T(x_i, z_σ(i))`, in nats.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::networks::{collect_grads, EncoderParams, Noise, Parameterized, PolicyValueParams, StatisticsNetParams};
use crate::optim::{Optimizer, OptimizerConfig, OptimizerKind};
use crate::rl::{a2c_objective, RlCoefficients};
use crate::rng::{self, StreamRng};
use crate::tensor::{Tape, Tensor, Var};

/// Paired samples, `x` is `n × d_x` and `z` is `n × d_z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub x: Tensor,
    pub z: Tensor,
}

impl PairBatch {
    pub fn new(x: Tensor, z: Tensor) -> Result<Self> {
        if x.shape().len() != 2 || z.shape().len() != 2 || x.rows() != z.rows() {
            return Err(Error::Dimension {
                op: "pair_batch",
                lhs: x.shape().to_vec(),
                rhs: z.shape().to_vec(),
            });
        }
        Ok(PairBatch { x, z })
    }

    pub fn from_rows(xs: &[Vec<f64>], zs: &[Vec<f64>]) -> Result<Self> {
        if xs.is_empty() || xs.len() != zs.len() {
            return contract(format!("{} x rows vs {} z rows", xs.len(), zs.len()));
        }
        let (dx, dz) = (xs[0].len(), zs[0].len());
        if xs.iter().any(|r| r.len() != dx) || zs.iter().any(|r| r.len() != dz) {
            return contract("pair rows have inconsistent widths");
        }
        Self::new(
            Tensor::new(vec![xs.len(), dx], xs.concat())?,
            Tensor::new(vec![zs.len(), dz], zs.concat())?,
        )
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_x(&self) -> usize {
        self.x.cols()
    }

    pub fn d_z(&self) -> usize {
        self.z.cols()
    }

    pub fn select(&self, idx: &[usize]) -> PairBatch {
        let pick = |t: &Tensor| {
            let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
            Tensor::new(vec![idx.len(), t.cols()], data).expect("row selection keeps the width")
        };
        PairBatch {
            x: pick(&self.x),
            z: pick(&self.z),
        }
    }
}

fn check_perm(perm: &[usize], n: usize) -> Result<()> {
    let mut seen = vec![false; n];
    if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
        return contract("shuffle is not a permutation of the batch");
    }
    Ok(())
}

/// Builds the estimate on `tape` for bound statistics over `x`, `z` vars.
fn dv_bound<'t>(
    eta: &crate::networks::BoundStatistics<'t>,
    x: &Var<'t>,
    z: &Var<'t>,
    perm: &[usize],
) -> Result<Var<'t>> {
    let n = perm.len();
    let joint = eta.forward(x, z)?;
    let marginal = eta.forward(x, &z.select_rows(perm)?)?;
    Ok(joint.mean().sub(&marginal.log_sum_exp().add_scalar(-(n as f64).ln()))?)
}

/// Estimate with an explicit shuffle `perm` of the `z` rows.
pub fn mine_estimate_with(eta: &StatisticsNetParams, pairs: &PairBatch, perm: &[usize]) -> Result<f64> {
    if pairs.len() < 2 {
        return contract(format!("need at least 2 pairs, got {}", pairs.len()));
    }
    check_perm(perm, pairs.len())?;
    let tape = Tape::new();
    let bound = eta.bind(&tape);
    let est = dv_bound(&bound, &tape.constant(&pairs.x), &tape.constant(&pairs.z), perm)?;
    Ok(est.item())
}

/// Estimate with a uniformly random shuffle (fixed points allowed).
pub fn mine_estimate<R: Rng + ?Sized>(eta: &StatisticsNetParams, pairs: &PairBatch, rng: &mut R) -> Result<f64> {
    let perm = rng::permutation(rng, pairs.len());
    mine_estimate_with(eta, pairs, &perm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeConfig {
    /// Trainer updates between probes.
    pub interval: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub reinitialize: bool,
    /// Number of (X, Z) pairs collected per probe; minibatches of
    /// `batch_size` are drawn from it and the final estimate uses all of it.
    pub pool_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            interval: 2000,
            batch_size: 64,
            steps: 256,
            learning_rate: 0.0007,
            optimizer: OptimizerKind::Adam,
            reinitialize: true,
            pool_size: 64,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        let bad = |f: &str, m: &str| Err((format!("probe.{f}"), m.to_string()));
        if self.interval == 0 {
            return bad("interval", "must be at least 1");
        }
        if self.batch_size < 2 {
            return bad("batch_size", "must be at least 2");
        }
        if self.pool_size < 2 {
            return bad("pool_size", "must be at least 2");
        }
        if self.steps == 0 {
            return bad("steps", "must be at least 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate", "must be positive");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiRecord {
    /// Trainer update at which the probe ran.
    pub step: u64,
    pub mi_nats: f64,
    pub probe_steps: usize,
    pub batch_size: usize,
}

const ETA_INIT_TAG: u64 = 0xe7a;
const PROBE_TAG: u64 = 0x960be;

/// Trains a statistics network on `pairs` and reports the final estimate
/// over the whole pool. With `reinitialize` (or no `previous`), η is drawn
/// from a stream derived from `seed` alone.
pub fn train_probe(
    config: &ProbeConfig,
    pairs: &PairBatch,
    hidden: &[usize],
    seed: u64,
    step: u64,
    previous: Option<&StatisticsNetParams>,
) -> Result<(StatisticsNetParams, MiRecord)> {
    if pairs.len() < 2 {
        return contract(format!("need at least 2 pairs, got {}", pairs.len()));
    }
    let mut eta = match previous {
        Some(p) if !config.reinitialize => p.clone(),
        _ => StatisticsNetParams::new(&mut rng::stream(seed, ETA_INIT_TAG), pairs.d_x(), pairs.d_z(), hidden),
    };
    let mut r = rng::stream(seed, PROBE_TAG);
    let mut opt = Optimizer::new(OptimizerConfig {
        kind: config.optimizer,
        learning_rate: config.learning_rate,
        eps: 1e-8,
        max_grad_norm: 0.0,
        ..Default::default()
    });
    let n = config.batch_size.min(pairs.len());
    for _ in 0..config.steps {
        let batch = if n == pairs.len() {
            pairs.clone()
        } else {
            let idx = rng::permutation(&mut r, pairs.len());
            pairs.select(&idx[..n])
        };
        let perm = rng::permutation(&mut r, n);
        let tape = Tape::new();
        let bound = eta.bind(&tape);
        let est = dv_bound(&bound, &tape.constant(&batch.x), &tape.constant(&batch.z), &perm)?;
        tape.backward(est)?;
        let grads = collect_grads(&bound.vars());
        if grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                term: "statistics network gradient".into(),
            });
        }
        opt.ascend(eta.params_mut(), &grads)?;
    }
    let mi = mine_estimate(&eta, pairs, &mut r)?;
    Ok((
        eta,
        MiRecord {
            step,
            mi_nats: mi,
            probe_steps: config.steps,
            batch_size: n,
        },
    ))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EcTrace {
    pub peak_index: usize,
    pub peak_step: u64,
    pub peak_value: f64,
    pub final_value: f64,
    /// The peak precedes the final record and the trace falls after it.
    pub compression_observed: bool,
}

impl EcTrace {
    pub fn verdict(&self) -> &'static str {
        if self.compression_observed {
            "extraction then compression"
        } else {
            "no compression observed"
        }
    }
}

/// Locates the maximum of an MI trace (first occurrence on ties).
pub fn ec_trace(records: &[MiRecord]) -> Result<EcTrace> {
    if records.len() < 3 {
        return contract(format!("trace needs at least 3 records, got {}", records.len()));
    }
    let mut peak = 0;
    for (i, r) in records.iter().enumerate() {
        if r.mi_nats > records[peak].mi_nats {
            peak = i;
        }
    }
    let last = records.len() - 1;
    let final_value = records[last].mi_nats;
    Ok(EcTrace {
        peak_index: peak,
        peak_step: records[peak].step,
        peak_value: records[peak].mi_nats,
        final_value,
        compression_observed: peak < last && final_value < records[peak].mi_nats,
    })
}

/// `−β·mean T̂(x_i, z_i) + β·ln mean_i exp(T̂(x_i, z_σ(i)) + J_σ(i)/β)` from
/// plain values: `joint[i]`, `shuffled[i]` (already paired with `z_σ(i)`)
/// and `j_shuffled[i] = J_σ(i)`.
pub fn mine_direct_value(joint: &[f64], shuffled: &[f64], j_shuffled: &[f64], beta: f64) -> f64 {
    let n = joint.len() as f64;
    let inner: Vec<f64> = shuffled.iter().zip(j_shuffled).map(|(t, j)| t + j / beta).collect();
    -beta * joint.iter().sum::<f64>() / n + beta * (crate::tensor::log_sum_exp(&inner) - n.ln())
}

#[derive(Clone, Debug)]
pub struct MineDirectStep {
    /// Objective before the update.
    pub objective: f64,
    pub perm: Vec<usize>,
    /// Particles used (one per state), row-major `n × d_z`.
    pub z: Tensor,
    pub eta_grad_norm: f64,
}

/// One simultaneous step: η descends the objective, θ and φ ascend it,
/// all with plain gradient steps of size `learning_rate`.
#[allow(clippy::too_many_arguments)]
pub fn mine_direct_update(
    theta: &mut PolicyValueParams,
    phi: &mut EncoderParams,
    eta: &mut StatisticsNetParams,
    observations: &[f64],
    actions: &[usize],
    returns: &[f64],
    coeffs: &RlCoefficients,
    beta: f64,
    learning_rate: f64,
    noise: &mut StreamRng,
) -> Result<MineDirectStep> {
    if !(beta > 0.0) {
        return contract("beta must be positive");
    }
    let n = actions.len();
    if n < 2 {
        return contract(format!("need at least 2 states, got {n}"));
    }
    let tape = Tape::new();
    let enc = phi.bind(&tape);
    let heads = theta.bind(&tape);
    let stats = eta.bind(&tape);
    let z = enc.encode(&tape, observations, 1, Noise::Sampled(noise))?;
    let j = a2c_objective(&tape, &heads, &z, 1, actions, returns, coeffs)?;
    let perm = rng::permutation(noise, n);
    let x = tape.constant(&Tensor::new(vec![n, phi.d_x], observations.to_vec())?);
    let joint = stats.forward(&x, &z)?;
    let shuffled = stats.forward(&x, &z.select_rows(&perm)?)?;
    let j_shuffled = j.per_row.reshape(vec![n, 1])?.select_rows(&perm)?.reshape(vec![n])?;
    let inner = shuffled.add(&j_shuffled.scale(1.0 / beta))?;
    let objective = joint
        .mean()
        .scale(-beta)
        .add(&inner.log_sum_exp().add_scalar(-(n as f64).ln()).scale(beta))?;
    let value = objective.item();
    if !value.is_finite() {
        return Err(Error::NonFinite {
            term: "mine-direct objective".into(),
        });
    }
    tape.backward(objective)?;
    let g_eta = collect_grads(&stats.vars());
    let g_theta = collect_grads(&heads.vars());
    let g_phi = collect_grads(&enc.vars());
    for (name, g) in [("eta", &g_eta), ("theta", &g_theta), ("phi", &g_phi)] {
        if g.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                term: format!("mine-direct {name} gradient"),
            });
        }
    }
    let eta_grad_norm = crate::optim::global_norm(&g_eta);
    let z_val = z.value();
    Optimizer::sgd(learning_rate).descend(eta.params_mut(), &g_eta)?;
    Optimizer::sgd(learning_rate).ascend(theta.params_mut(), &g_theta)?;
    Optimizer::sgd(learning_rate).ascend(phi.params_mut(), &g_phi)?;
    Ok(MineDirectStep {
        objective: value,
        perm,
        z: z_val,
        eta_grad_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gaussian_pairs(seed: u64, n: usize, rho: f64) -> PairBatch {
        let mut r = rng::stream(seed, 1);
        let mut xs = Vec::new();
        let mut zs = Vec::new();
        for _ in 0..n {
            let a = rng::normal(&mut r);
            let b = rng::normal(&mut r);
            xs.push(vec![a]);
            zs.push(vec![rho * a + (1.0 - rho * rho).sqrt() * b]);
        }
        PairBatch::from_rows(&xs, &zs).unwrap()
    }

    #[test]
    fn zero_statistic_gives_zero() {
        let eta = StatisticsNetParams::zeros(1, 1, &[8]);
        let pairs = gaussian_pairs(0, 16, 0.5);
        let est = mine_estimate(&eta, &pairs, &mut rng::stream(0, 0)).unwrap();
        assert_eq!(est, 0.0);
    }

    #[test]
    fn constant_z_gives_zero_for_z_only_statistic() {
        // T depends on z only: zero the x-columns of the first layer
        let mut eta = StatisticsNetParams::new(&mut rng::stream(1, 0), 2, 1, &[8]);
        let w = eta.net.layers[0].weight.data_mut();
        for i in 0..2 {
            for j in 0..8 {
                w[i * 8 + j] = 0.0;
            }
        }
        let xs: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64, -(i as f64)]).collect();
        let zs = vec![vec![0.3]; 10];
        let pairs = PairBatch::from_rows(&xs, &zs).unwrap();
        let est = mine_estimate(&eta, &pairs, &mut rng::stream(2, 0)).unwrap();
        assert!(est.abs() < 1e-12);
    }

    #[test]
    fn estimate_needs_two_pairs() {
        let eta = StatisticsNetParams::zeros(1, 1, &[4]);
        let one = PairBatch::from_rows(&[vec![0.0]], &[vec![0.0]]).unwrap();
        assert!(mine_estimate(&eta, &one, &mut rng::stream(0, 0)).is_err());
    }

    #[test]
    fn large_statistics_do_not_overflow() {
        let mut eta = StatisticsNetParams::zeros(1, 1, &[2]);
        eta.net.layers[1].bias.data_mut()[0] = 1e4;
        let pairs = gaussian_pairs(3, 8, 0.0);
        let est = mine_estimate(&eta, &pairs, &mut rng::stream(0, 0)).unwrap();
        assert!(est.abs() < 1e-9);
    }

    #[test]
    fn joint_permutation_invariance() {
        let eta = StatisticsNetParams::new(&mut rng::stream(4, 0), 1, 1, &[8]);
        let pairs = gaussian_pairs(5, 12, 0.7);
        let mut r = rng::stream(6, 0);
        let sigma = rng::permutation(&mut r, 12);
        let pi = rng::permutation(&mut r, 12);
        let moved = pairs.select(&pi);
        // conjugate shuffle so the same (x, z) pairs are formed
        let mut inv = vec![0; 12];
        for (k, &p) in pi.iter().enumerate() {
            inv[p] = k;
        }
        let conj: Vec<usize> = pi.iter().map(|&p| inv[sigma[p]]).collect();
        let a = mine_estimate_with(&eta, &pairs, &sigma).unwrap();
        let b = mine_estimate_with(&eta, &moved, &conj).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn probe_defaults() {
        let c = ProbeConfig::default();
        assert_eq!((c.batch_size, c.steps, c.learning_rate, c.interval), (64, 256, 0.0007, 2000));
    }

    #[test]
    fn probe_is_seeded_and_reinit_ignores_history() {
        let pairs = gaussian_pairs(7, 64, 0.5);
        let cfg = ProbeConfig {
            steps: 20,
            ..Default::default()
        };
        let (eta1, a) = train_probe(&cfg, &pairs, &[16], 11, 0, None).unwrap();
        let (_, b) = train_probe(&cfg, &pairs, &[16], 11, 0, Some(&eta1)).unwrap();
        let (_, c) = train_probe(&cfg, &pairs, &[16], 11, 0, None).unwrap();
        assert_eq!(a, c);
        assert_eq!(a, b);
    }

    #[test]
    fn independent_data_stays_near_zero() {
        let pairs = gaussian_pairs(8, 512, 0.0);
        let cfg = ProbeConfig {
            steps: 300,
            learning_rate: 1e-3,
            pool_size: 512,
            ..Default::default()
        };
        let (_, rec) = train_probe(&cfg, &pairs, &[32], 3, 0, None).unwrap();
        assert!(rec.mi_nats < 0.05, "{}", rec.mi_nats);
        assert!(rec.mi_nats <= (512f64).ln() + 0.1);
    }

    fn rec(v: &[f64]) -> Vec<MiRecord> {
        v.iter()
            .enumerate()
            .map(|(i, &m)| MiRecord {
                step: 10 * i as u64,
                mi_nats: m,
                probe_steps: 1,
                batch_size: 2,
            })
            .collect()
    }

    #[test]
    fn trace_shapes() {
        let t = ec_trace(&rec(&[0.1, 0.2, 0.3])).unwrap();
        assert_eq!(t.peak_index, 2);
        assert_eq!(t.verdict(), "no compression observed");
        let t = ec_trace(&rec(&[0.1, 0.5, 0.3])).unwrap();
        assert_eq!((t.peak_index, t.peak_step), (1, 10));
        assert!(t.final_value < t.peak_value && t.compression_observed);
        assert!(ec_trace(&rec(&[0.1, 0.2])).is_err());
    }

    #[test]
    fn direct_value_formula() {
        // β = 1, no reward: −mean(T) + ln mean exp(T_shuffled)
        let v = mine_direct_value(&[1.0, 2.0], &[0.0, 0.0], &[0.0, 0.0], 1.0);
        assert!((v + 1.5).abs() < 1e-15);
    }
}
