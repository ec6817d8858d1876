//! Exact finite-alphabet information-bottleneck computations.
//!
//! An instance fixes `P(X)`, an encoder table `P(Z|X)`, a reward table
//! `J(Z)` and `β`. Everything is evaluated in nats; normalisations run in
//! log space because `exp(J/β)` spans hundreds of orders of magnitude at
//! `β = 0.001`.

use rand::Rng;
use rand_distr::{Distribution, Exp1};
use serde::Serialize;

use crate::error::{contract, Result};
use crate::par::{self, Execution};
use crate::rng;
use crate::tensor::log_sum_exp;

const SIMPLEX_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteIbInstance {
    pub p_x: Vec<f64>,
    /// Row-stochastic `K_x × K_z` table.
    pub encoder: Vec<Vec<f64>>,
    pub reward: Vec<f64>,
    pub beta: f64,
}

fn check_simplex(p: &[f64], what: &str) -> Result<()> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return contract(format!("{what} has a negative or non-finite entry"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > SIMPLEX_TOL {
        return contract(format!("{what} sums to {s}, not 1"));
    }
    Ok(())
}

fn ln0(p: f64) -> f64 {
    if p > 0.0 {
        p.ln()
    } else {
        f64::NEG_INFINITY
    }
}

impl DiscreteIbInstance {
    pub fn new(p_x: Vec<f64>, encoder: Vec<Vec<f64>>, reward: Vec<f64>, beta: f64) -> Result<Self> {
        let inst = DiscreteIbInstance {
            p_x,
            encoder,
            reward,
            beta,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        if self.p_x.is_empty() || self.reward.is_empty() {
            return contract("instance alphabets must be nonempty");
        }
        if self.encoder.len() != self.p_x.len() {
            return contract(format!(
                "encoder has {} rows for {} states",
                self.encoder.len(),
                self.p_x.len()
            ));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return contract(format!("beta must be finite and non-negative, got {}", self.beta));
        }
        if self.reward.iter().any(|v| !v.is_finite()) {
            return contract("reward table has a non-finite entry");
        }
        check_simplex(&self.p_x, "P(X)")?;
        for (i, row) in self.encoder.iter().enumerate() {
            if row.len() != self.reward.len() {
                return contract(format!("encoder row {i} has length {}, expected {}", row.len(), self.reward.len()));
            }
            check_simplex(row, &format!("encoder row {i}"))?;
        }
        Ok(())
    }

    pub fn kx(&self) -> usize {
        self.p_x.len()
    }

    pub fn kz(&self) -> usize {
        self.reward.len()
    }

    pub fn marginal_z(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.kz()];
        for (px, row) in self.p_x.iter().zip(&self.encoder) {
            for (mz, p) in m.iter_mut().zip(row) {
                *mz += px * p;
            }
        }
        m
    }

    /// Same instance with a replaced encoder table.
    pub fn with_encoder(&self, encoder: Vec<Vec<f64>>) -> Self {
        DiscreteIbInstance {
            encoder,
            ..self.clone()
        }
    }
}

/// `KL(p‖q)` with `q` given in log space; `0·log 0 = 0`.
fn kl_log(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| pi * (pi.ln() - lq))
        .sum()
}

pub fn exact_mi(inst: &DiscreteIbInstance) -> Result<f64> {
    inst.validate()?;
    let log_m: Vec<f64> = inst.marginal_z().into_iter().map(ln0).collect();
    Ok(inst
        .p_x
        .iter()
        .zip(&inst.encoder)
        .map(|(px, row)| px * kl_log(row, &log_m))
        .sum::<f64>()
        .max(0.0))
}

pub fn expected_reward(inst: &DiscreteIbInstance) -> Result<f64> {
    inst.validate()?;
    Ok(inst
        .p_x
        .iter()
        .zip(&inst.encoder)
        .map(|(px, row)| px * row.iter().zip(&inst.reward).map(|(p, j)| p * j).sum::<f64>())
        .sum())
}

/// `E[J] − β·I(X, Z)`.
pub fn exact_objective(inst: &DiscreteIbInstance) -> Result<f64> {
    Ok(expected_reward(inst)? - inst.beta * exact_mi(inst)?)
}

/// `E[J] − β·E_X KL(P(Z|X) ‖ U)`, the variational bound for a fixed prior `U`.
pub fn variational_bound(inst: &DiscreteIbInstance, prior: &[f64]) -> Result<f64> {
    check_simplex(prior, "prior")?;
    if prior.len() != inst.kz() {
        return contract("prior length differs from the representation alphabet");
    }
    let log_u: Vec<f64> = prior.iter().map(|&p| ln0(p)).collect();
    let kl: f64 = inst
        .p_x
        .iter()
        .zip(&inst.encoder)
        .map(|(px, row)| px * kl_log(row, &log_u))
        .sum();
    Ok(expected_reward(inst)? - inst.beta * kl)
}

/// Log of the row `U(z)·exp(J(z)/β)`, normalised.
fn log_tilted(prior: &[f64], reward: &[f64], beta: f64) -> Vec<f64> {
    // shifting J by its maximum keeps J/β small next to ln U
    let top = reward.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = prior
        .iter()
        .zip(reward)
        .map(|(&u, &j)| if u > 0.0 { u.ln() + (j - top) / beta } else { f64::NEG_INFINITY })
        .collect();
    let lse = log_sum_exp(&raw);
    raw.into_iter().map(|v| v - lse).collect()
}

/// Row shared by every state under `P̂(Z|X) ∝ P(Z)·exp(J(Z)/β)`, in log space.
pub fn log_target_row(inst: &DiscreteIbInstance) -> Result<Vec<f64>> {
    inst.validate()?;
    if inst.beta <= 0.0 {
        return contract("the target distribution needs beta > 0");
    }
    Ok(log_tilted(&inst.marginal_z(), &inst.reward, inst.beta))
}

/// `P̂(Z|X) ∝ P(Z)·exp(J(Z)/β)`; every row is the same.
pub fn target_distribution(inst: &DiscreteIbInstance) -> Result<Vec<Vec<f64>>> {
    let row: Vec<f64> = log_target_row(inst)?.into_iter().map(f64::exp).collect();
    Ok(vec![row; inst.kx()])
}

/// Limit of iterating the target map with the marginal re-estimated each
/// time: the marginal restricted to the maximal-reward representations.
/// This is the encoder that maximises the exact objective.
pub fn self_consistent_target(inst: &DiscreteIbInstance) -> Result<Vec<Vec<f64>>> {
    inst.validate()?;
    let m = inst.marginal_z();
    let best = m
        .iter()
        .zip(&inst.reward)
        .filter(|(&p, _)| p > 0.0)
        .map(|(_, &j)| j)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut row: Vec<f64> = m
        .iter()
        .zip(&inst.reward)
        .map(|(&p, &j)| if p > 0.0 && j == best { p } else { 0.0 })
        .collect();
    let s: f64 = row.iter().sum();
    row.iter_mut().for_each(|v| *v /= s);
    Ok(vec![row; inst.kx()])
}

/// Applies the target map `iters` times, re-estimating the marginal each time.
pub fn iterate_target(inst: &DiscreteIbInstance, iters: usize) -> Result<Vec<Vec<f64>>> {
    let mut cur = inst.clone();
    for _ in 0..iters {
        cur = cur.with_encoder(target_distribution(&cur)?);
    }
    Ok(cur.encoder)
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub mi: f64,
    pub objective: f64,
    pub improved_objective: f64,
    pub gap: f64,
    /// `β·KL(P̂(Z) ‖ P(Z))`.
    pub kl_marginal: f64,
    /// `β·E_X KL(P(Z|X) ‖ P̂(Z|X))`.
    pub kl_conditional: f64,
    pub identity_residual: f64,
    pub improved: bool,
    pub identity_holds: bool,
}

pub const GAP_TOL: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-10;

/// Improvement from replacing the encoder with the target, and the KL-sum
/// identity for that gap.
pub fn theorem2_check(inst: &DiscreteIbInstance) -> Result<OracleReport> {
    let log_row = log_target_row(inst)?;
    improvement_report(inst, &log_row)
}

/// As [`theorem2_check`] but with a caller-supplied replacement row (log
/// space), e.g. a deliberately wrong one.
pub fn improvement_report(inst: &DiscreteIbInstance, log_row: &[f64]) -> Result<OracleReport> {
    if log_row.len() != inst.kz() {
        return contract("replacement row length differs from the representation alphabet");
    }
    let mi = exact_mi(inst)?;
    let objective = expected_reward(inst)? - inst.beta * mi;
    let row: Vec<f64> = log_row.iter().map(|v| v.exp()).collect();
    let improved_inst = inst.with_encoder(vec![row.clone(); inst.kx()]);
    let improved_objective = exact_objective(&improved_inst)?;
    let gap = improved_objective - objective;

    let log_m: Vec<f64> = inst.marginal_z().into_iter().map(ln0).collect();
    let kl_marginal = inst.beta * kl_log(&row, &log_m);
    let kl_conditional = inst.beta
        * inst
            .p_x
            .iter()
            .zip(&inst.encoder)
            .map(|(px, r)| px * kl_log(r, log_row))
            .sum::<f64>();
    let identity_residual = (gap - kl_marginal - kl_conditional).abs();
    Ok(OracleReport {
        mi,
        objective,
        improved_objective,
        gap,
        kl_marginal,
        kl_conditional,
        identity_residual,
        improved: gap >= -GAP_TOL,
        identity_holds: identity_residual < IDENTITY_TOL,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Theorem1Verdict {
    pub best_objective_index: usize,
    pub best_reward_index: usize,
    /// `I` and `E[J]` of the member maximising `E[J] − β·I`.
    pub mi_r: f64,
    pub reward_r: f64,
    /// `I` and `E[J]` of the member maximising `E[J]`.
    pub mi_star: f64,
    pub reward_star: f64,
    pub chain_holds: bool,
    pub epsilon_holds: bool,
}

pub const CHAIN_TOL: f64 = 1e-12;

/// Brute-force check of `β(I⋆ − Iʳ) ≥ J⋆ − Jʳ ≥ 0` over a finite family.
/// When `β|I⋆ − Iʳ| < epsilon` it also requires `|Jʳ − J⋆| < epsilon`.
pub fn theorem1_check(family: &[DiscreteIbInstance], beta: f64, epsilon: f64) -> Result<Theorem1Verdict> {
    if family.is_empty() {
        return contract("theorem 1 check needs a nonempty family");
    }
    let stats = family
        .iter()
        .map(|m| Ok((exact_mi(m)?, expected_reward(m)?)))
        .collect::<Result<Vec<_>>>()?;
    let argmax = |f: &dyn Fn(&(f64, f64)) -> f64| {
        let mut best = 0;
        for (i, s) in stats.iter().enumerate() {
            if f(s) > f(&stats[best]) {
                best = i;
            }
        }
        best
    };
    let r = argmax(&|&(i, j)| j - beta * i);
    let star = argmax(&|&(_, j)| j);
    let (mi_r, reward_r) = stats[r];
    let (mi_star, reward_star) = stats[star];
    let lhs = beta * (mi_star - mi_r);
    let mid = reward_star - reward_r;
    let chain_holds = lhs >= mid - CHAIN_TOL && mid >= -CHAIN_TOL;
    let epsilon_holds = lhs.abs() >= epsilon || mid.abs() < epsilon;
    Ok(Theorem1Verdict {
        best_objective_index: r,
        best_reward_index: star,
        mi_r,
        reward_r,
        mi_star,
        reward_star,
        chain_holds,
        epsilon_holds,
    })
}

fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, k: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Random instance: `P(X)` and every encoder row Dirichlet(1, …, 1),
/// `J` uniform on `[−1, 1]`.
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, kx: usize, kz: usize, beta: f64) -> DiscreteIbInstance {
    let p_x = dirichlet_ones(rng, kx);
    let encoder = (0..kx).map(|_| dirichlet_ones(rng, kz)).collect();
    let reward = (0..kz).map(|_| rng.random_range(-1.0..=1.0)).collect();
    DiscreteIbInstance {
        p_x,
        encoder,
        reward,
        beta,
    }
}

/// Family sharing one `P(X)` and `β`; members differ in encoder and reward.
pub fn random_family<R: Rng + ?Sized>(rng: &mut R, size: usize, kx: usize, kz: usize, beta: f64) -> Vec<DiscreteIbInstance> {
    let p_x = dirichlet_ones(rng, kx);
    (0..size)
        .map(|_| DiscreteIbInstance {
            p_x: p_x.clone(),
            ..random_instance(rng, kx, kz, beta)
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StationarityReport {
    /// Smallest `(L(P*) − L(P'))/δ` over perturbations, exact objective
    /// around the self-consistent target.
    pub min_exact_gap: f64,
    /// Same for the variational bound with the prior frozen at `P(Z)`,
    /// around the one-step target.
    pub min_bound_gap: f64,
    pub passed: bool,
}

pub const STATIONARITY_TOL: f64 = 1e-6;

fn perturb(base: &[Vec<f64>], noise: &[Vec<f64>], delta: f64) -> Vec<Vec<f64>> {
    base.iter()
        .zip(noise)
        .map(|(b, n)| b.iter().zip(n).map(|(x, y)| (1.0 - delta) * x + delta * y).collect())
        .collect()
}

/// Compares each target against `perturbations` mixtures
/// `(1 − δ)·P* + δ·D` with random row-stochastic `D`.
pub fn stationarity_check<R: Rng + ?Sized>(
    inst: &DiscreteIbInstance,
    rng: &mut R,
    perturbations: usize,
    delta: f64,
) -> Result<StationarityReport> {
    let fixed = self_consistent_target(inst)?;
    let one_step = target_distribution(inst)?;
    let prior = inst.marginal_z();
    let l_fixed = exact_objective(&inst.with_encoder(fixed.clone()))?;
    let l_bound = variational_bound(&inst.with_encoder(one_step.clone()), &prior)?;
    let mut min_exact_gap = f64::INFINITY;
    let mut min_bound_gap = f64::INFINITY;
    for _ in 0..perturbations {
        let noise: Vec<Vec<f64>> = (0..inst.kx()).map(|_| dirichlet_ones(rng, inst.kz())).collect();
        let p = inst.with_encoder(perturb(&fixed, &noise, delta));
        min_exact_gap = min_exact_gap.min((l_fixed - exact_objective(&p)?) / delta);
        let q = inst.with_encoder(perturb(&one_step, &noise, delta));
        min_bound_gap = min_bound_gap.min((l_bound - variational_bound(&q, &prior)?) / delta);
    }
    Ok(StationarityReport {
        min_exact_gap,
        min_bound_gap,
        passed: min_exact_gap >= -STATIONARITY_TOL && min_bound_gap >= -STATIONARITY_TOL,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Multiplies by `β` where the target divides by it.
    OffByBeta,
}

#[derive(Clone, Debug, Serialize)]
pub struct FailedCheck {
    pub sweep: String,
    pub seed: u64,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepReport {
    pub checks: usize,
    pub failures: Vec<FailedCheck>,
}

impl SweepReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    fn merge(mut self, other: SweepReport) -> Self {
        self.checks += other.checks;
        self.failures.extend(other.failures);
        self
    }
}

fn collect(name: &str, results: Vec<(u64, Option<String>)>) -> SweepReport {
    SweepReport {
        checks: results.len(),
        failures: results
            .into_iter()
            .filter_map(|(seed, fail)| {
                fail.map(|detail| FailedCheck {
                    sweep: name.to_string(),
                    seed,
                    detail,
                })
            })
            .collect(),
    }
}

pub const SWEEP_BETAS: [f64; 3] = [0.001, 0.1, 1.0];

/// Theorem 2 sweep over `count` random 4×8 instances, cycling `β`.
pub fn theorem2_sweep(exec: Execution, seed: u64, count: usize, fault: Fault) -> SweepReport {
    let results = par::map_range(exec, count, |i| {
        let s = rng::derive_seed(seed, 0x7202 + i as u64);
        let mut r = rng::stream(s, 0);
        let inst = random_instance(&mut r, 4, 8, SWEEP_BETAS[i % SWEEP_BETAS.len()]);
        let report = match fault {
            Fault::None => theorem2_check(&inst),
            Fault::OffByBeta => improvement_report(&inst, &log_tilted(&inst.marginal_z(), &inst.reward, 1.0 / inst.beta)),
        };
        let fail = match report {
            Err(e) => Some(e.to_string()),
            Ok(rep) if !rep.improved || !rep.identity_holds => Some(format!(
                "beta={} gap={:e} residual={:e}",
                inst.beta, rep.gap, rep.identity_residual
            )),
            Ok(_) => None,
        };
        (s, fail)
    });
    collect("theorem2", results)
}

/// Theorem 1 sweep over `count` random families of `size` members.
pub fn theorem1_sweep(exec: Execution, seed: u64, count: usize, size: usize, beta: f64) -> SweepReport {
    let results = par::map_range(exec, count, |i| {
        let s = rng::derive_seed(seed, 0x7101 + i as u64);
        let mut r = rng::stream(s, 0);
        let family = random_family(&mut r, size, 4, 8, beta);
        let fail = match theorem1_check(&family, beta, 1e-3) {
            Err(e) => Some(e.to_string()),
            Ok(v) if !v.chain_holds || !v.epsilon_holds => Some(format!(
                "beta·ΔI={:e} ΔJ={:e}",
                beta * (v.mi_star - v.mi_r),
                v.reward_star - v.reward_r
            )),
            Ok(_) => None,
        };
        (s, fail)
    });
    collect("theorem1", results)
}

pub fn stationarity_sweep(exec: Execution, seed: u64, count: usize, perturbations: usize) -> SweepReport {
    let results = par::map_range(exec, count, |i| {
        let s = rng::derive_seed(seed, 0x5a7 + i as u64);
        let mut r = rng::stream(s, 0);
        let inst = random_instance(&mut r, 4, 8, SWEEP_BETAS[i % SWEEP_BETAS.len()]);
        let fail = match stationarity_check(&inst, &mut r, perturbations, 1e-3) {
            Err(e) => Some(e.to_string()),
            Ok(rep) if !rep.passed => Some(format!(
                "exact gap {:e}, bound gap {:e}",
                rep.min_exact_gap, rep.min_bound_gap
            )),
            Ok(_) => None,
        };
        (s, fail)
    });
    collect("stationarity", results)
}

/// Identity checks on random instances: MI bounds and row invariance of
/// the target.
pub fn identity_sweep(exec: Execution, seed: u64, count: usize) -> SweepReport {
    let results = par::map_range(exec, count, |i| {
        let s = rng::derive_seed(seed, 0x1d + i as u64);
        let mut r = rng::stream(s, 0);
        let inst = random_instance(&mut r, 4, 8, SWEEP_BETAS[i % SWEEP_BETAS.len()]);
        let check = || -> Result<Option<String>> {
            let mi = exact_mi(&inst)?;
            let ceiling = (inst.kx() as f64).ln().min((inst.kz() as f64).ln());
            if !(-1e-12..=ceiling + 1e-12).contains(&mi) {
                return Ok(Some(format!("mi {mi} outside [0, {ceiling}]")));
            }
            let t = target_distribution(&inst)?;
            for row in &t {
                if (row.iter().sum::<f64>() - 1.0).abs() > 1e-12 || row != &t[0] {
                    return Ok(Some("target rows differ or are not normalised".into()));
                }
            }
            Ok(None)
        };
        (s, check().unwrap_or_else(|e| Some(e.to_string())))
    });
    collect("identities", results)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepCounts {
    pub theorem2: usize,
    pub theorem1_families: usize,
    pub family_size: usize,
    pub stationarity: usize,
    pub perturbations: usize,
    pub identities: usize,
}

impl Default for SweepCounts {
    fn default() -> Self {
        SweepCounts {
            theorem2: 100,
            theorem1_families: 50,
            family_size: 20,
            stationarity: 20,
            perturbations: 100,
            identities: 30,
        }
    }
}

impl SweepCounts {
    pub fn zero() -> Self {
        SweepCounts {
            theorem2: 0,
            theorem1_families: 0,
            family_size: 20,
            stationarity: 0,
            perturbations: 100,
            identities: 0,
        }
    }
}

pub fn run_all(exec: Execution, seed: u64, counts: SweepCounts, fault: Fault) -> Vec<(&'static str, SweepReport)> {
    vec![
        ("theorem2", theorem2_sweep(exec, seed, counts.theorem2, fault)),
        (
            "theorem1",
            theorem1_sweep(exec, seed, counts.theorem1_families, counts.family_size, 0.001),
        ),
        (
            "stationarity",
            stationarity_sweep(exec, seed, counts.stationarity, counts.perturbations),
        ),
        ("identities", identity_sweep(exec, seed, counts.identities)),
    ]
}

pub fn total(reports: &[(&'static str, SweepReport)]) -> SweepReport {
    reports.iter().fold(
        SweepReport {
            checks: 0,
            failures: vec![],
        },
        |acc, (_, r)| acc.merge(r.clone()),
    )
}
