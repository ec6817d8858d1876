//! Training loop for the A2C variants.
//!
//! Every update collects `num_envs × rollout_len` transitions, then forms
//! two gradients from the same parameter snapshot:
//!
//! * heads: `∂J/∂θ` with the particles held fixed;
//! * encoder: the chain rule through the particles, `Σ Φ(Z_i)·∂Z_i/∂φ`,
//!   where `Φ` is the particle direction for the SVIB variants and the plain
//!   per-particle `∇_Z J` otherwise (which makes it ordinary backprop).
//!
//! Both are applied afterwards, so neither update sees the other.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::env::{EnvConfig, VecEnv};
use crate::error::{contract, Error, Result};
use crate::metrics::{MetricsRecord, MetricsWriter, RecordType};
use crate::mine::{self, MiRecord, PairBatch, ProbeConfig};
use crate::networks::{policy_value, EncoderParams, NetworkConfig, Noise, Parameterized, PolicyValueParams, StatisticsNetParams};
use crate::optim::{global_norm, Optimizer, OptimizerConfig};
use crate::par::{self, Execution};
use crate::rl::{a2c_objective, A2cDiagnostics, RlCoefficients, RolloutBatch, StepEnd};
use crate::rng::{self, StreamRng};
use crate::svgd::{self, ParticleSet, PriorKind, PriorModel, SvgdConfig};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Deterministic encoder `φ(X)`, trained by backprop.
    VanillaA2c,
    /// Stochastic encoder `φ(X, ε)`, trained by backprop.
    A2cNoise,
    /// Stochastic encoder, particle update with a uniform prior.
    SvibUniform,
    /// Stochastic encoder, particle update with a per-state Gaussian prior.
    SvibGaussian,
    /// Experimental min-max update with a statistics network.
    MineDirect,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::VanillaA2c,
        Variant::A2cNoise,
        Variant::SvibUniform,
        Variant::SvibGaussian,
        Variant::MineDirect,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::VanillaA2c => "vanilla_a2c",
            Variant::A2cNoise => "a2c_noise",
            Variant::SvibUniform => "svib_uniform",
            Variant::SvibGaussian => "svib_gaussian",
            Variant::MineDirect => "mine_direct",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    pub fn stochastic_encoder(self) -> bool {
        !matches!(self, Variant::VanillaA2c)
    }

    pub fn prior(self) -> Option<PriorKind> {
        match self {
            Variant::SvibUniform => Some(PriorKind::Uniform),
            Variant::SvibGaussian => Some(PriorKind::BatchGaussian),
            _ => None,
        }
    }

    /// Particles drawn per state during an update.
    pub fn particles(self, svgd: &SvgdConfig) -> usize {
        if self.prior().is_some() {
            svgd.particles
        } else {
            1
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub total_updates: u64,
    pub num_envs: usize,
    pub rollout_len: usize,
    /// Updates between checkpoints; 0 keeps only the initial and final ones.
    pub checkpoint_interval: u64,
    /// Completed episodes averaged into `mean_return` (the metric is
    /// omitted until this many have finished).
    pub return_window: usize,
    /// Episodes per evaluation, run at every checkpoint; 0 disables.
    pub eval_episodes: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Schedule {
            total_updates: 2000,
            num_envs: 16,
            rollout_len: 5,
            checkpoint_interval: 0,
            return_window: 100,
            eval_episodes: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    pub env: EnvConfig,
    pub network: NetworkConfig,
    pub svgd: SvgdConfig,
    pub rl: RlCoefficients,
    /// `null` disables the mutual-information probe.
    pub probe: Option<ProbeConfig>,
    pub optim: OptimizerConfig,
    pub schedule: Schedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            variant: Variant::SvibUniform,
            seed: 0,
            env: EnvConfig::default(),
            network: NetworkConfig::default(),
            svgd: SvgdConfig::default(),
            rl: RlCoefficients::default(),
            probe: Some(ProbeConfig::default()),
            optim: OptimizerConfig::default(),
            schedule: Schedule::default(),
        }
    }
}

impl RunConfig {
    /// First violated constraint as `(field path, message)`.
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        self.env.validate()?;
        self.svgd.validate()?;
        self.rl.validate()?;
        self.optim.validate("optim")?;
        if let Some(p) = &self.probe {
            p.validate()?;
        }
        let n = &self.network;
        if !(n.noise_variance > 0.0) {
            return Err(("network.noise_variance".into(), "must be positive".into()));
        }
        if n.z_dim == 0 {
            return Err(("network.z_dim".into(), "must be at least 1".into()));
        }
        let d_x = match self.env.build() {
            Ok(e) => e.obs_dim(),
            Err(e) => return Err(("env".into(), e.to_string())),
        };
        if n.z_dim >= d_x {
            return Err((
                "network.z_dim".into(),
                format!("must be below the observation dimension {d_x}"),
            ));
        }
        let s = &self.schedule;
        if s.num_envs == 0 {
            return Err(("schedule.num_envs".into(), "must be at least 1".into()));
        }
        if s.rollout_len == 0 {
            return Err(("schedule.rollout_len".into(), "must be at least 1".into()));
        }
        if s.return_window == 0 {
            return Err(("schedule.return_window".into(), "must be at least 1".into()));
        }
        if self.variant == Variant::MineDirect && s.num_envs * s.rollout_len < 2 {
            return Err(("schedule.num_envs".into(), "mine_direct needs at least 2 states per batch".into()));
        }
        Ok(())
    }
}

const TAG_PHI: u64 = 1;
const TAG_THETA: u64 = 2;
const TAG_ACT: u64 = 3;
const TAG_TRAIN: u64 = 4;
const TAG_ENV: u64 = 5;
const TAG_PROBE: u64 = 6;
const TAG_EVAL: u64 = 7;
const TAG_ETA: u64 = 8;

pub struct TrainState {
    pub config: RunConfig,
    pub exec: Execution,
    pub phi: EncoderParams,
    pub theta: PolicyValueParams,
    /// Statistics network of the experimental min-max variant.
    pub eta: Option<StatisticsNetParams>,
    phi_opt: Optimizer,
    theta_opt: Optimizer,
    pub update: u64,
    envs: VecEnv,
    act_rng: StreamRng,
    train_rng: StreamRng,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepStats {
    pub diagnostics: A2cDiagnostics,
    pub phi_grad_norm: f64,
    pub theta_grad_norm: f64,
}

/// Gradients of one update, before the optimizer touches them.
#[derive(Clone, Debug)]
pub struct Gradients {
    pub phi: Vec<Vec<f64>>,
    pub theta: Vec<Vec<f64>>,
    pub diagnostics: A2cDiagnostics,
}

fn check_finite(grads: &[Vec<f64>], term: &str) -> Result<()> {
    if grads.iter().flatten().all(|g| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { term: term.into() })
    }
}

impl TrainState {
    pub fn new(config: RunConfig, exec: Execution) -> Result<Self> {
        if let Err((path, msg)) = config.validate() {
            return contract(format!("{path}: {msg}"));
        }
        let seed = config.seed;
        let envs = VecEnv::new(&config.env, config.schedule.num_envs, rng::derive_seed(seed, TAG_ENV))?;
        let d_x = envs.obs_dim();
        let phi = EncoderParams::new(
            &mut rng::stream(seed, TAG_PHI),
            d_x,
            &config.network,
            config.variant.stochastic_encoder(),
        )?;
        let theta = PolicyValueParams::new(
            &mut rng::stream(seed, TAG_THETA),
            config.network.z_dim,
            envs.n_actions(),
            &config.network.head_hidden,
        );
        let eta = (config.variant == Variant::MineDirect).then(|| {
            StatisticsNetParams::new(
                &mut rng::stream(seed, TAG_ETA),
                d_x,
                config.network.z_dim,
                &config.network.statistics_hidden,
            )
        });
        Ok(TrainState {
            phi_opt: Optimizer::new(config.optim),
            theta_opt: Optimizer::new(config.optim),
            exec,
            phi,
            theta,
            eta,
            update: 0,
            envs,
            act_rng: rng::stream(seed, TAG_ACT),
            train_rng: rng::stream(seed, TAG_TRAIN),
            config,
        })
    }

    pub fn obs_dim(&self) -> usize {
        self.phi.d_x
    }

    pub fn completed_returns(&self) -> &[f64] {
        self.envs.completed_returns()
    }

    /// Mean of the last `return_window` completed episode returns, once
    /// that many episodes have finished.
    pub fn mean_return(&self) -> Option<f64> {
        let all = self.envs.completed_returns();
        let n = self.config.schedule.return_window;
        if all.len() < n {
            return None;
        }
        let w = &all[all.len() - n..];
        Some(w.iter().sum::<f64>() / w.len() as f64)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut params = self.phi.named_params();
        params.extend(self.theta.named_params());
        if let Some(eta) = &self.eta {
            params.extend(eta.named_params());
        }
        Checkpoint::from_params(self.update, params)
    }

    /// Value estimate for one observation with a fresh single particle.
    fn value_of(&mut self, obs: &[f64]) -> Result<f64> {
        let z = self.phi.sample(obs, Noise::Sampled(&mut self.act_rng));
        Ok(policy_value(&self.theta, &z)?.1)
    }

    fn act(&mut self, obs: &[f64]) -> Result<usize> {
        let z = self.phi.sample(obs, Noise::Sampled(&mut self.act_rng));
        let (probs, _) = policy_value(&self.theta, &z)?;
        Ok(sample_categorical(&probs, &mut self.act_rng))
    }

    /// Collects `num_envs × rollout_len` transitions with one fresh particle
    /// per decision and fills in the n-step returns.
    pub fn rollout(&mut self) -> Result<RolloutBatch> {
        let k = self.envs.len();
        let h = self.config.schedule.rollout_len;
        let d = self.obs_dim();
        let mut obs = vec![Vec::with_capacity(h * d); k];
        let mut actions = vec![Vec::with_capacity(h); k];
        let mut rewards = vec![Vec::with_capacity(h); k];
        let mut ends = vec![Vec::with_capacity(h); k];
        let mut boots = vec![Vec::with_capacity(h); k];
        for _ in 0..h {
            let current: Vec<Vec<f64>> = self.envs.observations().to_vec();
            let mut acts = Vec::with_capacity(k);
            for (i, o) in current.iter().enumerate() {
                acts.push(self.act(o)?);
                obs[i].extend_from_slice(o);
            }
            let step = self.envs.step(&acts)?;
            for i in 0..k {
                let boot = if step.ends[i] == StepEnd::Terminal {
                    0.0
                } else {
                    self.value_of(&step.next_observations[i])?
                };
                actions[i].push(acts[i]);
                rewards[i].push(step.rewards[i]);
                ends[i].push(step.ends[i]);
                boots[i].push(boot);
            }
        }
        let mut batch = RolloutBatch {
            obs_dim: d,
            num_envs: k,
            horizon: h,
            observations: obs.concat(),
            actions: actions.concat(),
            rewards: rewards.concat(),
            ends: ends.concat(),
            bootstrap_values: boots.concat(),
            returns: Vec::new(),
        };
        batch.compute_returns(self.config.rl.gamma, self.config.rl.n_step)?;
        batch.check()?;
        Ok(batch)
    }

    /// Gradients of `J` for the current parameters on `batch`, drawing
    /// particles from the training stream.
    pub fn gradients(&mut self, batch: &RolloutBatch) -> Result<Gradients> {
        let m = self.config.variant.particles(&self.config.svgd);
        compute_gradients(
            &self.phi,
            &self.theta,
            batch,
            &self.config,
            m,
            self.exec,
            Noise::Sampled(&mut self.train_rng),
        )
    }

    /// One update from `batch`.
    pub fn train_step(&mut self, batch: &RolloutBatch) -> Result<StepStats> {
        batch.check()?;
        if batch.is_empty() {
            return contract("empty batch");
        }
        if self.config.variant == Variant::MineDirect {
            return self.mine_direct_step(batch);
        }
        let g = self.gradients(batch)?;
        let stats = StepStats {
            diagnostics: g.diagnostics,
            phi_grad_norm: global_norm(&g.phi),
            theta_grad_norm: global_norm(&g.theta),
        };
        self.phi_opt.ascend(self.phi.params_mut(), &g.phi)?;
        self.theta_opt.ascend(self.theta.params_mut(), &g.theta)?;
        self.update += 1;
        Ok(stats)
    }

    fn mine_direct_step(&mut self, batch: &RolloutBatch) -> Result<StepStats> {
        let eta = self.eta.as_mut().expect("mine_direct state carries a statistics network");
        let out = mine::mine_direct_update(
            &mut self.theta,
            &mut self.phi,
            eta,
            &batch.observations,
            &batch.actions,
            &batch.returns,
            &self.config.rl,
            self.config.svgd.beta,
            self.config.optim.learning_rate,
            &mut self.train_rng,
        )?;
        self.update += 1;
        Ok(StepStats {
            diagnostics: A2cDiagnostics {
                objective: out.objective,
                ..Default::default()
            },
            phi_grad_norm: f64::NAN,
            theta_grad_norm: f64::NAN,
        })
    }

    /// Runs a mutual-information probe on the first `pool_size`
    /// observations of `batch`, with fresh particles from the current
    /// encoder. η is seeded from `(seed, update)` only.
    pub fn probe(&self, config: &ProbeConfig, batch: &RolloutBatch) -> Result<MiRecord> {
        let pool = config.pool_size.min(batch.len());
        let probe_seed = rng::derive_seed(rng::derive_seed(self.config.seed, TAG_PROBE), self.update);
        let mut r = rng::stream(probe_seed, 0);
        let xs: Vec<Vec<f64>> = (0..pool).map(|i| batch.observation(i).to_vec()).collect();
        let zs: Vec<Vec<f64>> = xs.iter().map(|x| self.phi.sample(x, Noise::Sampled(&mut r))).collect();
        let pairs = PairBatch::from_rows(&xs, &zs)?;
        let (_, rec) = mine::train_probe(
            config,
            &pairs,
            &self.config.network.statistics_hidden,
            probe_seed,
            self.update,
            None,
        )?;
        Ok(rec)
    }

    /// Average undiscounted return over fresh episodes seeded by the
    /// current update.
    pub fn evaluate(&self, episodes: usize) -> Result<f64> {
        let mut r = rng::stream(rng::derive_seed(self.config.seed, TAG_EVAL), self.update);
        let mut env = self.config.env.build()?;
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut obs = env.reset(r.random());
            loop {
                let z = self.phi.sample(&obs, Noise::Sampled(&mut r));
                let (probs, _) = policy_value(&self.theta, &z)?;
                let t = env.step(sample_categorical(&probs, &mut r))?;
                total += t.reward;
                if t.end.is_done() {
                    break;
                }
                obs = t.observation;
            }
        }
        Ok(total / episodes.max(1) as f64)
    }
}

pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

/// Encoder and head gradients of `J` for `m` particles per state.
///
/// The heads see the particles as a detached leaf, so `θ` receives no
/// encoder path and `∂J/∂Z` is read off that leaf.
pub fn compute_gradients(
    phi: &EncoderParams,
    theta: &PolicyValueParams,
    batch: &RolloutBatch,
    config: &RunConfig,
    m: usize,
    exec: Execution,
    noise: Noise<'_>,
) -> Result<Gradients> {
    let enc_tape = Tape::with_execution(exec);
    let enc = phi.bind(&enc_tape);
    let z = enc.encode(&enc_tape, &batch.observations, m, noise)?;
    let z_val = z.value();
    let rows = z_val.rows();
    let d_z = z_val.cols();

    let head_tape = Tape::with_execution(exec);
    let heads = theta.bind(&head_tape);
    let z_leaf = head_tape.leaf(&z_val.clone().with_grad());
    let j = a2c_objective(&head_tape, &heads, &z_leaf, m, &batch.actions, &batch.returns, &config.rl)?;
    if !j.objective.item().is_finite() {
        return Err(Error::NonFinite {
            term: "A2C objective".into(),
        });
    }
    head_tape.backward(j.objective)?;
    let theta_grads = crate::networks::collect_grads(&heads.vars());
    check_finite(&theta_grads, "policy-value gradient")?;
    // per-particle ∇_Z J_i: the mean objective scales each row by 1/N
    let mut dj = z_leaf
        .grad()
        .map(|g| g.into_data())
        .unwrap_or_else(|| vec![0.0; rows * d_z]);
    dj.iter_mut().for_each(|g| *g *= rows as f64);
    check_finite(&[dj.clone()], "representation gradient of J")?;
    let dj = Tensor::new(vec![rows, d_z], dj)?;

    let directions = match config.variant.prior() {
        None => dj,
        Some(kind) => particle_directions(&z_val, &dj, m, kind, &config.svgd, exec)?,
    };
    check_finite(&[directions.data().to_vec()], "particle direction")?;
    let phi_grads = svgd::phi_gradient(&z, &directions, &enc.vars())?;
    check_finite(&phi_grads, "encoder gradient")?;
    Ok(Gradients {
        phi: phi_grads,
        theta: theta_grads,
        diagnostics: j.diagnostics,
    })
}

/// Particle directions for every state. `z` and `dj` are `[B·m, d_z]`
/// with rows grouped by state; the score is `∇J/β + ζ·∇log U`.
pub fn particle_directions(
    z: &Tensor,
    dj: &Tensor,
    m: usize,
    prior: PriorKind,
    cfg: &SvgdConfig,
    exec: Execution,
) -> Result<Tensor> {
    let d = z.cols();
    let states = z.rows() / m;
    let per_state = par::map_range(exec, states, |t| -> Result<Vec<f64>> {
        let span = t * m * d..(t + 1) * m * d;
        let set = ParticleSet::new(Tensor::new(vec![m, d], z.data()[span.clone()].to_vec())?, t)?;
        let scaled: Vec<f64> = dj.data()[span].iter().map(|g| g / cfg.beta).collect();
        let scaled = Tensor::new(vec![m, d], scaled)?;
        let model = PriorModel::fit(prior, &set);
        let scores = if model.is_uniform() {
            scaled
        } else {
            let mut lp = Vec::with_capacity(m * d);
            for i in 0..m {
                lp.extend(svgd::log_prior_grad(&model, set.particle(i))?);
            }
            let lp = Tensor::new(vec![m, d], lp)?;
            let zeta = svgd::zeta_batch(&scaled, &lp, cfg.zeta_scale)?;
            let s = scaled.data().iter().zip(lp.data()).map(|(a, b)| a + zeta * b).collect();
            Tensor::new(vec![m, d], s)?
        };
        let h = svgd::bandwidth_or_floor(&set);
        Ok(svgd::svgd_direction(&set, &scores, h)?.into_data())
    });
    let mut out = Vec::with_capacity(z.numel());
    for r in per_state {
        out.extend(r?);
    }
    Tensor::new(vec![z.rows(), d], out)
}

/// What a finished run leaves behind.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub records: Vec<MetricsRecord>,
    pub mi_trace: Vec<MiRecord>,
    pub final_checkpoint: Checkpoint,
    /// `metrics.jsonl` path when the run was persisted.
    pub metrics_path: Option<PathBuf>,
}

impl RunArtifacts {
    /// First update whose `mean_return` reached `threshold`.
    pub fn first_update_reaching(&self, threshold: f64) -> Option<u64> {
        self.records
            .iter()
            .filter(|r| r.record_type == RecordType::Train)
            .find(|r| r.fields.get("mean_return").is_some_and(|&v| v >= threshold))
            .map(|r| r.step)
    }
}

struct Sink {
    writer: Option<MetricsWriter>,
    checkpoints: Option<PathBuf>,
    records: Vec<MetricsRecord>,
}

impl Sink {
    fn emit(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(w) = &mut self.writer {
            w.write(&r)?;
        }
        self.records.push(r);
        Ok(())
    }

    fn checkpoint(&self, ck: &Checkpoint) -> Result<()> {
        match &self.checkpoints {
            Some(dir) => ck.save(&dir.join(format!("update_{:08}.json", ck.step))),
            None => Ok(()),
        }
    }
}

/// Runs the configured number of updates. With `out_dir`, writes
/// `metrics.jsonl` and `checkpoints/` there.
pub fn train(config: &RunConfig, out_dir: Option<&Path>, exec: Execution) -> Result<RunArtifacts> {
    let mut state = TrainState::new(config.clone(), exec)?;
    let mut sink = Sink {
        writer: None,
        checkpoints: None,
        records: Vec::new(),
    };
    let mut metrics_path = None;
    if let Some(dir) = out_dir {
        let ck_dir = dir.join("checkpoints");
        std::fs::create_dir_all(&ck_dir).map_err(|e| Error::io(&ck_dir, e))?;
        let p = dir.join("metrics.jsonl");
        sink.writer = Some(MetricsWriter::create(&p)?);
        sink.checkpoints = Some(ck_dir);
        metrics_path = Some(p);
    }
    let variant = config.variant.name();
    let seed = config.seed;
    let sched = &config.schedule;
    let mut mi_trace = Vec::new();

    let mut probe_on = |state: &TrainState, batch: &RolloutBatch, sink: &mut Sink| -> Result<()> {
        if let Some(p) = &config.probe {
            let rec = state.probe(p, batch)?;
            sink.emit(
                MetricsRecord::new(RecordType::MiProbe, rec.step, seed, variant)
                    .with("mi_nats", rec.mi_nats)
                    .with("probe_steps", rec.probe_steps as f64)
                    .with("batch_size", rec.batch_size as f64),
            )?;
            mi_trace.push(rec);
        }
        Ok(())
    };
    let checkpoint_due = |u: u64| sched.checkpoint_interval > 0 && u % sched.checkpoint_interval == 0;

    sink.checkpoint(&state.checkpoint())?;
    for u in 0..sched.total_updates {
        let batch = state.rollout()?;
        if u == 0 {
            probe_on(&state, &batch, &mut sink)?;
        }
        let stats = state.train_step(&batch)?;
        let d = &stats.diagnostics;
        let mut rec = MetricsRecord::new(RecordType::Train, state.update, seed, variant)
            .with("objective", d.objective)
            .with("policy_term", d.policy_term)
            .with("value_loss", d.value_loss)
            .with("entropy", d.entropy)
            .with("phi_grad_norm", stats.phi_grad_norm)
            .with("theta_grad_norm", stats.theta_grad_norm)
            .with("episodes", state.completed_returns().len() as f64);
        if let Some(r) = state.mean_return() {
            rec = rec.with("mean_return", r);
        }
        sink.emit(rec)?;
        if config.probe.as_ref().is_some_and(|p| state.update % p.interval as u64 == 0) {
            probe_on(&state, &batch, &mut sink)?;
        }
        if checkpoint_due(state.update) && state.update < sched.total_updates {
            sink.checkpoint(&state.checkpoint())?;
            if sched.eval_episodes > 0 {
                let v = state.evaluate(sched.eval_episodes)?;
                sink.emit(MetricsRecord::new(RecordType::Eval, state.update, seed, variant).with("mean_return", v))?;
            }
        }
    }
    let final_checkpoint = state.checkpoint();
    if state.update > 0 {
        sink.checkpoint(&final_checkpoint)?;
        if sched.eval_episodes > 0 {
            let v = state.evaluate(sched.eval_episodes)?;
            sink.emit(MetricsRecord::new(RecordType::Eval, state.update, seed, variant).with("mean_return", v))?;
        }
    }
    Ok(RunArtifacts {
        records: sink.records,
        mi_trace,
        final_checkpoint,
        metrics_path,
    })
}
