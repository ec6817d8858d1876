//! Helpers shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::Rng;
use svib_core::networks::{
    policy_value, Activation, EncoderParams, Linear, Mlp, NetworkConfig, Noise, Parameterized, PolicyValueParams,
    StatisticsNetParams,
};
use svib_core::rl::{a2c_objective, RlCoefficients};
use svib_core::rng::{self, StreamRng};
use svib_core::env::{BaseEnv, EnvConfig, NoisyObsConfig};
use svib_core::mine::ProbeConfig;
use svib_core::networks::collect_grads;
use svib_core::optim::OptimizerConfig;
use svib_core::svgd::{self, ParticleSet, SvgdConfig};
use svib_core::trainer::{compute_gradients, RunConfig, Schedule, TrainState, Variant};
use svib_core::Execution;
use svib_core::{Result, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

pub fn uniform(r: &mut StreamRng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

/// Values in [-2, 2] kept away from the relu kink.
fn off_kink(r: &mut StreamRng, shape: &[usize]) -> Tensor {
    let mut t = uniform(r, shape, -2.0, 2.0);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1_f64.copysign(*v);
        }
    }
    t
}

/// Max relative error between backprop and central differences of the
/// scalar `f` with respect to every coordinate of every input.
pub fn op_check<F>(inputs: &[Tensor], f: F) -> f64
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t)).collect();
    let out = f(&tape, &vars).unwrap();
    tape.backward(out).unwrap();
    let eval = |p: &[Tensor]| {
        let tape = Tape::new();
        let v: Vec<Var> = p.iter().map(|t| tape.constant(t)).collect();
        f(&tape, &v).unwrap().item()
    };
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let g = vars[k].grad().map(Tensor::into_data).unwrap_or_else(|| vec![0.0; t.numel()]);
        for (i, &gi) in g.iter().enumerate() {
            let mut p = inputs.to_vec();
            p[k].data_mut()[i] += FD_STEP;
            let up = eval(&p);
            p[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&p);
            worst = worst.max(rel_err(gi, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Like [`op_check`] over the parameters of a network. `f` returns the
/// loss and the bound leaves in `params_mut` order.
pub fn param_check<P, F>(p: &P, f: F) -> f64
where
    P: Parameterized + Clone,
    F: for<'t> Fn(&P, &'t Tape) -> Result<(Var<'t>, Vec<Var<'t>>)>,
{
    let tape = Tape::new();
    let (loss, vars) = f(p, &tape).unwrap();
    tape.backward(loss).unwrap();
    let grads = svib_core::networks::collect_grads(&vars);
    let eval = |q: &P| {
        let tape = Tape::new();
        f(q, &tape).unwrap().0.item()
    };
    let mut worst: f64 = 0.0;
    for (k, g) in grads.iter().enumerate() {
        for (i, &gi) in g.iter().enumerate() {
            let mut q = p.clone();
            q.params_mut()[k].data_mut()[i] += FD_STEP;
            let up = eval(&q);
            q.params_mut()[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = eval(&q);
            worst = worst.max(rel_err(gi, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn binary<'t>(name: &str, x: &Var<'t>, y: &Var<'t>) -> Result<Var<'t>> {
    match name {
        "add" => x.add(y),
        "sub" => x.sub(y),
        _ => x.mul(y),
    }
}

fn weighted<'t>(tape: &'t Tape, out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    Ok(out.mul(&tape.constant(w))?.sum())
}

/// Plain MLP as a parameter container for [`param_check`].
#[derive(Clone)]
pub struct MlpParams(pub Mlp);

impl Parameterized for MlpParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.0
            .layers
            .iter()
            .flat_map(|l| [("w".to_string(), &l.weight), ("b".to_string(), &l.bias)])
            .collect()
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.0.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias]).collect()
    }
}

fn with_bias(mut mlp: Mlp, r: &mut StreamRng) -> Mlp {
    for l in &mut mlp.layers {
        let n = l.bias.numel();
        l.bias = uniform(r, &[n], -0.5, 0.5);
    }
    mlp
}

/// Every gradient check for one seed, as `(name, max relative error)`.
pub fn gradient_suite(seed: u64) -> Vec<(String, f64)> {
    let mut r = rng::stream(seed, 0x9c);
    let mut out = Vec::new();
    let mut push = |name: &str, e: f64| out.push((name.to_string(), e));

    let a = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform(&mut r, &[3, 4], -2.0, 2.0);
    let row = uniform(&mut r, &[4], -2.0, 2.0);
    let s = uniform(&mut r, &[1], -2.0, 2.0);
    let w = uniform(&mut r, &[3, 4], -1.0, 1.0);
    let w3 = uniform(&mut r, &[3], -1.0, 1.0);
    let pos = uniform(&mut r, &[3, 4], 0.5, 2.0);
    let kinked = off_kink(&mut r, &[3, 4]);

    for name in ["add", "sub", "mul"] {
        push(name, op_check(&[a.clone(), b.clone()], |t, v| weighted(t, binary(name, &v[0], &v[1])?, &w)));
        push(
            &format!("{name}_broadcast_row"),
            op_check(&[a.clone(), row.clone()], |t, v| weighted(t, binary(name, &v[0], &v[1])?, &w)),
        );
        push(
            &format!("{name}_broadcast_scalar"),
            op_check(&[s.clone(), a.clone()], |t, v| weighted(t, binary(name, &v[0], &v[1])?, &w)),
        );
    }
    push("neg", op_check(&[a.clone()], |t, v| weighted(t, v[0].neg(), &w)));
    push("scale", op_check(&[a.clone()], |t, v| weighted(t, v[0].scale(-1.7), &w)));
    push("add_scalar", op_check(&[a.clone()], |t, v| weighted(t, v[0].add_scalar(0.3), &w)));
    push("square", op_check(&[a.clone()], |t, v| weighted(t, v[0].square(), &w)));
    push("tanh", op_check(&[a.clone()], |t, v| weighted(t, v[0].tanh(), &w)));
    push("relu", op_check(&[kinked], |t, v| weighted(t, v[0].relu(), &w)));
    push("exp", op_check(&[a.clone()], |t, v| weighted(t, v[0].exp()?, &w)));
    push("log", op_check(&[pos], |t, v| weighted(t, v[0].log()?, &w)));
    let m = uniform(&mut r, &[4, 2], -2.0, 2.0);
    let wm = uniform(&mut r, &[3, 2], -1.0, 1.0);
    push("matmul", op_check(&[a.clone(), m], |t, v| weighted(t, v[0].matmul(&v[1])?, &wm)));
    push("sum", op_check(&[a.clone()], |_, v| Ok(v[0].square().sum())));
    push("mean", op_check(&[a.clone()], |_, v| Ok(v[0].tanh().mean().scale(3.0))));
    push("sum_last", op_check(&[a.clone()], |t, v| weighted(t, v[0].sum_last(), &w3)));
    push("log_softmax", op_check(&[a.clone()], |t, v| weighted(t, v[0].log_softmax(), &w)));
    push("log_sum_exp", op_check(&[a.clone()], |_, v| Ok(v[0].log_sum_exp())));
    push(
        "gather_last",
        op_check(&[a.clone()], |t, v| weighted(t, v[0].gather_last(&[1, 3, 0])?, &w3)),
    );
    let c = uniform(&mut r, &[3, 2], -2.0, 2.0);
    let wc = uniform(&mut r, &[3, 6], -1.0, 1.0);
    push(
        "concat_cols",
        op_check(&[c, a.clone()], |t, v| weighted(t, v[0].concat_cols(&v[1])?, &wc)),
    );
    let ws = uniform(&mut r, &[4, 4], -1.0, 1.0);
    push(
        "select_rows",
        op_check(&[a.clone()], |t, v| weighted(t, v[0].select_rows(&[2, 0, 2, 1])?, &ws)),
    );
    let wr = uniform(&mut r, &[4, 3], -1.0, 1.0);
    push(
        "reshape",
        op_check(&[a.clone()], |t, v| weighted(t, v[0].reshape(vec![4, 3])?.square(), &wr)),
    );

    // networks
    let x = uniform(&mut r, &[4, 5], -2.0, 2.0);
    let wy = uniform(&mut r, &[4, 3], -1.0, 1.0);
    for act in [Activation::Tanh, Activation::Relu] {
        let mlp = MlpParams(with_bias(Mlp::new(&mut r, &[5, 6, 3], act, false), &mut r));
        push(
            &format!("mlp_{act:?}").to_lowercase(),
            param_check(&mlp, |p, tape| {
                let b = p.0.bind(tape);
                let y = b.forward(&tape.constant(&x))?;
                Ok((weighted(tape, y, &wy)?, b.vars()))
            }),
        );
    }

    let cfg = NetworkConfig {
        z_dim: 3,
        noise_dim: 2,
        noise_variance: 0.1,
        encoder_hidden: vec![6],
        head_hidden: vec![5],
        statistics_hidden: vec![6],
    };
    let mut enc = EncoderParams::new(&mut r, 5, &cfg, true).unwrap();
    enc.net = with_bias(enc.net.clone(), &mut r);
    let wz = uniform(&mut r, &[8, 3], -1.0, 1.0);
    let states = x.data().to_vec();
    push(
        "encoder",
        param_check(&enc, |p, tape| {
            let mut noise = rng::stream(seed, 0x401);
            let b = p.bind(tape);
            let z = b.encode(tape, &states, 2, Noise::Sampled(&mut noise))?;
            Ok((weighted(tape, z, &wz)?, b.vars()))
        }),
    );

    let mut heads = PolicyValueParams::new(&mut r, 3, 4, &cfg.head_hidden);
    heads.trunk = with_bias(heads.trunk.clone(), &mut r);
    heads.policy = Linear {
        weight: uniform(&mut r, &[5, 4], -1.0, 1.0),
        bias: uniform(&mut r, &[4], -0.5, 0.5),
    };
    let z = uniform(&mut r, &[6, 3], -2.0, 2.0);
    let actions = [0, 3, 2];
    let returns = [0.5, -0.2, 1.1];
    let coeffs = RlCoefficients::default();
    let (theta_err, z_err) = a2c_checks(&heads, &z, 2, &actions, &returns, &coeffs);
    push("heads_a2c_theta", theta_err);
    push("heads_a2c_z", z_err);

    let eta = StatisticsNetParams::new(&mut r, 5, 3, &cfg.statistics_hidden);
    let eta = {
        let mut e = eta;
        e.net = with_bias(e.net.clone(), &mut r);
        e
    };
    let zx = uniform(&mut r, &[4, 3], -2.0, 2.0);
    let w4 = uniform(&mut r, &[4], -1.0, 1.0);
    push(
        "statistics",
        param_check(&eta, |p, tape| {
            let b = p.bind(tape);
            let t = b.forward(&tape.constant(&x), &tape.constant(&zx))?;
            Ok((weighted(tape, t, &w4)?, b.vars()))
        }),
    );
    out
}

/// Tape-free `J` with the advantage factor pinned to `adv` (one entry per
/// row), which is how the objective treats it under differentiation.
fn frozen_objective(
    theta: &PolicyValueParams,
    z: &Tensor,
    m: usize,
    actions: &[usize],
    returns: &[f64],
    coeffs: &RlCoefficients,
    adv: &[f64],
) -> f64 {
    let rows = z.rows();
    let mut total = 0.0;
    for i in 0..rows {
        let (probs, v) = policy_value(theta, z.row(i)).unwrap();
        let (a, ret) = (actions[i / m], returns[i / m]);
        let h: f64 = -probs.iter().map(|p| p * p.ln()).sum::<f64>();
        total += probs[a].ln() * adv[i] - coeffs.value_coef * (ret - v).powi(2) + coeffs.entropy_coef * h;
    }
    total / rows as f64
}

/// Backprop of the A2C objective against central differences of
/// [`frozen_objective`], for the head parameters and for the particles.
fn a2c_checks(
    theta: &PolicyValueParams,
    z: &Tensor,
    m: usize,
    actions: &[usize],
    returns: &[f64],
    coeffs: &RlCoefficients,
) -> (f64, f64) {
    let tape = Tape::new();
    let b = theta.bind(&tape);
    let zv = tape.param(z);
    let j = a2c_objective(&tape, &b, &zv, m, actions, returns, coeffs).unwrap();
    tape.backward(j.objective).unwrap();
    let g_theta = svib_core::networks::collect_grads(&b.vars());
    let g_z = zv.grad().unwrap().into_data();

    let values: Vec<f64> = (0..z.rows()).map(|i| policy_value(theta, z.row(i)).unwrap().1).collect();
    let adv: Vec<f64> = (0..z.rows())
        .map(|i| {
            let t = i / m;
            returns[t] - values[t * m..(t + 1) * m].iter().sum::<f64>() / m as f64
        })
        .collect();
    let f = |p: &PolicyValueParams, zz: &Tensor| frozen_objective(p, zz, m, actions, returns, coeffs, &adv);

    let mut theta_err: f64 = 0.0;
    for (k, g) in g_theta.iter().enumerate() {
        for (i, &gi) in g.iter().enumerate() {
            let mut q = theta.clone();
            q.params_mut()[k].data_mut()[i] += FD_STEP;
            let up = f(&q, z);
            q.params_mut()[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = f(&q, z);
            theta_err = theta_err.max(rel_err(gi, (up - down) / (2.0 * FD_STEP)));
        }
    }
    let mut z_err: f64 = 0.0;
    for (i, &gi) in g_z.iter().enumerate() {
        let mut zz = z.clone();
        zz.data_mut()[i] += FD_STEP;
        let up = f(theta, &zz);
        zz.data_mut()[i] -= 2.0 * FD_STEP;
        let down = f(theta, &zz);
        z_err = z_err.max(rel_err(gi, (up - down) / (2.0 * FD_STEP)));
    }
    (theta_err, z_err)
}

/// Central-difference check of the encoder gradient formed from fixed
/// particle directions: the gradient of `1/N Σ ⟨Φ_i, Z_i(φ)⟩`.
pub fn surrogate_check(seed: u64) -> f64 {
    let mut r = rng::stream(seed, 0x5a);
    let cfg = NetworkConfig {
        z_dim: 2,
        noise_dim: 2,
        noise_variance: 0.1,
        encoder_hidden: vec![4],
        ..Default::default()
    };
    let enc = EncoderParams::new(&mut r, 4, &cfg, true).unwrap();
    let states = uniform(&mut r, &[3, 4], -2.0, 2.0).into_data();
    let dirs = uniform(&mut r, &[6, 2], -1.0, 1.0);
    let tape = Tape::new();
    let b = enc.bind(&tape);
    let z = b.encode(&tape, &states, 2, Noise::Sampled(&mut rng::stream(seed, 1))).unwrap();
    let g = svgd::phi_gradient(&z, &dirs, &b.vars()).unwrap();
    let value = |p: &EncoderParams| {
        let tape = Tape::new();
        let z = p.bind(&tape).encode(&tape, &states, 2, Noise::Sampled(&mut rng::stream(seed, 1))).unwrap();
        z.data().iter().zip(dirs.data()).map(|(a, b)| a * b).sum::<f64>() / 6.0
    };
    let mut worst: f64 = 0.0;
    for (k, gk) in g.iter().enumerate() {
        for (i, &gi) in gk.iter().enumerate() {
            let mut q = enc.clone();
            q.params_mut()[k].data_mut()[i] += FD_STEP;
            let up = value(&q);
            q.params_mut()[k].data_mut()[i] -= 2.0 * FD_STEP;
            let down = value(&q);
            worst = worst.max(rel_err(gi, (up - down) / (2.0 * FD_STEP)));
        }
    }
    worst
}

/// Energy distance between a 1-D sample and `N(mu, var)`, with the target
/// expectations taken in closed form.
pub fn energy_distance_to_gaussian(xs: &[f64], mu: f64, var: f64) -> f64 {
    let s = var.sqrt();
    let n = xs.len() as f64;
    // E|x − Y| for Y ~ N(mu, s²)
    let e_abs = |x: f64| {
        let d = x - mu;
        let u = d / s;
        d * erf(u / std::f64::consts::SQRT_2) + 2.0 * s * normal_pdf(u)
    };
    let cross = xs.iter().map(|&x| e_abs(x)).sum::<f64>() / n;
    let mut within = 0.0;
    for a in xs {
        for b in xs {
            within += (a - b).abs();
        }
    }
    within /= n * n;
    let target = 2.0 * s / std::f64::consts::PI.sqrt();
    2.0 * cross - within - target
}

fn normal_pdf(u: f64) -> f64 {
    (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Error function: Maclaurin series below 3, continued fraction above.
pub fn erf(x: f64) -> f64 {
    if x.abs() < 3.0 {
        // Maclaurin series converges quickly for |x| < 3
        let mut term = x;
        let mut sum = x;
        let x2 = x * x;
        for k in 1..200 {
            term *= -x2 / k as f64;
            let add = term / (2 * k + 1) as f64;
            sum += add;
            if add.abs() < 1e-17 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    } else {
        // continued fraction tail
        let t = x.abs();
        let mut f = 0.0;
        for k in (1..60).rev() {
            f = k as f64 / 2.0 / (t + f);
        }
        let erfc = (-t * t).exp() / std::f64::consts::PI.sqrt() / (t + f);
        (1.0 - erfc).copysign(x)
    }
}

pub struct GaussianRun {
    pub mean: f64,
    pub variance: f64,
    /// Energy distance every `window` steps, starting at step 0.
    pub energy: Vec<f64>,
}

/// Transports `m` particles toward `N(mu, var)` for `steps` steps,
/// starting from `N(0, 1)` draws.
pub fn svgd_gaussian_run(seed: u64, m: usize, steps: usize, step: f64, window: usize, mu: f64, var: f64) -> GaussianRun {
    let mut r = rng::stream(seed, 0x5f);
    let rows: Vec<Vec<f64>> = (0..m).map(|_| vec![rng::normal(&mut r)]).collect();
    let mut set = ParticleSet::from_rows(&rows, 0).unwrap();
    let score = |z: &[f64]| vec![-(z[0] - mu) / var];
    let xs = |s: &ParticleSet| s.values().data().to_vec();
    let mut energy = vec![energy_distance_to_gaussian(&xs(&set), mu, var)];
    for t in 0..steps {
        svgd::svgd_step(&mut set, score, step).unwrap();
        if (t + 1) % window == 0 {
            energy.push(energy_distance_to_gaussian(&xs(&set), mu, var));
        }
    }
    let v = xs(&set);
    let mean = v.iter().sum::<f64>() / m as f64;
    let variance = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m as f64;
    GaussianRun { mean, variance, energy }
}

pub fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `n` draws of `(x, ρx + √(1−ρ²)·e)` with independent standard normals.
pub fn gaussian_pairs(seed: u64, n: usize, rho: f64) -> svib_core::mine::PairBatch {
    let mut r = rng::stream(seed, 77);
    let (mut xs, mut zs) = (Vec::with_capacity(n), Vec::with_capacity(n));
    for _ in 0..n {
        let a = rng::normal(&mut r);
        let b = rng::normal(&mut r);
        xs.push(vec![a]);
        zs.push(vec![rho * a + (1.0 - rho * rho).sqrt() * b]);
    }
    svib_core::mine::PairBatch::from_rows(&xs, &zs).unwrap()
}

/// A run small enough for exhaustive checks: 3×3 grid padded to 18 dims.
pub fn small_run_config(variant: Variant) -> RunConfig {
    RunConfig {
        variant,
        seed: 11,
        env: EnvConfig {
            base: BaseEnv::Gridworld { size: 3, walls: vec![] },
            horizon: 12,
            noise: NoisyObsConfig {
                pad_dim: 9,
                ..Default::default()
            },
        },
        network: NetworkConfig {
            z_dim: 3,
            noise_dim: 2,
            noise_variance: 0.1,
            encoder_hidden: vec![8],
            head_hidden: vec![8],
            statistics_hidden: vec![8],
        },
        svgd: SvgdConfig {
            particles: 4,
            ..Default::default()
        },
        rl: RlCoefficients::default(),
        probe: Some(ProbeConfig {
            interval: 3,
            steps: 4,
            pool_size: 8,
            ..Default::default()
        }),
        optim: OptimizerConfig::default(),
        schedule: Schedule {
            total_updates: 6,
            num_envs: 3,
            rollout_len: 4,
            checkpoint_interval: 3,
            return_window: 5,
            eval_episodes: 0,
        },
    }
}

/// φ-gradient of the uniform-prior particle update with one particle,
/// against backprop of `J/β` through a single tape.
pub fn reduction_error(config: &RunConfig) -> f64 {
    let mut state = TrainState::new(config.clone(), Execution::Sequential).unwrap();
    let batch = state.rollout().unwrap();
    let g = compute_gradients(
        &state.phi,
        &state.theta,
        &batch,
        config,
        1,
        Execution::Sequential,
        Noise::Sampled(&mut rng::stream(77, 0)),
    )
    .unwrap();

    let tape = Tape::new();
    let enc = state.phi.bind(&tape);
    let heads = state.theta.bind(&tape);
    let z = enc
        .encode(&tape, &batch.observations, 1, Noise::Sampled(&mut rng::stream(77, 0)))
        .unwrap();
    let j = a2c_objective(&tape, &heads, &z, 1, &batch.actions, &batch.returns, &config.rl).unwrap();
    tape.backward(j.objective.scale(1.0 / config.svgd.beta)).unwrap();
    let direct = collect_grads(&enc.vars());

    let mut worst: f64 = 0.0;
    for (a, b) in g.phi.iter().flatten().zip(direct.iter().flatten()) {
        worst = worst.max((a - b).abs() / a.abs().max(b.abs()).max(1e-12));
    }
    worst
}

/// Independent discrete-IB computations, written directly from the
/// definitions without the library's log-space helpers.
pub mod ib {
    use svib_core::oracle::DiscreteIbInstance;

    pub fn marginal(inst: &DiscreteIbInstance) -> Vec<f64> {
        (0..inst.kz())
            .map(|z| inst.p_x.iter().zip(&inst.encoder).map(|(p, row)| p * row[z]).sum())
            .collect()
    }

    pub fn kl(p: &[f64], log_q: &[f64]) -> f64 {
        p.iter()
            .zip(log_q)
            .map(|(&a, &lq)| if a > 0.0 { a * (a.ln() - lq) } else { 0.0 })
            .sum()
    }

    pub fn mi(inst: &DiscreteIbInstance) -> f64 {
        let log_m: Vec<f64> = marginal(inst).iter().map(|m| m.ln()).collect();
        inst.p_x.iter().zip(&inst.encoder).map(|(p, row)| p * kl(row, &log_m)).sum()
    }

    pub fn reward(inst: &DiscreteIbInstance) -> f64 {
        inst.p_x
            .iter()
            .zip(&inst.encoder)
            .map(|(p, row)| p * row.iter().zip(&inst.reward).map(|(q, j)| q * j).sum::<f64>())
            .sum()
    }

    pub fn objective(inst: &DiscreteIbInstance) -> f64 {
        reward(inst) - inst.beta * mi(inst)
    }

    /// `E[J] − β E_X KL(P(Z|X) ‖ U)`.
    pub fn bound(inst: &DiscreteIbInstance, prior: &[f64]) -> f64 {
        let log_u: Vec<f64> = prior.iter().map(|u| u.ln()).collect();
        let kl_sum: f64 = inst.p_x.iter().zip(&inst.encoder).map(|(p, row)| p * kl(row, &log_u)).sum();
        reward(inst) - inst.beta * kl_sum
    }

    /// `ln[P(z) e^{J(z)/β}] − ln Σ`, computed with a max shift.
    pub fn log_target(inst: &DiscreteIbInstance) -> Vec<f64> {
        let raw: Vec<f64> = marginal(inst)
            .iter()
            .zip(&inst.reward)
            .map(|(m, j)| m.ln() + j / inst.beta)
            .collect();
        let top = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + raw.iter().map(|r| (r - top).exp()).sum::<f64>().ln();
        raw.iter().map(|r| r - lse).collect()
    }

    /// `(gap, KL-sum)` for replacing every row with the target.
    pub fn theorem2(inst: &DiscreteIbInstance) -> (f64, f64) {
        let lt = log_target(inst);
        let t: Vec<f64> = lt.iter().map(|v| v.exp()).collect();
        // every row equal: zero information, reward Σ t·J
        let improved: f64 = t.iter().zip(&inst.reward).map(|(a, j)| a * j).sum();
        let gap = improved - objective(inst);
        let log_m: Vec<f64> = marginal(inst).iter().map(|m| m.ln()).collect();
        let cond: f64 = inst.p_x.iter().zip(&inst.encoder).map(|(p, row)| p * kl(row, &lt)).sum();
        (gap, inst.beta * (kl(&t, &log_m) + cond))
    }
}
