//! The three parameterised function families: the stochastic encoder
//! `Z = φ(X, ε)`, the shared policy/value heads over `Z`, and the MINE
//! statistics network `T(X, Z)`.
//!
//! Parameters are plain [`Tensor`]s. A forward pass binds them to a
//! [`Tape`] (`bind`), which yields `Bound*` views whose leaf vars carry the
//! gradients after backward.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::rng::{self, StreamRng};
use crate::svgd::ParticleSet;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

/// Network sizes shared by every variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub z_dim: usize,
    pub noise_dim: usize,
    /// Variance (not standard deviation) of the encoder noise ε.
    pub noise_variance: f64,
    pub encoder_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub statistics_hidden: Vec<usize>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            z_dim: 8,
            noise_dim: 8,
            noise_variance: 0.1,
            encoder_hidden: vec![64, 64],
            head_hidden: vec![64, 64],
            statistics_hidden: vec![128],
        }
    }
}

/// Anything that owns a list of named parameter tensors.
pub trait Parameterized {
    fn named_params(&self) -> Vec<(String, &Tensor)>;
    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform fan-in initialisation scaled by `gain`; zero bias.
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize, gain: f64) -> Self {
        let bound = gain / (fan_in as f64).sqrt();
        let w = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..=bound))
            .collect();
        Linear {
            weight: Tensor::new(vec![fan_in, fan_out], w).expect("shape"),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(vec![fan_in, fan_out]),
            bias: Tensor::zeros(vec![fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundLinear<'t> {
        BoundLinear {
            weight: tape.param(&self.weight),
            bias: tape.param(&self.bias),
        }
    }

    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        let (k, n) = (self.fan_in(), self.fan_out());
        out.clear();
        out.extend_from_slice(self.bias.data());
        let w = self.weight.data();
        for (p, &xv) in x.iter().enumerate().take(k) {
            for j in 0..n {
                out[j] += xv * w[p * n + j];
            }
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundLinear<'t> {
    pub weight: Var<'t>,
    pub bias: Var<'t>,
}

impl<'t> BoundLinear<'t> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        x.matmul(&self.weight)?.add(&self.bias)
    }
}

/// Fully connected stack. The activation follows every layer except the
/// last unless `activate_output` is set.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
    pub activate_output: bool,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        sizes: &[usize],
        activation: Activation,
        activate_output: bool,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| Linear::init(rng, w[0], w[1], 1.0))
            .collect();
        Mlp {
            layers,
            activation,
            activate_output,
        }
    }

    pub fn input_dim(&self) -> Option<usize> {
        self.layers.first().map(Linear::fan_in)
    }

    pub fn output_dim(&self) -> Option<usize> {
        self.layers.last().map(Linear::fan_out)
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundMlp<'t> {
        BoundMlp {
            layers: self.layers.iter().map(|l| l.bind(tape)).collect(),
            activation: self.activation,
            activate_output: self.activate_output,
        }
    }

    fn activate(&self, v: &mut [f64]) {
        match self.activation {
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(0.0)),
        }
    }

    /// Tape-free forward pass of a single input row.
    pub fn eval(&self, x: &[f64]) -> Vec<f64> {
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            layer.apply(&cur, &mut next);
            if i < last || self.activate_output {
                self.activate(&mut next);
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                [
                    (format!("{prefix}.{i}.weight"), &l.weight),
                    (format!("{prefix}.{i}.bias"), &l.bias),
                ]
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

pub struct BoundMlp<'t> {
    pub layers: Vec<BoundLinear<'t>>,
    activation: Activation,
    activate_output: bool,
}

impl<'t> BoundMlp<'t> {
    pub fn forward(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = *x;
        let last = self.layers.len().saturating_sub(1);
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last || self.activate_output {
                h = match self.activation {
                    Activation::Tanh => h.tanh(),
                    Activation::Relu => h.relu(),
                };
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|l| [l.weight, l.bias]).collect()
    }
}

/// Reads the gradients off a list of bound leaves, zero-filled where the
/// leaf was unreachable from the loss.
pub fn collect_grads(vars: &[Var<'_>]) -> Vec<Vec<f64>> {
    vars.iter()
        .map(|v| match v.grad() {
            Some(g) => g.into_data(),
            None => vec![0.0; v.data().len()],
        })
        .collect()
}

/// Stochastic encoder `Z = φ([X; ε])` with ε ~ N(0, σ²_ε · I).
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub net: Mlp,
    pub d_x: usize,
    pub d_noise: usize,
    pub d_z: usize,
    pub noise_variance: f64,
    /// When false the noise input is held at zero (the deterministic `φ(X)`
    /// baseline) while the network shape stays identical.
    pub stochastic: bool,
}

/// Source of encoder noise.
pub enum Noise<'a> {
    Sampled(&'a mut StreamRng),
    Zero,
}

impl EncoderParams {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        d_x: usize,
        cfg: &NetworkConfig,
        stochastic: bool,
    ) -> Result<Self> {
        let mut sizes = vec![d_x + cfg.noise_dim];
        sizes.extend_from_slice(&cfg.encoder_hidden);
        sizes.push(cfg.z_dim);
        let net = Mlp::new(rng, &sizes, Activation::Tanh, false);
        EncoderParams::from_net(net, d_x, cfg.noise_dim, cfg.noise_variance, stochastic)
    }

    pub fn from_net(
        net: Mlp,
        d_x: usize,
        d_noise: usize,
        noise_variance: f64,
        stochastic: bool,
    ) -> Result<Self> {
        let d_z = net
            .output_dim()
            .ok_or_else(|| Error::Contract("encoder has no layers".into()))?;
        if net.input_dim() != Some(d_x + d_noise) {
            return Err(Error::Dimension {
                op: "encoder",
                lhs: vec![net.input_dim().unwrap_or(0)],
                rhs: vec![d_x + d_noise],
            });
        }
        if d_z >= d_x {
            return contract(format!("encoder output dim {d_z} must be below input dim {d_x}"));
        }
        if !(noise_variance > 0.0) {
            return contract(format!("noise variance must be positive, got {noise_variance}"));
        }
        Ok(EncoderParams {
            net,
            d_x,
            d_noise,
            d_z,
            noise_variance,
            stochastic,
        })
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundEncoder<'t> {
        BoundEncoder {
            net: self.net.bind(tape),
            d_x: self.d_x,
            d_noise: self.d_noise,
            d_z: self.d_z,
            std: self.noise_variance.sqrt(),
            stochastic: self.stochastic,
        }
    }

    /// Single tape-free sample for acting.
    pub fn sample(&self, x: &[f64], noise: Noise<'_>) -> Vec<f64> {
        let mut input = Vec::with_capacity(self.d_x + self.d_noise);
        input.extend_from_slice(x);
        let std = self.noise_variance.sqrt();
        match noise {
            Noise::Sampled(r) if self.stochastic => {
                input.extend((0..self.d_noise).map(|_| std * rng::normal(r)))
            }
            _ => input.extend(std::iter::repeat_n(0.0, self.d_noise)),
        }
        self.net.eval(&input)
    }
}

impl Parameterized for EncoderParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.net.named("encoder")
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.tensors_mut()
    }
}

pub struct BoundEncoder<'t> {
    pub net: BoundMlp<'t>,
    d_x: usize,
    d_noise: usize,
    d_z: usize,
    std: f64,
    stochastic: bool,
}

impl<'t> BoundEncoder<'t> {
    pub fn d_z(&self) -> usize {
        self.d_z
    }

    /// Encodes `b` states (row-major `b × d_x`) with `m` particles each.
    /// Row `t·m + i` of the result is particle `i` of state `t`.
    pub fn encode(
        &self,
        tape: &'t Tape,
        states: &[f64],
        m: usize,
        noise: Noise<'_>,
    ) -> Result<Var<'t>> {
        if m == 0 {
            return contract("particle count must be at least 1");
        }
        if states.is_empty() || states.len() % self.d_x != 0 {
            return Err(Error::Dimension {
                op: "encode",
                lhs: vec![states.len()],
                rhs: vec![self.d_x],
            });
        }
        let b = states.len() / self.d_x;
        let width = self.d_x + self.d_noise;
        let mut input = Vec::with_capacity(b * m * width);
        let mut noise = noise;
        for t in 0..b {
            let x = &states[t * self.d_x..(t + 1) * self.d_x];
            for _ in 0..m {
                input.extend_from_slice(x);
                match &mut noise {
                    Noise::Sampled(r) if self.stochastic => {
                        for _ in 0..self.d_noise {
                            input.push(self.std * rng::normal(*r));
                        }
                    }
                    _ => input.extend(std::iter::repeat_n(0.0, self.d_noise)),
                }
            }
        }
        let x = tape.constant(&Tensor::new(vec![b * m, width], input)?);
        self.net.forward(&x)
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.net.vars()
    }
}

/// Particles for one state together with their tape handle.
pub struct EncodedParticles<'t> {
    pub z: Var<'t>,
    pub set: ParticleSet,
}

/// Draws `m` reparameterised samples `Z_i = φ(x, ε_i)` for one state.
pub fn encode_particles<'t>(
    tape: &'t Tape,
    phi: &BoundEncoder<'t>,
    x: &[f64],
    m: usize,
    noise: Noise<'_>,
) -> Result<EncodedParticles<'t>> {
    if x.len() != phi.d_x {
        return Err(Error::Dimension {
            op: "encode_particles",
            lhs: vec![x.len()],
            rhs: vec![phi.d_x],
        });
    }
    let z = phi.encode(tape, x, m, noise)?;
    let set = ParticleSet::new(z.value(), 0)?;
    Ok(EncodedParticles { z, set })
}

/// Shared trunk with a softmax policy head and a scalar value head.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyValueParams {
    pub trunk: Mlp,
    pub policy: Linear,
    pub value: Linear,
}

impl PolicyValueParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_z: usize, n_actions: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![d_z];
        sizes.extend_from_slice(hidden);
        let trunk = Mlp::new(rng, &sizes, Activation::Tanh, true);
        let width = *sizes.last().unwrap();
        PolicyValueParams {
            trunk,
            policy: Linear::init(rng, width, n_actions, 0.01),
            value: Linear::init(rng, width, 1, 1.0),
        }
    }

    /// All-zero weights: uniform policy and zero value everywhere.
    pub fn zeros(d_z: usize, n_actions: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![d_z];
        sizes.extend_from_slice(hidden);
        let trunk = Mlp {
            layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
            activation: Activation::Tanh,
            activate_output: true,
        };
        let width = *sizes.last().unwrap();
        PolicyValueParams {
            trunk,
            policy: Linear::zeros(width, n_actions),
            value: Linear::zeros(width, 1),
        }
    }

    pub fn d_z(&self) -> usize {
        self.trunk.input_dim().unwrap_or(self.policy.fan_in())
    }

    pub fn n_actions(&self) -> usize {
        self.policy.fan_out()
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundPolicyValue<'t> {
        BoundPolicyValue {
            trunk: self.trunk.bind(tape),
            policy: self.policy.bind(tape),
            value: self.value.bind(tape),
        }
    }
}

impl Parameterized for PolicyValueParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.trunk.named("heads.trunk");
        v.push(("heads.policy.weight".into(), &self.policy.weight));
        v.push(("heads.policy.bias".into(), &self.policy.bias));
        v.push(("heads.value.weight".into(), &self.value.weight));
        v.push(("heads.value.bias".into(), &self.value.bias));
        v
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.trunk.tensors_mut();
        v.extend([
            &mut self.policy.weight,
            &mut self.policy.bias,
            &mut self.value.weight,
            &mut self.value.bias,
        ]);
        v
    }
}

pub struct BoundPolicyValue<'t> {
    pub trunk: BoundMlp<'t>,
    pub policy: BoundLinear<'t>,
    pub value: BoundLinear<'t>,
}

impl<'t> BoundPolicyValue<'t> {
    /// Returns `(log π(·|z) [N, A], V(z) [N])` for a batch `z` of shape `[N, d_z]`.
    pub fn forward(&self, z: &Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let h = self.trunk.forward(z)?;
        let logits = self.policy.forward(&h)?;
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericDomain {
                op: "policy_value",
                detail: "non-finite policy logits".into(),
            });
        }
        let n = logits.shape()[0];
        let value = self.value.forward(&h)?.reshape(vec![n])?;
        Ok((logits.log_softmax(), value))
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        let mut v = self.trunk.vars();
        v.extend([
            self.policy.weight,
            self.policy.bias,
            self.value.weight,
            self.value.bias,
        ]);
        v
    }
}

/// Action probabilities and value for one representation, without a tape.
pub fn policy_value(theta: &PolicyValueParams, z: &[f64]) -> Result<(Vec<f64>, f64)> {
    if z.len() != theta.d_z() {
        return Err(Error::Dimension {
            op: "policy_value",
            lhs: vec![z.len()],
            rhs: vec![theta.d_z()],
        });
    }
    let h = theta.trunk.eval(z);
    let mut logits = Vec::new();
    theta.policy.apply(&h, &mut logits);
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericDomain {
            op: "policy_value",
            detail: "non-finite policy logits".into(),
        });
    }
    let lse = crate::tensor::log_sum_exp(&logits);
    let probs = logits.iter().map(|l| (l - lse).exp()).collect();
    let mut v = Vec::new();
    theta.value.apply(&h, &mut v);
    Ok((probs, v[0]))
}

/// Entropy in nats of a probability vector.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|p| p * p.ln())
        .sum::<f64>()
}

/// MINE statistics network `T([X; Z]) -> scalar`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatisticsNetParams {
    pub net: Mlp,
    pub d_x: usize,
    pub d_z: usize,
}

impl StatisticsNetParams {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, d_x: usize, d_z: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![d_x + d_z];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        StatisticsNetParams {
            net: Mlp::new(rng, &sizes, Activation::Relu, false),
            d_x,
            d_z,
        }
    }

    pub fn zeros(d_x: usize, d_z: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![d_x + d_z];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        StatisticsNetParams {
            net: Mlp {
                layers: sizes.windows(2).map(|w| Linear::zeros(w[0], w[1])).collect(),
                activation: Activation::Relu,
                activate_output: false,
            },
            d_x,
            d_z,
        }
    }

    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundStatistics<'t> {
        BoundStatistics {
            net: self.net.bind(tape),
            d_x: self.d_x,
            d_z: self.d_z,
        }
    }
}

impl Parameterized for StatisticsNetParams {
    fn named_params(&self) -> Vec<(String, &Tensor)> {
        self.net.named("statistics")
    }
    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.net.tensors_mut()
    }
}

pub struct BoundStatistics<'t> {
    pub net: BoundMlp<'t>,
    d_x: usize,
    d_z: usize,
}

impl<'t> BoundStatistics<'t> {
    /// `T` for paired rows of `x [N, d_x]` and `z [N, d_z]`; returns `[N]`.
    pub fn forward(&self, x: &Var<'t>, z: &Var<'t>) -> Result<Var<'t>> {
        let (xs, zs) = (x.shape(), z.shape());
        if xs.len() != 2 || zs.len() != 2 || xs[1] != self.d_x || zs[1] != self.d_z {
            return Err(Error::Dimension {
                op: "statistic",
                lhs: xs,
                rhs: zs,
            });
        }
        let n = xs[0];
        self.net.forward(&x.concat_cols(z)?)?.reshape(vec![n])
    }

    pub fn vars(&self) -> Vec<Var<'t>> {
        self.net.vars()
    }
}

/// `T(x, z)` for a single pair.
pub fn statistic(eta: &StatisticsNetParams, x: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != eta.d_x || z.len() != eta.d_z {
        return Err(Error::Dimension {
            op: "statistic",
            lhs: vec![x.len(), z.len()],
            rhs: vec![eta.d_x, eta.d_z],
        });
    }
    let mut input = x.to_vec();
    input.extend_from_slice(z);
    Ok(eta.net.eval(&input)[0])
}
