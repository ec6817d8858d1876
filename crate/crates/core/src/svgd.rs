//! Stein variational gradient machinery over representation particles.
//!
//! For the particles `{Z_j}` of one state the update direction is
//!
//! ```text
//! Φ(Z_i) = 1/M Σ_j [ K(Z_j, Z_i) ∇ log p̂(Z_j) + ∇_{Z_j} K(Z_j, Z_i) ]
//! ```
//!
//! with `log p̂ = J/β + ζ log U`, an RBF kernel `K(a, b) = exp(-‖a-b‖²/h)` and
//! the median-heuristic bandwidth `h = med² / (2 ln(M+1))`. The encoder
//! parameters receive `Σ Φ(Z_i) · ∂Z_i/∂φ` through the reparameterised
//! particles, with `Φ` held constant.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::networks::collect_grads;
use crate::tensor::{Tensor, Var};

/// Bandwidth used when the pairwise median collapses to zero.
pub const BANDWIDTH_FLOOR: f64 = 1e-6;
/// Lower bound on fitted per-dimension prior variances.
pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Below this prior-score norm the ζ rule returns zero.
pub const ZETA_EPS: f64 = 1e-12;

/// `M` samples of the representation for one source state, stored as an
/// `M × d_z` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSet {
    values: Tensor,
    pub source: usize,
}

impl ParticleSet {
    pub fn new(values: Tensor, source: usize) -> Result<Self> {
        if values.shape().len() != 2 {
            return Err(Error::Dimension {
                op: "particle_set",
                lhs: values.shape().to_vec(),
                rhs: vec![2],
            });
        }
        Ok(ParticleSet { values, source })
    }

    pub fn from_rows(rows: &[Vec<f64>], source: usize) -> Result<Self> {
        if rows.is_empty() {
            return contract("particle set needs at least one particle");
        }
        let d = rows[0].len();
        if rows.iter().any(|r| r.len() != d) {
            return contract("particles must share one dimension");
        }
        let data = rows.iter().flatten().copied().collect();
        ParticleSet::new(Tensor::new(vec![rows.len(), d], data)?, source)
    }

    pub fn len(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn particle(&self, i: usize) -> &[f64] {
        self.values.row(i)
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.values.data_mut()
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `h = med² / (2 ln(M+1))` from the median pairwise Euclidean distance.
/// Even pair counts use the mean of the two middle distances.
pub fn median_bandwidth(set: &ParticleSet) -> Result<f64> {
    let m = set.len();
    if m < 2 {
        return contract(format!("median bandwidth needs at least 2 particles, got {m}"));
    }
    let mut d = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(set.particle(i), set.particle(j)).sqrt());
        }
    }
    let n = d.len();
    let mid = n / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = if n % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (lower + upper) / 2.0
    };
    let h = med * med / (2.0 * ((m + 1) as f64).ln());
    Ok(if h < BANDWIDTH_FLOOR { BANDWIDTH_FLOOR } else { h })
}

/// `K(a, b) = exp(-‖a - b‖² / h)`.
pub fn rbf_kernel(a: &[f64], b: &[f64], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return contract(format!("kernel bandwidth must be positive, got {h}"));
    }
    if a.len() != b.len() {
        return Err(Error::Dimension {
            op: "rbf_kernel",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    Ok((-sq_dist(a, b) / h).exp())
}

/// `∇_a K(a, b) = -2 (a - b) / h · K(a, b)`.
pub fn rbf_kernel_grad(a: &[f64], b: &[f64], h: f64) -> Result<Vec<f64>> {
    let k = rbf_kernel(a, b, h)?;
    Ok(a.iter().zip(b).map(|(x, y)| -2.0 * (x - y) / h * k).collect())
}

/// Dense `M × M` Gram matrix of a particle set.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelMatrix {
    pub values: Vec<f64>,
    pub size: usize,
    pub bandwidth: f64,
}

impl KernelMatrix {
    pub fn new(set: &ParticleSet, h: f64) -> Result<Self> {
        let m = set.len();
        let mut values = vec![0.0; m * m];
        for i in 0..m {
            values[i * m + i] = 1.0;
            for j in i + 1..m {
                let k = rbf_kernel(set.particle(i), set.particle(j), h)?;
                values[i * m + j] = k;
                values[j * m + i] = k;
            }
        }
        Ok(KernelMatrix {
            values,
            size: m,
            bandwidth: h,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.size + j]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorKind {
    Uniform,
    BatchGaussian,
}

/// Per-dimension Gaussian fitted on one particle batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianFit {
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum PriorModel {
    Uniform,
    /// `None` until fitted on a particle batch.
    BatchGaussian(Option<GaussianFit>),
}

impl PriorModel {
    /// Prior for one state's particles: `μ = mean(Z)`, `σ² = mean((Z-μ)²)`
    /// per dimension, floored at [`VARIANCE_FLOOR`].
    pub fn fit(kind: PriorKind, set: &ParticleSet) -> Self {
        match kind {
            PriorKind::Uniform => PriorModel::Uniform,
            PriorKind::BatchGaussian => {
                let (m, d) = (set.len(), set.dim());
                let mut mean = vec![0.0; d];
                for i in 0..m {
                    for (k, v) in set.particle(i).iter().enumerate() {
                        mean[k] += v;
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                let mut variance = vec![0.0; d];
                for i in 0..m {
                    for (k, v) in set.particle(i).iter().enumerate() {
                        variance[k] += (v - mean[k]).powi(2);
                    }
                }
                variance
                    .iter_mut()
                    .for_each(|v| *v = (*v / m as f64).max(VARIANCE_FLOOR));
                PriorModel::BatchGaussian(Some(GaussianFit { mean, variance }))
            }
        }
    }

    pub fn is_uniform(&self) -> bool {
        matches!(self, PriorModel::Uniform)
    }
}

/// Score `∇ log U(z)`.
pub fn log_prior_grad(prior: &PriorModel, z: &[f64]) -> Result<Vec<f64>> {
    match prior {
        PriorModel::Uniform => Ok(vec![0.0; z.len()]),
        PriorModel::BatchGaussian(None) => contract("gaussian prior used before fitting"),
        PriorModel::BatchGaussian(Some(fit)) => {
            if fit.mean.len() != z.len() {
                return Err(Error::Dimension {
                    op: "log_prior_grad",
                    lhs: vec![z.len()],
                    rhs: vec![fit.mean.len()],
                });
            }
            Ok(z.iter()
                .zip(fit.mean.iter().zip(&fit.variance))
                .map(|(z, (m, v))| -(z - m) / v)
                .collect())
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `ζ = scale · ‖∇J/β‖ / ‖∇ log U‖`, or zero when the prior score vanishes.
pub fn zeta(grad_j_over_beta: &[f64], grad_log_u: &[f64], zeta_scale: f64) -> Result<f64> {
    if grad_j_over_beta.len() != grad_log_u.len() {
        return Err(Error::Dimension {
            op: "zeta",
            lhs: vec![grad_j_over_beta.len()],
            rhs: vec![grad_log_u.len()],
        });
    }
    let den = norm(grad_log_u);
    if den < ZETA_EPS {
        return Ok(0.0);
    }
    Ok(zeta_scale * norm(grad_j_over_beta) / den)
}

/// ζ for a whole particle batch, using the mean per-particle norms of the
/// two `M × d` score matrices.
pub fn zeta_batch(grad_j_over_beta: &Tensor, grad_log_u: &Tensor, zeta_scale: f64) -> Result<f64> {
    if grad_j_over_beta.shape() != grad_log_u.shape() {
        return Err(Error::Dimension {
            op: "zeta_batch",
            lhs: grad_j_over_beta.shape().to_vec(),
            rhs: grad_log_u.shape().to_vec(),
        });
    }
    let m = grad_j_over_beta.rows();
    let mean_norm =
        |t: &Tensor| (0..m).map(|i| norm(t.row(i))).sum::<f64>() / m as f64;
    let den = mean_norm(grad_log_u);
    if den < ZETA_EPS {
        return Ok(0.0);
    }
    Ok(zeta_scale * mean_norm(grad_j_over_beta) / den)
}

/// Greedy direction for every particle given the target scores evaluated
/// at the particles (`scores` is `M × d`, row `j` = `∇ log p̂(Z_j)`).
pub fn svgd_direction(set: &ParticleSet, scores: &Tensor, h: f64) -> Result<Tensor> {
    let (m, d) = (set.len(), set.dim());
    if scores.shape() != [m, d] {
        return Err(Error::Dimension {
            op: "svgd_direction",
            lhs: vec![m, d],
            rhs: scores.shape().to_vec(),
        });
    }
    if !(h > 0.0) {
        return contract(format!("kernel bandwidth must be positive, got {h}"));
    }
    let mut out = vec![0.0; m * d];
    for j in 0..m {
        let zj = set.particle(j);
        let sj = scores.row(j);
        for i in 0..m {
            let zi = set.particle(i);
            let k = (-sq_dist(zj, zi) / h).exp();
            let o = &mut out[i * d..(i + 1) * d];
            for c in 0..d {
                o[c] += k * sj[c] - 2.0 * (zj[c] - zi[c]) / h * k;
            }
        }
    }
    let inv = 1.0 / m as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![m, d], out)
}

/// [`svgd_direction`] with the score supplied as a function of `z`.
pub fn svgd_direction_with<F>(set: &ParticleSet, score: F, h: f64) -> Result<Tensor>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let (m, d) = (set.len(), set.dim());
    let mut data = Vec::with_capacity(m * d);
    for j in 0..m {
        let s = score(set.particle(j));
        if s.len() != d {
            return Err(Error::Dimension {
                op: "svgd_direction",
                lhs: vec![d],
                rhs: vec![s.len()],
            });
        }
        data.extend(s);
    }
    svgd_direction(set, &Tensor::new(vec![m, d], data)?, h)
}

/// Bandwidth for a set, falling back to the floor for a single particle.
pub fn bandwidth_or_floor(set: &ParticleSet) -> f64 {
    if set.len() < 2 {
        BANDWIDTH_FLOOR
    } else {
        median_bandwidth(set).unwrap_or(BANDWIDTH_FLOOR)
    }
}

/// One transport step `Z ← Z + ε Φ(Z)` with a median-heuristic bandwidth.
pub fn svgd_step<F>(set: &mut ParticleSet, score: F, step: f64) -> Result<()>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    let h = bandwidth_or_floor(set);
    let phi = svgd_direction_with(set, score, h)?;
    set.values_mut()
        .iter_mut()
        .zip(phi.data())
        .for_each(|(z, p)| *z += step * p);
    Ok(())
}

/// Runs `steps` transport steps with step size `step_size / (1 + decay·t)`.
pub fn transport<F>(set: &mut ParticleSet, score: F, steps: usize, step_size: f64, decay: f64) -> Result<()>
where
    F: Fn(&[f64]) -> Vec<f64>,
{
    for t in 0..steps {
        svgd_step(set, &score, step_size / (1.0 + decay * t as f64))?;
    }
    Ok(())
}

/// Gradient of the surrogate `1/N Σ_i ⟨stop(Φ_i), Z_i⟩` with respect to the
/// encoder leaves `phi_vars`. `z` holds all particles of every state
/// (`N × d_z`), `directions` the matching Φ rows. Clears any gradients
/// already accumulated on the tape.
pub fn phi_gradient<'t>(z: &Var<'t>, directions: &Tensor, phi_vars: &[Var<'t>]) -> Result<Vec<Vec<f64>>> {
    if !z.requires_grad() {
        return contract("particles are detached from the encoder parameters");
    }
    if z.shape() != directions.shape() {
        return Err(Error::Dimension {
            op: "phi_gradient",
            lhs: z.shape(),
            rhs: directions.shape().to_vec(),
        });
    }
    let tape = z.tape();
    let n = directions.rows() as f64;
    let surrogate = z.mul(&tape.constant(directions))?.sum().scale(1.0 / n);
    tape.zero_grads();
    tape.backward(surrogate)?;
    Ok(collect_grads(phi_vars))
}

/// Hyperparameters of the particle update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SvgdConfig {
    /// Information-bottleneck coefficient β.
    pub beta: f64,
    pub zeta_scale: f64,
    /// Step size for standalone particle transport.
    pub step_size: f64,
    /// Particles per state (M). The prior is chosen by the trainer variant.
    pub particles: usize,
}

impl Default for SvgdConfig {
    fn default() -> Self {
        SvgdConfig {
            beta: 0.001,
            zeta_scale: 0.005,
            step_size: 0.05,
            particles: 32,
        }
    }
}

impl SvgdConfig {
    pub fn validate(&self) -> std::result::Result<(), (String, String)> {
        if !(self.beta > 0.0) {
            return Err(("svgd.beta".into(), "must be positive".into()));
        }
        if self.particles == 0 {
            return Err(("svgd.particles".into(), "must be at least 1".into()));
        }
        if !(self.step_size > 0.0) {
            return Err(("svgd.step_size".into(), "must be positive".into()));
        }
        if !(self.zeta_scale >= 0.0) {
            return Err(("svgd.zeta_scale".into(), "must be non-negative".into()));
        }
        Ok(())
    }
}
