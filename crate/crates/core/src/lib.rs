//! Information-bottleneck representation learning for actor-critic RL.
//!
//! A stochastic encoder `Z = φ([X; ε])` is trained by Stein variational
//! particle transport toward `P(Z|X) ∝ U(Z)·exp(J(Z)/β)`, while policy and
//! value heads are trained by A2C on the sampled representations. MINE
//! probes track `I(X, Z)` during training, and a finite-alphabet oracle
//! checks the underlying identities exactly.

pub mod checkpoint;
pub mod env;
pub mod error;
pub mod metrics;
pub mod mine;
pub mod networks;
pub mod optim;
pub mod oracle;
pub mod par;
pub mod rl;
pub mod rng;
pub mod svgd;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use par::Execution;
pub use tensor::{Tape, Tensor, Var};
pub use trainer::{train, RunConfig, Variant};
