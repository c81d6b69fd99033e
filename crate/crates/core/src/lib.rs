//! Learned control barrier function operators for control-affine systems in
//! parameterized environments.
//!
//! The crate covers the whole pipeline: dynamics and the closed-form box
//! Hamiltonian ([`systems`]), composed state constraints ([`environment`]),
//! the MLP operator with analytic gradients ([`network`]), HJ-residual
//! training ([`training`]), the CBF-QP safety filter ([`filter`]), and
//! closed-loop simulation with grid oracles ([`sim`]).

pub mod bounds;
pub mod config;
pub mod environment;
pub mod error;
pub mod filter;
pub mod network;
pub mod parallel;
pub mod sim;
pub mod systems;
pub mod training;

pub use bounds::BoxBounds;
pub use environment::{ConstraintTree, EnvDistribution, EnvParams, Environment};
pub use error::{Error, Result};
pub use filter::{safety_filter, FilterOutput, FilterProblem, QpStatus, ReferenceController};
pub use network::{CbfModel, CbfOperator, InputNormalizer, MlpParams, ModelConfig, ParamGradient};
pub use systems::{BuiltinSystem, ControlAffineSystem, SystemSpec};
pub use training::{train, JointDataset, TrainConfig};
