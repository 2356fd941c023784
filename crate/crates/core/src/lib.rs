//! Bidirectional inference networks.
//!
//! A [`BinModel`] chains one Gaussian NPN subnetwork per conditional of a
//! factorized `p(V | X)`. Any subset of `V` can be queried given the rest:
//! by a feedforward sweep, by gradient descent on the missing values, or by
//! a mix of both (see [`inference`]). [`training`] fits the model by maximum
//! likelihood, optionally with composite-likelihood terms.

pub mod autodiff;
pub mod baselines;
pub mod data;
pub mod experiment;
pub mod inference;
pub mod model;
pub mod npn;
pub mod special;
pub mod training;

pub use data::{Dataset, MetricKind, Standardizer, Task, TaskSuite};
pub use experiment::{Method, Prepared, ResultsTable};
pub use inference::{InferenceOptions, InferenceResult, Init, Mode, ModeChoice};
pub use model::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use model::{Architecture, Assignment, BinModel, VariableKind, VariableSpec};
pub use npn::Activation;
pub use training::{TrainConfig, TrainReport};
