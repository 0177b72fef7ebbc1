//! Federated class-incremental learning simulator.
//!
//! Clients learn a stream of class-incremental tasks and fight forgetting by
//! translating real features of new classes into pseudo features of old
//! classes, using class prototypes (mean feature vectors). The server averages
//! weights and fuses client prototypes into a global knowledge base. Every run
//! is scored for continual utility, privacy (gradient inversion) and
//! efficiency.
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the experiment
//! driver runs in `f64`, and the `*64` aliases below name those instances.

pub mod client;
pub mod data;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod nn;
pub mod scalar;
pub mod seed;
pub mod server;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = nn::Tensor<f64>;
pub type Tensor32 = nn::Tensor<f32>;
pub type ModelParams64 = nn::ModelParams<f64>;
pub type ModelParams32 = nn::ModelParams<f32>;
pub type GradientSet64 = nn::GradientSet<f64>;
pub type LabeledSample64 = data::LabeledSample<f64>;
pub type PrototypeList64 = client::PrototypeList<f64>;
pub type ClientState64 = client::ClientState<f64>;
pub type KnowledgeBase64 = server::KnowledgeBase<f64>;
