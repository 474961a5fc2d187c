//! Graph-refined convolutional recommender for multimodal implicit feedback.
//!
//! The model scores every training edge against a per-user content
//! prototype, down-weights edges that do not fit, and runs weighted graph
//! convolution over the refined graph. Numeric code is generic over
//! [`Scalar`]; the aliases below fix it to `f64`.

pub mod autodiff;
pub mod error;
pub mod eval;
pub mod gcn;
pub mod graph;
pub mod io;
pub mod model;
pub mod pipeline;
pub mod refine;
pub mod rng;
pub mod scalar;
pub mod synthgen;
pub mod train;

pub use error::{Error, Result};
pub use gcn::{Hyperparams, RegKind};
pub use graph::{InteractionGraph, Partition, TrainTopology};
pub use refine::{FusionMode, Modality};
pub use scalar::Scalar;

pub type Tensor = autodiff::Tensor<f64>;
pub type Tape = autodiff::Tape<f64>;
pub type ModelParams = gcn::ModelParams<f64>;
pub type RefineParams = refine::RefineParams<f64>;
pub type FeatureTable = refine::ModalityFeatureTable<f64>;
pub type EdgeWeightSet = refine::EdgeWeightSet<f64>;
pub type Inference = model::Inference<f64>;
pub type OptimizerState = train::OptimizerState<f64>;
