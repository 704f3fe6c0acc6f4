pub mod checkpoint;
pub mod config;
pub mod data;
pub mod distill;
pub mod error;
pub mod graph;
pub mod harness;
pub mod kernels;
pub mod landscape;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod probe;
pub mod rng;
pub mod supervised;
pub mod tensor;

pub use error::{Error, ParseError, Result};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use tensor::Tensor;

pub use nn::{init_params, ModelSpec, ModelState, Mode, ParamVector};
pub use config::ExperimentConfig;
pub use data::Dataset;
pub use distill::DistillConfig;
pub use probe::ProbeConfig;
pub use supervised::SupervisedConfig;
