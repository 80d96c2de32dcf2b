//! Conditional paths, couplings and the training loop.

pub mod config;
pub mod coupling;
pub mod path;
pub mod train;

pub use config::{Coupling, FlowConfig, Interpolation, OtConfig, SolverType, TrainConfig};
pub use coupling::{couple_independent, couple_ot, sinkhorn, sq_euclidean, OtPairs, SinkhornOutput};
pub use path::{cfm_loss, interpolate, sample_path_point, PathSample};
pub use train::{build_model, train, Trainer};
