//! Riemannian Hamiltonian variational autoencoders: VAE, HVAE and RHVAE
//! objectives, training, evaluation and latent-space geometry.

pub mod checkpoint;
pub mod cluster;
pub mod data;
pub mod error;
pub mod eval;
pub mod flow;
pub mod geometry;
pub mod metric;
pub mod nn;
pub mod rng;
pub mod train;

pub use autodiff;
pub use error::{Error, Result};
pub use metric::{MetricConfig, MetricField};
pub use nn::{ModelKind, ModelSpec};
pub use flow::FlowConfig;
pub use train::{ModelBundle, TrainConfig};
