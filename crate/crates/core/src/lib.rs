//! Associated spatio-temporal capsule network for multimodal gait recognition.
//!
//! The network reads a `K x T` window through two parallel paths: a gated
//! recurrent memory cell over the `T` time steps and a sigmoid convolution
//! over the grid. The temporal state is tiled over the feature maps, projected
//! into primary capsules, routed by agreement into one digit capsule per class,
//! and related pairwise through transfer matrices. Four classifier heads vote
//! and a naive-Bayes layer fuses the votes.

pub mod capsules;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decision;
pub mod graph;
pub mod gradcheck;
pub mod memory;
pub mod metrics;
pub mod model;
pub mod params;
pub mod race;
pub mod rng;
pub mod spatiotemporal;
pub mod tensor;
pub mod train;
pub mod verify;

pub use graph::{Graph, MarginParams, NodeId};
pub use rng::Rng;
pub use tensor::{Result, Tensor, TensorError};
