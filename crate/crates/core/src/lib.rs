//! Sparse voxel convolution network with selective state-space channel
//! attention for regressing forest above-ground biomass and wood volume from
//! LiDAR point clouds.

pub mod autodiff;
pub mod bench;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod metrics;
pub mod network;
pub mod optim;
pub mod params;
pub mod sparse;
pub mod sparse_ops;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::DenseTensor;
