//! Radar–optical object detection on a synthetic benchmark.
//!
//! Radar points are gated by 2D image boxes, fused point-wise with image
//! features in a small MLP network, and decoded from object-centric local
//! coordinates into object centers.
//!
//! The numeric core is generic over [`Scalar`] (`f32` / `f64`); the aliases
//! below fix the common instantiations.

pub mod association;
pub mod autograd;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod frame_io;
pub mod fusion;
pub mod geometry;
pub mod gradcheck;
pub mod rng;
pub mod scalar;
pub mod sim;
pub mod tensor;
pub mod training;

pub use association::{associate, BBox2D, CandidateSet, PointClass};
pub use autograd::{Gradients, NodeId, OpKind, Tape};
pub use checkpoint::Checkpoint;
pub use codec::{CodecConfig, CodecMode, GlobalGridConfig, LocalTarget};
pub use config::ExperimentConfig;
pub use error::{Error, Result};
pub use evaluation::{Detection, EvalConfig, EvalReport};
pub use fusion::{ArchConfig, Params};
pub use geometry::{CameraExtrinsics, CameraIntrinsics, RadarPoint, SignConvention};
pub use scalar::Scalar;
pub use sim::{Frame, SimConfig};
pub use tensor::Tensor;
pub use training::TrainConfig;

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type Tape64 = Tape<f64>;
pub type Params64 = Params<f64>;
pub type Params32 = Params<f32>;
pub type Intrinsics64 = CameraIntrinsics<f64>;
pub type Extrinsics64 = CameraExtrinsics<f64>;
