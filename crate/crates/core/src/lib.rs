//! Stereoscopic universal perturbations on toy differentiable stereo networks.
//!
//! Synthetic scenes, small stereo networks with correlation or concatenation
//! cost volumes, universal adversarial patches tiled across both views, and
//! the evaluation and analysis tools around them.

pub mod analysis;
pub mod attack;
pub mod checkpoint;
pub mod defense;
pub mod error;
pub mod eval;
pub mod metrics;
pub mod net;
pub mod netpbm;
pub mod scene;

pub use error::{Error, Result};
pub use net::{ConvMode, CostMode, LossSpec, StereoNet, StereoNetConfig, TrainConfig, TrainReport};
pub use scene::{RegionLabel, SceneConfig, StereoSample};
