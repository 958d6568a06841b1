pub mod baselines;
pub mod calibration;
pub mod error;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod image;
pub mod mesh;
pub mod metrics;
pub mod pose;
pub mod render;
pub mod scene;
pub mod seeds;

pub use calibration::{CalibrationModel, PairTokens, TrainConfig};
pub use error::{Error, MetricError, Result};
pub use features::PatchTokens;
pub use geometry::{CameraIntrinsics, Se3Pose, ViewpointPlan};
pub use harness::{Method, RunConfig, Variant};
pub use image::{ImageF32, Mask};
pub use metrics::{EvalReport, MethodRow};
pub use scene::{DatasetConfig, ImagePair, Split};
