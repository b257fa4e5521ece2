//! Multi-view reconstruction of plant root skeletons.
//!
//! Lateral roots are detected per view as boxes with start/end keypoints,
//! paired across consecutive views by keypoint-match votes, triangulated and
//! fused into 3D segments, refined by sparse bundle adjustment with an angle
//! prior, and joined into a main root by label propagation over foreground
//! masks.
//!
//! Geometry, the detection codec, fusion primitives and SBA are generic over
//! [`scalar::Real`]; the pipeline runs in `f64`.

pub mod bundle;
pub mod camera;
pub mod config;
pub mod detection;
pub mod error;
pub mod export;
pub mod fusion;
pub mod main_root;
pub mod matching;
pub mod metrics;
pub mod pipeline;
pub mod raster;
pub mod sba;
pub mod scalar;
pub mod synthetic;

pub use config::PipelineConfig;
pub use error::{Error, ErrorKind, Result};
pub use fusion::LateralRoot3D;
pub use main_root::SkeletonGraph;
pub use pipeline::{run_pipeline, run_stage, Stage};

pub type CameraView = camera::CameraView<f64>;
pub type Detection2D = detection::Detection2D<f64>;
pub type KeypointMatch = matching::KeypointMatch<f64>;
