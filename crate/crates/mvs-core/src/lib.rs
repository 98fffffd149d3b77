//! Dense multi-view stereo: per-view depth/normal maps by PatchMatch-style
//! sweep optimization with per-pixel view selection, planar hypotheses from
//! superpixel plane fits in low-texture areas, depth refinement, and fusion
//! of the maps into an evaluated point cloud.

pub mod config;
pub mod depthmap;
pub mod fusion;
pub mod geometry;
pub mod patchmatch;
pub mod photo;
pub mod pipeline;
pub mod prior;
pub mod refine;
pub mod rng;
pub mod scene;
pub mod views;

pub use depthmap::DepthNormalMap;
pub use scene::{CameraView, GroundTruth, SceneBundle, SceneError};
