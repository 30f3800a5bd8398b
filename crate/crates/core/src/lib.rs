//! Compression codec for 3D Gaussian splat scenes.
//!
//! The pipeline takes a trained splat scene (PLY), learns a per-Gaussian
//! mask to drop redundant primitives, residual-vector-quantizes the geometry
//! attributes, distills view-dependent color into a multiresolution hash grid
//! with a small MLP head, and writes everything into a single binary
//! container with optional post-processing (quantization, hash pruning,
//! entropy coding). Decoding reverses the container into a renderable scene.

pub mod camera;
pub mod cloud;
pub mod config;
pub mod container;
pub mod error;
pub mod field;
pub mod img;
pub mod mask;
pub mod metrics;
pub mod optim;
pub mod pipeline;
pub mod ply;
pub mod postproc;
pub mod render;
pub mod rvq;
pub mod sh;
pub mod sweep;
pub mod synth;
pub mod util;

pub use camera::CameraPose;
pub use cloud::GaussianCloud;
pub use error::{GsError, Result};
pub use img::Image;
pub use mask::{MaskMode, MaskState};
pub use render::{RenderSettings, SplatView};
