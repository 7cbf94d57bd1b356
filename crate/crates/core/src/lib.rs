//! Full-frame video stabilization by deep iterative frame interpolation.
//!
//! Every interior frame is replaced by a synthesized temporal midpoint of
//! its neighbors: the neighbors are warped halfway toward each other along
//! optical flow, fused by a gated-convolution U-Net, and refined by a
//! ResNet that also sees the original frame warped onto the fused result.
//! Repeating the pass low-pass filters the camera trajectory without ever
//! cropping the frame.

pub mod error;
pub mod flow;
pub mod frame;
pub mod geometry;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod stabilizer;
pub mod synth;
pub mod training;
pub mod trajectory;
pub mod warp;

pub use error::{Error, Result};
pub use flow::{
    estimate_flow, AnalyticOracle, ClassicalPyramidal, ExternalAdapter, Fallback, FlowEstimator, FlowField, Provenance,
};
pub use frame::{Frame, Mask, VideoSequence};
pub use geometry::Affine2;
