//! Foci and virus-patch detection with a YOLOv2-style single-stage detector.
//!
//! The network is a modified Darknet-19 backbone (one max-pool removed) whose
//! four intermediate resolutions pass through switchable atrous convolution
//! blocks, then a four-level feature pyramid that is pooled and concatenated
//! onto the detection grid. Everything runs on the small tensor and
//! gradient-tape layer in [`tensor`]; no external deep-learning framework is
//! involved.

mod error;

pub mod backbone;
pub mod boxes;
pub mod config;
pub mod eval;
pub mod fpn;
pub mod head;
pub mod io;
pub mod layers;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sac;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
