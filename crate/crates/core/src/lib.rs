//! Adaptive detection head: a dynamic attention stack over feature pyramids,
//! parallel class/box regression, anchor coding, losses, non-maximum
//! suppression and mAP evaluation, plus a small training pipeline on
//! synthetic microscopy-like scenes.

pub mod anchors;
pub mod attention;
pub mod backbone;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod init;
pub mod losses;
pub mod model;
pub mod ops;
pub mod postprocess;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Precision, Tensor};
