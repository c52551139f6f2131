//! Inter-slice super-resolution for anisotropic MR volumes.
//!
//! A coordinate-conditioned interpolation network is trained in three
//! stages (video frame interpolation, supervised fine-tuning on
//! high-resolution volumes, per-subject self-supervised fine-tuning) and
//! then queried between acquired slices to synthesize the missing ones.

pub mod cli;
pub mod degrade;
pub mod error;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{extract_slice, normalize_intensities, Axis, Frame, FrameSequence, InterpolationSample, TargetCoordinate, Volume};
