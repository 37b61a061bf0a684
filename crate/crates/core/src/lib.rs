pub mod ablation;
pub mod codecs;
pub mod entropy;
pub mod error;
pub mod eval;
pub mod flow;
mod kernels;
pub mod mamvp;
pub mod media;
pub mod metrics;
pub mod mmc;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod train;
pub mod registry;
pub mod warp;

pub use error::{Error, Result, Stage};
pub use media::{ClipSpec, Frame, FrameKind, SequenceSource};
pub use warp::MotionField;
