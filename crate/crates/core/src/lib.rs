//! Multimodal Tucker fusion: bilinear fusion operators (full, Tucker,
//! slice-rank constrained, low-rank, count-sketch), attention over region
//! grids, a small Adam trainer, and planted synthetic tasks.

pub mod attention;
pub mod error;
pub mod format;
pub mod fusion;
pub mod gradcheck;
pub mod model;
pub mod param;
pub mod sketch;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use fusion::{FusionConfig, FusionOperator, Scheme};
pub use tensor::{Matrix, Mode, Tensor3};
