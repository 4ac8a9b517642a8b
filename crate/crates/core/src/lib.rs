//! Edge-guided unsupervised domain adaptation for image segmentation.
//!
//! A contour network, adapted through an adversarial loss on its edge maps,
//! feeds an edge-conditioned encoder-decoder segmenter that is adapted through
//! a feature-level adversarial loss and per-pixel entropy minimisation. All
//! networks run on a small in-crate reverse-mode autodiff engine in f64.

pub mod edgelabel;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nets;
pub mod parallel;
pub mod pgm;
pub mod raster;
pub mod synthdata;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
