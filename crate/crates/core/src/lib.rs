//! Few-shot traversability segmentation from RGB images and 1-D laser scans.
//!
//! The crate is framework-free: [`tape`] provides a small reverse-mode
//! differentiation engine, and every network component is written on top of
//! it.

pub mod depth;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod kernels;
pub mod model;
pub mod nn;
pub mod params;
pub mod pnm;
pub mod proto;
pub mod rgb;
pub mod sim;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{Bound, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{Real, Tensor};
