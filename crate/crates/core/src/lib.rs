//! Bit-exact binarized network inference and an analytical model of
//! streaming dataflow accelerators built from it.
//!
//! Values are ±1 with +1 stored as a set bit. Feature maps are
//! channel-interleaved (`(row·W + col)·C + ch`) and packed LSB-first into
//! `u64` words.

pub mod error;
pub mod model;
pub mod mvtu;
pub mod oracle;
pub mod pipeline;
pub mod pool;
pub mod resources;
pub mod scheduler;
pub mod swu;

pub use error::{Error, Result};
