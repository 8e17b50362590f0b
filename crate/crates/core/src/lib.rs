#![no_std]
//! Background-masked self-attention inside a three-scale hierarchical
//! vision transformer, with the tiling, training and evaluation machinery
//! around it. Pure computation only; file formats and the command line live
//! in the `maskvit` crate.

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attention;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod heatmap;
pub mod nn;
pub mod hvit;
pub mod optim;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
