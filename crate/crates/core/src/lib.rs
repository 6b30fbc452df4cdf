//! One-shot object detection with mutual non-local co-attention,
//! squeeze-and-co-excitation and margin-based proposal ranking, trained
//! and evaluated on a procedurally generated benchmark.

// `!(x > 0.0)` is deliberate: it also rejects NaN.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::needless_range_loop
)]

pub mod blocks;
pub mod cli;
pub mod config;
pub mod detector;
pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod losses;
pub mod nn;
pub mod rng;
pub mod synthdata;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{ParamStore, Tape, Tensor, Var};
