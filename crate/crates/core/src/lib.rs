//! Embedding-level bridging between modalities that were never paired in
//! training: anchor alignment with InfoNCE, proxy-embedding synthesis, and
//! proxy alignment restricted to the subspace orthogonal to the
//! anchor-alignment direction.
//!
//! The crate is `no_std` (it needs `alloc`). File formats, configuration and
//! the command-line runner live in the `bridge-runner` crate.
#![no_std]
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

extern crate alloc;
#[cfg(any(test, feature = "std"))]
extern crate std;

pub mod diffmath;
pub mod error;
pub mod eval;
pub mod losses;
pub mod proxy;
pub mod rng;
pub mod synth;
pub mod train;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
