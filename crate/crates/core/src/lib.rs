//! Few-shot fault diagnosis of three-phase motors from simulated and measured
//! stator currents.
//!
//! The crate is `no_std` (it only needs `alloc`) and contains every numerical
//! piece of the pipeline:
//!
//! - [`tensor`]: dense f64 tensors with a reverse-mode autodiff tape and Adam.
//! - [`twinsim`]: a parametric three-phase current surrogate for the virtual
//!   twin and for a "physical" domain with a configurable sim-to-real gap.
//! - [`periodicity`]: averaged spectrum, top-k dominant periods, 1D↔2D folding.
//! - [`model`]: the multi-periodicity representation network and its variants.
//! - [`episodic`]: episode sampling, prototypes, distance softmax, episode loss
//!   and the meta-training loop.
//! - [`adapt`]: covariance-guided feature augmentation, bi-directional
//!   prototype anchoring and query inference.
//!
//! File formats, the experiment harness and the CLI live in the `twinproto`
//! crate.
#![no_std]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod adapt;
pub mod episodic;
mod error;
pub mod fft;
pub mod model;
pub mod periodicity;
pub mod seed;
pub mod tensor;
pub mod twinsim;

pub use error::{Error, Result};
