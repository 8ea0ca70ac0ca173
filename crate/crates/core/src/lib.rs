//! Structured GANs: generators and discriminators whose architecture, not
//! their loss, guarantees left-right symmetry properties of the images they
//! produce and judge; one-shot generator fine-tuning for image inversion and
//! rotation; and tile generators whose outputs are seamless by construction.
//!
//! Everything runs on a small dense-tensor engine with reverse-mode
//! differentiation ([`tensor`]).

pub mod cli;
pub mod data;
pub mod error;
pub mod models;
pub mod par;
pub mod structured;
pub mod tensor;
pub mod tiling;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
