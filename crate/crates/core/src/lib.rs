//! Adversarial correlation adaptation for video action recognition.
//!
//! The crate is self-contained: [`tensor`] provides the differentiable
//! arithmetic, [`encoder`], [`correlation`] and [`heads`] build the network,
//! [`losses`] holds the alignment objectives, [`data`] generates and stores
//! the bright/dark synthetic benchmark and [`trainer`] runs the adversarial
//! training loop and its ablations.

pub mod correlation;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod heads;
pub mod losses;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
