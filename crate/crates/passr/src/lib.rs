//! Stereo image super-resolution with parallax attention.
//!
//! The crate is self-contained: a small tensor/autodiff core (`tensor`,
//! `ops`, `tape`), network building blocks (`nn`, `pam`, `net`), the
//! training objective (`loss`), a synthetic stereo data pipeline (`data`),
//! quality metrics (`metrics`), and training/checkpoint plumbing
//! (`optim`, `ckpt`, `train`) behind the `passr` command line tool.

pub mod ckpt;
pub mod cli;
pub mod data;
pub mod error;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod nn;
pub mod optim;
pub mod ops;
pub mod pam;
pub mod scalar;
pub mod tape;
pub mod tensor;
pub mod train;

pub use cli::run;
