//! Instance-reweighted robust continual training and loss-ranking sample
//! selection, exercised on a small byte-level language model.
//!
//! The pure math lives in [`reweight`] and [`select`]; [`model`] and
//! [`optim`] provide the network and update rules; [`train`] runs the
//! training loop; [`data`], [`report`] and [`run`] handle corpora, metrics
//! and run directories; [`cli`] is the `irdro` executable.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod report;
pub mod reweight;
pub mod run;
pub mod select;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
