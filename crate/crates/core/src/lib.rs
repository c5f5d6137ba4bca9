//! Two-stage relevant reasoning segmentation over synthetic indoor scenes.
//!
//! The crate bundles a small reverse-mode autodiff core ([`nncore`]), the
//! models built on it ([`backbone`], [`fusion`], [`langmodel`], [`maskhead`]),
//! the two-stage pipeline ([`r2s`]) and its training loop ([`trainer`]), a
//! synthetic dataset forge ([`scenekit`], [`reasonforge`]), metrics
//! ([`evalkit`]) and the command layer behind the `r2seg` binary ([`cli`]).

pub mod error;
pub mod cli;
pub mod evalkit;
pub mod nncore;
pub mod scenekit;
pub mod backbone;
pub mod fusion;
pub mod langmodel;
pub mod maskhead;
pub mod r2s;
pub mod reasonforge;
pub mod trainer;

pub use error::{Error, Result};
