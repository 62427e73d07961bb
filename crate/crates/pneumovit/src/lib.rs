//! Std companion of `pneumovit-core`: image IO, file formats, experiment
//! configuration, report writers and the command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod formats;
pub mod images;
pub mod report;

pub use error::{AppError, AppResult};
