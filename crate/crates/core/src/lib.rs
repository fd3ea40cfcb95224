//! Diffeomorphic image registration with a learned probabilistic deformation code.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod cli;
pub mod cvae_model;
pub mod error;
pub mod grid_field;
pub mod latent_analysis;
pub mod similarity;
pub mod synth_data;
pub mod trainer;

pub use error::{Error, Result};
