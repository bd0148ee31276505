//! Counterfactual explanations by gradient ascent in the latent space of
//! invertible generative models, with manifold diagnostics on analytic toy
//! data.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod autodiff;
pub mod autoencoder;
pub mod counterfactual;
pub mod datasets;
pub mod evaluation;
pub mod experiment;
pub mod error;
pub mod flow;
pub mod generator;
pub mod geometry;
pub mod io;
pub mod linalg;
pub mod nn;
pub mod predictor;
pub mod regression;

pub use error::{Error, Result};
