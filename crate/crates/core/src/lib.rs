//! Reconstruction of complex object images from computational-imaging
//! measurements by gradient descent through explicit forward models.
//!
//! Four imaging models are covered: Fourier ptychography with an intensity
//! loss ([`models::fp_intensity_forward`]) or an exit-wave loss after a
//! Fourier-magnitude projection ([`models::fp_exitwave_forward`]),
//! single-pixel imaging and structured illumination microscopy. Each model
//! has hand-derived gradients in [`grad`], and [`engine`] drives them with the
//! optimizers in [`optim`].

// Parameter checks are written as `!(x > 0.0)` on purpose so NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod engine;
pub mod error;
pub mod field;
pub mod grad;
pub mod models;
pub mod optics;
pub mod optim;
pub mod par;
pub mod simdata;

pub use error::{Error, Result};
pub use field::{ComplexField, RealImage, Spectrum, C64};
pub use optics::OpticsConfig;
