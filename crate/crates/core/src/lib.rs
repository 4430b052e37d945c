//! Defocus simulation and learning-based two-shot virtual autofocusing for
//! whole-slide imaging.
//!
//! The crate covers the whole loop: a scalar defocus PSF ([`optics`]),
//! layered rendering of defocused captures ([`imaging`]), Brenner focus
//! scoring ([`focus`]), synthetic phantoms and datasets ([`phantom`]), a
//! small autodiff core ([`nn`]), the dual-encoder fusion network
//! ([`tsva`]), and evaluation workflows ([`pipeline`]).
//!
//! Numeric code is generic over [`Scalar`] (`f32` or `f64`); the aliases
//! below fix the double-precision types used for training and evaluation.

pub mod error;
pub mod focus;
pub mod image;
pub mod imaging;
pub mod io;
pub mod nn;
pub mod optics;
pub mod phantom;
pub mod pipeline;
pub mod scalar;
pub mod tsva;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Image64 = image::Image<f64>;
pub type Image32 = image::Image<f32>;
pub type Tensor64 = nn::Tensor4<f64>;
pub type Tensor32 = nn::Tensor4<f32>;
pub type Kernel64 = optics::PsfKernel<f64>;
pub type Sample64 = imaging::DepthLayeredSample<f64>;
pub type CapturePair64 = imaging::CapturePair<f64>;
pub type Model64 = tsva::TsvaModel<f64>;
pub type Model32 = tsva::TsvaModel<f32>;
pub type Dataset64 = phantom::DatasetSplit<f64>;
