//! Point-cloud sequence modelling with selective state-space scans over
//! space-filling-curve orderings.
//!
//! Modules, bottom up: [`pointio`] (clouds and files), [`spacefill`] (curve
//! codecs, serialization), [`numcore`] (tensors and reverse-mode tape),
//! [`sscan`] (discretization, scans, S6 and multi-head S6), [`resample`]
//! (FPS, interpolation, grid pooling), [`blocks`] (ConvBiS6 and the residual
//! block), [`model`] (encoder/decoder, training, ablations).

pub mod blocks;
pub mod error;
pub mod gradsuite;
pub mod model;
pub mod numcore;
pub mod par;
pub mod pointio;
pub mod resample;
pub mod spacefill;
pub mod sscan;

pub use error::{Error, Result};
