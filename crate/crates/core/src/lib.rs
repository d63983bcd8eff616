//! Core library of the freqlab adversarial-robustness laboratory.
//!
//! The crate is organized around a small reverse-mode autodiff engine
//! ([`tensor`]) on top of which everything else is expressed: a
//! differentiable 2D Fourier layer ([`spectral`]), two toy classifier
//! families ([`models`]), a unified attack framework perturbing images in
//! the pixel, magnitude and phase domains ([`attacks`]), full-reference
//! image quality metrics ([`metrics`]) and the diagnostic procedures used
//! to interpret attack results ([`analysis`]).

pub mod analysis;
pub mod attacks;
pub mod checksum;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod spectral;
pub mod tensor;

/// Global scalar precision. All numeric code is written against this alias.
pub type Real = f64;
