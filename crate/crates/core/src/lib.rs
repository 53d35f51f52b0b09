//! Reflection-mode ultrasound tomography toolkit.
//!
//! The pipeline synthesizes concrete phantoms, simulates their acoustic
//! response with a k-space pseudospectral solver, and reconstructs
//! speed-of-sound sections three ways: SAFT delay-and-sum, linear
//! model-based iterative reconstruction (L-MBIR), and direct deep learning
//! (DDL): back-projection through the adjoint of a linear measurement
//! model followed by a trained U-Net.

// Validation guards are written `!(x > 0.0)` so that NaN fails them; the
// rewrite the lint suggests would let NaN through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod container;
pub mod dataset;
pub mod fft2;
pub mod geom;
pub mod linmodel;
pub mod metrics;
pub mod neural;
pub mod nn;
pub mod phantom;
pub mod recon;
pub mod render;
pub mod rf;
pub mod wave;

pub use geom::{ArrayGeometry, ImageGrid, Pulse};
pub use rf::RfData;
