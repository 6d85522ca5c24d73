//! Ray-based occupancy prediction for single-view 3D reconstruction.
//!
//! A single forward pass maps a 2D image position to M occupancy
//! probabilities along the back-projected ray, so filling a full
//! reconstruction volume costs O(N^2) network forwards instead of the
//! O(N^3) of per-point occupancy queries. The crate contains everything
//! needed to demonstrate that end to end on a single machine:
//!
//! - [`tensor`]: dense tensors with reverse-mode autodiff, Adam, and a
//!   finite-difference gradient checker
//! - [`geometry`]: pinhole cameras, ray sampling, the scale calibration
//!   factor, and frustum-to-grid resampling
//! - [`shapes`]: analytic CSG scenes with exact occupancy oracles, a
//!   ray-cast renderer, and dataset generation
//! - [`net`]: the encoder / local-context-mixer / occupancy-decoder model
//! - [`training`]: the BCE training loop with ablation toggles
//! - [`mesh_extract`] and [`inference`]: marching cubes and the full
//!   image-to-mesh pipeline
//! - [`metrics`]: volumetric IoU, Chamfer-L1, normal consistency
//! - [`bench`]: ray-mode vs point-mode complexity measurements

pub mod bench;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod mesh_extract;
pub mod metrics;
pub mod net;
pub mod rng;
pub mod shapes;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
