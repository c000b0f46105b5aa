//! Dual-view reflection removal.
//!
//! Two photographs taken through glass from slightly different positions see
//! the transmitted scene and the reflected scene move differently. This crate
//! aligns the second view to the first along the transmission motion, then
//! suppresses whatever does not align (the reflection).
//!
//! The crate is organised by pipeline stage:
//!
//! * [`imgcore`]: rasters, flow fields, masks and their file formats (PNG, PFM, FLO).
//! * [`warp`]: bilinear sampling, backward warping, homography flows, occlusion masks.
//! * [`align`]: Harris corners, ZNCC matching, DLT and RANSAC homography fitting.
//! * [`flow`]: coarse-to-fine robust dense refinement on top of the homography.
//! * [`synthgen`]: seeded generator of dual-view pairs with ground truth.
//! * [`dereflect`]: min-composite, soft-min and gradient-domain transmission synthesis.
//! * [`metrics`]: EPE, occlusion-masked warp error, calibrated PSNR and SSIM.

// NaN-rejecting range checks read `!(x > 0.0)` on purpose.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod align;
pub mod dereflect;
pub mod error;
pub mod flow;
pub mod imgcore;
pub mod metrics;
pub mod numeric;
pub mod synthgen;
pub mod warp;

pub use align::{Homography, Match};
pub use error::{Error, Result};
pub use imgcore::{FlowField, Image, Mask};
pub use warp::BorderPolicy;

/// Deterministic RNG used everywhere a stream of random numbers is needed.
pub type Rng = rand_chacha::ChaCha8Rng;
