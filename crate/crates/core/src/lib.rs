//! Feature-driven 3D deformable registration.
//!
//! A moving volume is aligned to a fixed volume by coarse-to-fine optimization of
//! stationary velocity fields. The objective matches raw intensities through
//! windowed normalized cross-correlation and structure-aware feature embeddings
//! through a hierarchical feature-consistency term, regularized by a diffusion
//! smoothness penalty.
//!
//! Module map:
//!
//! * [`tensor`] and [`mvf`]: grid containers and the MVF1 binary format.
//! * [`field`]: sampling, warping, velocity integration, composition, resizing, Jacobians.
//! * [`features`]: slice-wise encoder adaptation geometry, a built-in feature
//!   extractor and feature pyramids.
//! * [`losses`]: NCC, feature consistency, soft Dice, smoothness, with analytic gradients.
//! * [`solver`]: the pyramid registration driver.
//! * [`metrics`]: Dice, HD95, SDlogJ.
//! * [`phantom`]: synthetic phantoms, ground-truth deformations and perturbations.

pub mod error;
pub mod features;
pub mod field;
mod filter;
pub mod losses;
pub mod metrics;
pub mod mvf;
pub mod phantom;
pub mod solver;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{
    Dims, DisplacementField, FeatureVolume, Grid, LabelVolume, Spacing, VelocityField, Volume,
};
