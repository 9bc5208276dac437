//! Symmetric face inpainting on procedurally generated faces.
//!
//! The crate bundles a Swin-style windowed-attention generator, a patch
//! discriminator plus six per-part semantic discriminators, the complete
//! adversarial / feature-matching / homogeneity loss stack, an alternating
//! GAN trainer, and a symmetry concentration score computed from per-tile
//! occlusion influence heatmaps. Everything runs on the CPU over a small
//! built-in reverse-mode autodiff tape; synthetic faces with exact part
//! masks stand in for photographic data so every contract is testable.

pub mod autodiff;
pub mod generator;
pub mod losses;
pub mod masking;
pub mod checkpoint;
pub mod discriminators;
pub mod error;
pub mod metrics;
pub mod params;
pub mod scs;
pub mod segmentation;
pub mod toyfaces;
pub mod trainer;

pub use error::{Error, Result};
