//! Reconstruction of the hidden appearance of partially occluded objects.
//!
//! The pieces, bottom up:
//!
//! - [`tensor`]: dense 4-D `f64` tensors, convolution and elementwise
//!   kernels with exact backward passes, and a finite-difference auditor.
//! - [`mask`]: modal/amodal/occlusion masks, the three-level weighted mask,
//!   and self-supervised occluder-on-occludee compositing.
//! - [`network`]: gated convolutions driven by the weighted mask,
//!   contextual attention, spectral normalization, and the coarse →
//!   refinement generator plus patch discriminator.
//! - [`loss`]: the five training objectives and their weighted sum, with a
//!   pluggable frozen feature backbone.
//! - [`metrics`]: mean L1/L2 error, PSNR, SSIM.
//! - [`data`]: COCO-style annotation ingestion, mask rasterization, and
//!   synthesis + persistence of composite training samples.
//! - [`train`]: alternating generator/discriminator optimization,
//!   checkpointing, ablation switches.
//! - [`audit`]: the self-check suite (gradient and invariant audits).

pub mod audit;
pub mod data;
pub mod error;
pub mod loss;
pub mod mask;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Shape, Tensor};
