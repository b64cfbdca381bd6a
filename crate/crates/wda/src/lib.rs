//! Weakly supervised domain adaptation for instance-dense binary
//! segmentation, with joint center detection and counting.
//!
//! The crate trains a multi-task segmentation network on a labeled source
//! domain, then adapts it to an unlabeled target domain using only sparse
//! center-point annotations: adversarial output alignment, entropy-gated
//! pseudo-labels, a counting network transferred across domains, and a
//! count-consistency loss tie the two domains together. Everything runs on
//! CPU with a small hand-rolled autodiff engine, so runs are deterministic
//! given a seed.

pub mod augment;
pub mod autograd;
pub mod data;
pub mod error;
pub mod grid;
pub mod harness;
pub mod heatmap;
pub mod losses;
pub mod metrics;
pub mod net;
pub mod pseudo;
pub mod sar;

pub use error::{Result, WdaError};
