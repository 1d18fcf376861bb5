//! Two-view windowed transformer with dynamic attention, built on a small
//! reverse-mode autodiff core.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense tensors, the differentiation tape, gradient checking,
//!   and the binary tensor file format;
//! - [`windowing`]: patch embedding, window partition/reverse, cyclic shift,
//!   and shifted-window attention masks;
//! - [`attention`]: windowed multi-head dynamic attention over a view pair
//!   (self plus cross-view maps fused per window), and plain windowed
//!   self-attention;
//! - [`blocks`]: pre-norm transformer blocks and patch merging;
//! - [`model`]: the end-to-end two-view classifier and its configuration;
//! - [`data`], [`metrics`], [`train`]: the synthetic two-view task,
//!   AUC/accuracy, and the Adam training loop with plateau scheduling;
//! - [`checkpoint`]: directory-based parameter snapshots.
//!
//! With the default `parallel` feature, data-parallel inner loops run on
//! rayon; results are bitwise identical to the sequential fallback
//! (`--no-default-features`) because parallel work is split only over
//! independent output elements.

pub mod attention;
pub mod blocks;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod verify;
pub mod windowing;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};

/// Caps the rayon worker pool for this process. A no-op (always `Ok`) when
/// the crate was built without the `parallel` feature.
pub fn configure_threads(n: usize) -> Result<()> {
    #[cfg(feature = "parallel")]
    {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
    Ok(())
}
