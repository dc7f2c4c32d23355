//! Slice- and local-window selective-scan encoder with FFT-gated
//! spatial/frequency fusion for volumetric segmentation, built on a small
//! reverse-mode differentiation engine.

pub mod config;
pub mod data;
pub mod error;
pub mod fft;
pub mod fgm;
pub mod gradcheck;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod ops;
pub mod orders;
pub mod params;
pub mod scan;
pub mod slmamba;
pub mod ssm;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{ParamId, ParamStore};
pub use tensor::{DType, Tensor};

/// Sizes the global worker pool used for batch and evaluation parallelism.
/// Results do not depend on the thread count.
pub fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))
}
