pub(crate) mod bytes;
pub mod checkpoint;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod io;
pub mod layers;
pub mod net;
pub mod pipeline;
pub mod ops;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

/// Cap the rayon worker pool (no-op without the `parallel` feature).
/// Results never depend on the worker count.
#[cfg(feature = "parallel")]
pub fn set_worker_threads(n: usize) -> Result<()> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

#[cfg(not(feature = "parallel"))]
pub fn set_worker_threads(_n: usize) -> Result<()> {
    Ok(())
}
