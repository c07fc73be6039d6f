//! Experiment harness: image I/O, configuration, the search / fit / eval /
//! ablate / gradcheck commands and their on-disk records.

pub mod commands;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod imageio;
pub mod records;
pub mod synth;

pub use error::{HarnessError, Result};

pub const THREADS_ENV: &str = "PRIOR_FORGE_THREADS";

/// Sizes the global worker pool from `PRIOR_FORGE_THREADS` when it is set.
pub fn init_thread_pool() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| HarnessError::config(THREADS_ENV, format!("expected a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| HarnessError::Failed(format!("thread pool: {e}")))
}
