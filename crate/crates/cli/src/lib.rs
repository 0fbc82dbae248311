//! Pipeline harness for the attribution-based adversarial-example detector:
//! stage orchestration, configuration, provenance records, and report
//! emission around the `xgap-core` numerics.

pub mod config;
pub mod error;
pub mod hashes;
pub mod stages;
pub mod synth;

use crate::error::{CliError, Result};

/// Applies the `XGAP_THREADS` worker cap to the global thread pool. Absent
/// or empty means the default; anything unparsable is a config error.
pub fn init_thread_pool() -> Result<()> {
    let Some(raw) = std::env::var_os("XGAP_THREADS") else {
        return Ok(());
    };
    let raw = raw.to_string_lossy();
    if raw.is_empty() {
        return Ok(());
    }
    let threads: usize = raw
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Config(format!("XGAP_THREADS {raw:?} is not a positive integer")))?;
    // A pool may already exist when stages run in-process, e.g. from tests;
    // the cap only applies to the first initialization.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}
