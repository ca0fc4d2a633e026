//! Experiment harness around the guidance lab core: configuration, sweeps,
//! artifacts and latency tables.

pub mod config;
pub mod experiment;
pub mod latency;

pub use config::{ConfigError, ExperimentConfig, FileConfig, Overrides, Setting};
pub use experiment::{run_experiment, ResultRow, RunOutput, Summary};
pub use latency::{run_latency, LatencyRow};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "GUIDANCE_LAB_THREADS";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Core(#[from] guidance_lab::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// Worker pool sized by `GUIDANCE_LAB_THREADS`, or rayon's default when unset.
pub fn worker_pool() -> Result<rayon::ThreadPool, CliError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
            ConfigError::new(THREADS_ENV, format!("expected a positive integer, got {v:?}"))
        })?;
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?)
}
