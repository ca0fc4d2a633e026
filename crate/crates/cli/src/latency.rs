//! Per-step latency of each guidance strategy against the unguided
//! forward pass.

use std::fs::{self, File};
use std::io::{BufWriter, Write};

use guidance_lab::diffusion::{gaussian_noise, guided_prediction};
use guidance_lab::guidance::measure_step;
use guidance_lab::{Denoiser, DenoiserModel64, GuidanceConfig, ModelConfig, Strategy, Tensor64};
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyRow {
    pub strategy: Strategy,
    pub baseline_ms: f64,
    pub overhead_ms: f64,
    pub overhead_pct: f64,
}

pub const LATENCY_HEADER: &str = "strategy,baseline_ms,overhead_ms,overhead_pct";

/// Timing model: the configured architecture with a wide encoder and
/// decoder, so attention is a small share of each forward pass.
pub fn timing_model(config: &ExperimentConfig) -> Result<DenoiserModel64, CliError> {
    let model = ModelConfig {
        hidden: config.latency.hidden,
        ..config.model.clone()
    };
    Ok(DenoiserModel64::init(model, 0)?)
}

/// Times one sampler step per strategy on the calling thread and writes
/// `latency.csv` under `config.out`.
pub fn run_latency(config: &ExperimentConfig) -> Result<Vec<LatencyRow>, CliError> {
    config.validate()?;
    let model = timing_model(config)?;
    let x: Tensor64 = gaussian_noise(vec![config.latency.batch, 2], 0);
    let pos = model.config.condition(config.dataset.positive_class);
    let neg = model.config.condition(config.dataset.negative_class);
    let t = 1.0;
    let mut rows = Vec::new();
    for &strategy in &config.latency.strategies {
        let guidance =
            GuidanceConfig::nag(config.phi[0], config.tau[0], config.alpha[0]).with_strategy(strategy);
        guided_prediction(&model, &x, t, &pos, &neg, &guidance)?;
        let rec = measure_step(
            0,
            config.latency.repetitions,
            || {
                std::hint::black_box(model.predict(&x, t, &pos).expect("validated inputs"));
            },
            || {
                std::hint::black_box(
                    guided_prediction(&model, &x, t, &pos, &neg, &guidance).expect("validated inputs"),
                );
            },
        );
        rows.push(LatencyRow {
            strategy,
            baseline_ms: rec.baseline_ms,
            overhead_ms: rec.guidance_overhead_ms,
            overhead_pct: rec.overhead_pct(),
        });
    }
    fs::create_dir_all(&config.out)?;
    let mut w = BufWriter::new(File::create(config.out.join("latency.csv"))?);
    writeln!(w, "{LATENCY_HEADER}")?;
    for r in &rows {
        writeln!(
            w,
            "{},{},{},{}",
            r.strategy, r.baseline_ms, r.overhead_ms, r.overhead_pct
        )?;
    }
    w.flush()?;
    Ok(rows)
}
