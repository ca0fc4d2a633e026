use std::path::PathBuf;

use anyhow::Context;
use clap::Parser;
use guidance_lab::Strategy;
use guidance_lab_cli::{run_experiment, run_latency, ExperimentConfig, FileConfig, Overrides};

/// Guidance strategy sweeps and latency tables on the toy denoiser.
///
/// Settings resolve as flags > config file > built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "guidance-lab", version)]
struct Args {
    /// TOML experiment file
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    strategy: Option<Strategy>,
    /// Guidance scale; comma-separated values sweep
    #[arg(long, value_delimiter = ',')]
    phi: Vec<f64>,
    /// Normalization threshold
    #[arg(long, value_delimiter = ',')]
    tau: Vec<f64>,
    /// Refinement factor
    #[arg(long, value_delimiter = ',')]
    alpha: Vec<f64>,
    /// Fraction of initial steps that receive guidance
    #[arg(long, value_delimiter = ',')]
    theta: Vec<f64>,
    /// Sampling steps
    #[arg(long)]
    steps: Option<usize>,
    /// Comma-separated seed list
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    #[arg(long)]
    disable_normalization: bool,
    #[arg(long)]
    disable_refinement: bool,
    /// Output directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-strategy latency table instead of sampling
    #[arg(long)]
    latency: bool,
}

fn main() -> anyhow::Result<()> {
    let args = Args::parse();
    let file = match &args.config {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    let flags = Overrides {
        strategy: args.strategy,
        phi: args.phi,
        tau: args.tau,
        alpha: args.alpha,
        theta: args.theta,
        steps: args.steps,
        seeds: args.seeds,
        disable_normalization: args.disable_normalization,
        disable_refinement: args.disable_refinement,
        out: args.out,
    };
    let config = ExperimentConfig::resolve(file, &flags)?;

    if args.latency {
        let rows = run_latency(&config).context("latency run failed")?;
        println!(
            "{:<8} {:>12} {:>12} {:>10}",
            "strategy", "baseline_ms", "overhead_ms", "overhead%"
        );
        for r in rows {
            println!(
                "{:<8} {:>12.4} {:>12.4} {:>10.1}",
                r.strategy, r.baseline_ms, r.overhead_ms, r.overhead_pct
            );
        }
        println!("wrote {}", config.out.join("latency.csv").display());
        return Ok(());
    }

    let run = run_experiment(&config).context("experiment failed")?;
    println!(
        "{:<4} {:<8} {:>6} {:>6} {:>6} {:>6} {:>10} {:>10} {:>8}",
        "idx", "strategy", "phi", "tau", "alpha", "theta", "supp(med)", "w2(med)", "flagged"
    );
    for s in &run.summary.settings {
        let g = &s.setting;
        println!(
            "{:<4} {:<8} {:>6} {:>6} {:>6} {:>6} {:>10.4} {:>10.4} {:>8}",
            s.setting_index,
            g.strategy,
            g.phi,
            g.tau,
            g.alpha,
            g.theta,
            s.median_suppression_rate,
            s.median_w2_to_target,
            s.any_flagged
        );
    }
    println!("wrote {}", run.out_dir.display());
    Ok(())
}
