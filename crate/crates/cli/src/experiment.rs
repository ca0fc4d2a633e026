//! Strategy sweeps on the toy model: train or load one model per seed,
//! sample every grid setting, score the samples and write the artifacts.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use guidance_lab::diffusion::{ddpm_sample, flow_sample, StepTrace};
use guidance_lab::metrics::{suppression_rate, w2_exact, W2_MAX_POINTS};
use guidance_lab::toymodel::{load_weights, make_dataset, sample_class, save_weights, train, DenoiserModel};
use guidance_lab::{
    DenoiserModel64, MetricsReport, NoiseSchedule64, Parameterization, SampleOptions, SamplerState64,
    SyntheticDataset64, Tensor64,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, Setting, SCHEMA_VERSION};
use crate::{worker_pool, CliError};

/// Timesteps of the schedule the toy models are trained on.
pub const TRAIN_STEPS: usize = 1000;

/// Offset between a seed and the seed of its initial sampling noise, so
/// noise draws never reuse the training stream.
const NOISE_SEED_OFFSET: u64 = 1 << 32;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultRow {
    pub setting_index: usize,
    #[serde(flatten)]
    pub setting: Setting,
    pub steps: usize,
    pub seed: u64,
    pub n_samples: usize,
    pub sigma: f64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
    /// Largest `|Z_out[i]|_1 / |Z+[i]|_1` over every row, sample and step;
    /// empty for strategies that leave attention alone.
    pub max_out_ratio: Option<f64>,
    /// Non-finite samples or an attention row beyond the full-NAG bound.
    pub flagged: bool,
}

const CSV_HEADER: &str = "schema_version,setting_index,strategy,phi,tau,alpha,theta,disable_normalization,\
disable_refinement,steps,seed,n_samples,sigma,suppression_rate,mean_neg_mode_distance,w2_to_target,\
max_out_ratio,flagged";

impl ResultRow {
    fn csv(&self) -> String {
        let s = &self.setting;
        let m = &self.metrics;
        format!(
            "{SCHEMA_VERSION},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.setting_index,
            s.strategy,
            s.phi,
            s.tau,
            s.alpha,
            s.theta,
            s.disable_normalization,
            s.disable_refinement,
            self.steps,
            self.seed,
            self.n_samples,
            self.sigma,
            m.suppression_rate,
            m.mean_neg_mode_distance,
            m.w2_to_target,
            self.max_out_ratio.map_or(String::new(), |r| r.to_string()),
            self.flagged
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SettingSummary {
    pub setting_index: usize,
    #[serde(flatten)]
    pub setting: Setting,
    pub seeds: Vec<u64>,
    pub median_suppression_rate: f64,
    pub mean_suppression_rate: f64,
    pub median_w2_to_target: f64,
    pub median_mean_neg_mode_distance: f64,
    pub max_out_ratio: Option<f64>,
    pub any_flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub settings: Vec<SettingSummary>,
    pub weights: Vec<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
struct TraceDump<'a> {
    schema_version: u32,
    setting_index: usize,
    setting: &'a Setting,
    seed: u64,
    /// Per-step guidance record; `nag` holds the first sample's attention
    /// features.
    steps: &'a [StepTrace<f64>],
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub summary: Summary,
    pub out_dir: PathBuf,
}

impl RunOutput {
    pub fn setting(&self, index: usize) -> &SettingSummary {
        &self.summary.settings[index]
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    match n {
        0 => f64::NAN,
        _ if n % 2 == 1 => v[n / 2],
        _ => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

struct SeedContext {
    seed: u64,
    model: DenoiserModel64,
    dataset: SyntheticDataset64,
    target: Tensor64,
}

fn training_schedule(p: Parameterization) -> guidance_lab::Result<NoiseSchedule64> {
    match p {
        Parameterization::Epsilon => NoiseSchedule64::ddpm_cosine(TRAIN_STEPS),
        Parameterization::Velocity => NoiseSchedule64::flow_uniform(TRAIN_STEPS),
    }
}

fn sampling_schedule(p: Parameterization, steps: usize) -> guidance_lab::Result<NoiseSchedule64> {
    match p {
        Parameterization::Epsilon => NoiseSchedule64::ddpm_cosine(steps),
        Parameterization::Velocity => NoiseSchedule64::flow_uniform(steps),
    }
}

fn dataset_for(config: &ExperimentConfig, seed: u64) -> guidance_lab::Result<SyntheticDataset64> {
    let d = &config.dataset;
    make_dataset(d.n_per_class, &d.centers, d.sigma, seed)
}

/// The model a seed's samples come from: loaded from `model_path` when set,
/// otherwise trained from scratch on that seed's dataset.
pub fn model_for_seed(config: &ExperimentConfig, seed: u64) -> Result<DenoiserModel64, CliError> {
    if let Some(path) = &config.model_path {
        let model: DenoiserModel64 = load_weights(path)?;
        if model.config.parameterization != config.parameterization {
            return Err(crate::config::ConfigError::new(
                "model_path",
                format!("weights are {:?}-parameterized", model.config.parameterization),
            )
            .into());
        }
        return Ok(model);
    }
    let dataset = dataset_for(config, seed)?;
    let init = DenoiserModel::init(config.model.clone(), seed)?;
    let schedule = training_schedule(config.parameterization)?;
    Ok(train(&init, &dataset, &schedule, &config.train, seed)?.0)
}

/// Draws `config.n_samples` points for one setting and seed.
pub fn sample_setting(
    config: &ExperimentConfig,
    model: &DenoiserModel64,
    setting: &Setting,
    seed: u64,
    record_trajectory: bool,
) -> Result<SamplerState64, CliError> {
    let d = &config.dataset;
    let pos = model.config.condition(d.positive_class);
    let neg = model.config.condition(d.negative_class);
    let schedule = sampling_schedule(config.parameterization, config.steps)?;
    let opts = SampleOptions {
        n_samples: config.n_samples,
        record_trajectory,
    };
    let guidance = setting.guidance();
    let noise_seed = seed.wrapping_add(NOISE_SEED_OFFSET);
    let state = match config.parameterization {
        Parameterization::Epsilon => ddpm_sample(model, &pos, &neg, &schedule, &guidance, noise_seed, opts)?,
        Parameterization::Velocity => flow_sample(model, &pos, &neg, &schedule, &guidance, noise_seed, opts)?,
    };
    Ok(state)
}

/// Metrics that stay defined when samples blow up: non-finite points count
/// on the positive side of the suppression split and void the distances.
fn score(
    samples: &Tensor64,
    neg: [f64; 2],
    pos: [f64; 2],
    target: &Tensor64,
) -> Result<MetricsReport, CliError> {
    if samples.is_finite() {
        return Ok(MetricsReport::compute(samples, &neg, &pos, target)?);
    }
    let rate = suppression_rate(samples, &neg, &pos)?;
    let m = samples.rows().min(W2_MAX_POINTS).min(target.rows());
    let head = Tensor64::new(vec![m, 2], samples.data()[..2 * m].to_vec())?;
    let target_head = Tensor64::new(vec![m, 2], target.data()[..2 * m].to_vec())?;
    Ok(MetricsReport {
        suppression_rate: rate,
        mean_neg_mode_distance: f64::NAN,
        w2_to_target: w2_exact(&head, &target_head).unwrap_or(f64::NAN),
        n_samples: samples.rows(),
    })
}

fn evaluate(
    config: &ExperimentConfig,
    ctx: &SeedContext,
    index: usize,
    setting: &Setting,
) -> Result<(ResultRow, Vec<StepTrace<f64>>), CliError> {
    let d = &config.dataset;
    let state = sample_setting(config, &ctx.model, setting, ctx.seed, false)?;
    let neg = ctx.dataset.center(d.negative_class).expect("validated class");
    let pos = ctx.dataset.center(d.positive_class).expect("validated class");
    let metrics = score(&state.x, neg, pos, &ctx.target)?;
    let max_out_ratio = state
        .traces
        .iter()
        .filter_map(|t| t.max_out_ratio)
        .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r))));
    let bound = setting.alpha * setting.tau + (1.0 - setting.alpha);
    let flagged = !state.x.is_finite() || max_out_ratio.is_some_and(|r| !(r <= bound + 1e-9));
    let row = ResultRow {
        setting_index: index,
        setting: *setting,
        steps: config.steps,
        seed: ctx.seed,
        n_samples: config.n_samples,
        sigma: d.sigma,
        metrics,
        max_out_ratio,
        flagged,
    };
    Ok((row, state.traces))
}

fn timestamp() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// Runs the whole grid and writes `results.csv`, `summary.json`,
/// `traces/*.json`, `weights/*.bin` and `run.log` under `config.out`.
///
/// Everything except `run.log` is a pure function of the config.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunOutput, CliError> {
    config.validate()?;
    let out = config.out.clone();
    fs::create_dir_all(out.join("traces"))?;
    let mut log = BufWriter::new(File::create(out.join("run.log"))?);
    writeln!(
        log,
        "{} start {} settings x {} seeds",
        timestamp(),
        config.settings().len(),
        config.seeds.len()
    )?;

    let pool = worker_pool()?;
    let settings = config.settings();
    let contexts: Vec<SeedContext> = pool.install(|| {
        config
            .seeds
            .par_iter()
            .map(|&seed| {
                let dataset = dataset_for(config, seed)?;
                let target = sample_class(
                    &dataset,
                    config.dataset.positive_class,
                    config.n_samples.min(W2_MAX_POINTS),
                    seed,
                )?;
                Ok(SeedContext {
                    seed,
                    model: model_for_seed(config, seed)?,
                    dataset,
                    target,
                })
            })
            .collect::<Result<_, CliError>>()
    })?;
    writeln!(log, "{} models ready", timestamp())?;

    let mut weights = Vec::new();
    if config.model_path.is_none() {
        fs::create_dir_all(out.join("weights"))?;
        for ctx in &contexts {
            let rel = PathBuf::from("weights").join(format!("seed-{}.bin", ctx.seed));
            save_weights(&ctx.model, out.join(&rel))?;
            weights.push(rel);
        }
    }

    let jobs: Vec<(usize, usize)> = (0..settings.len())
        .flat_map(|s| (0..contexts.len()).map(move |c| (s, c)))
        .collect();
    let mut results: Vec<(ResultRow, Vec<StepTrace<f64>>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(s, c)| evaluate(config, &contexts[c], s, &settings[s]))
            .collect::<Result<_, CliError>>()
    })?;
    results.sort_by(|a, b| (a.0.setting_index, a.0.seed).cmp(&(b.0.setting_index, b.0.seed)));

    let mut csv = BufWriter::new(File::create(out.join("results.csv"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    for (row, traces) in &results {
        writeln!(csv, "{}", row.csv())?;
        let dump = TraceDump {
            schema_version: SCHEMA_VERSION,
            setting_index: row.setting_index,
            setting: &row.setting,
            seed: row.seed,
            steps: traces,
        };
        let name = format!("setting-{:03}-seed-{}.json", row.setting_index, row.seed);
        write_json(&out.join("traces").join(name), &dump)?;
    }
    csv.flush()?;

    let rows: Vec<ResultRow> = results.into_iter().map(|(r, _)| r).collect();
    let summaries = settings
        .iter()
        .enumerate()
        .map(|(i, setting)| {
            let mine: Vec<&ResultRow> = rows.iter().filter(|r| r.setting_index == i).collect();
            let pick = |f: fn(&ResultRow) -> f64| mine.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let rates = pick(|r| r.metrics.suppression_rate);
            SettingSummary {
                setting_index: i,
                setting: *setting,
                seeds: mine.iter().map(|r| r.seed).collect(),
                median_suppression_rate: median(&rates),
                mean_suppression_rate: rates.iter().sum::<f64>() / rates.len() as f64,
                median_w2_to_target: median(&pick(|r| r.metrics.w2_to_target)),
                median_mean_neg_mode_distance: median(&pick(|r| r.metrics.mean_neg_mode_distance)),
                max_out_ratio: mine
                    .iter()
                    .filter_map(|r| r.max_out_ratio)
                    .fold(None, |acc: Option<f64>, r| Some(acc.map_or(r, |a| a.max(r)))),
                any_flagged: mine.iter().any(|r| r.flagged),
            }
        })
        .collect();
    let summary = Summary {
        schema_version: SCHEMA_VERSION,
        config: config.clone(),
        settings: summaries,
        weights,
    };
    write_json(&out.join("summary.json"), &summary)?;
    writeln!(log, "{} done {} rows", timestamp(), rows.len())?;
    log.flush()?;
    Ok(RunOutput {
        rows,
        summary,
        out_dir: out,
    })
}
