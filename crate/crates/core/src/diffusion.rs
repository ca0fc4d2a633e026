//! Noise schedules, forward noising, clean-sample reconstruction and the two
//! samplers.
//!
//! Time conventions are module-local and opposite to each other:
//!
//! * ddpm: timestep `t` in `1..=T` with normalized time `u = t / T`; `u = 1`
//!   is pure noise and `x0` denotes the clean sample.
//! * flow: time `t` in `[0, 1]` along `x_t = (1 - t) x_0 + t x_1`, where
//!   `x_0` is noise and `x_1` is data. Sampling integrates from 0 to 1.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::{GuidanceConfig, NagTrace, Strategy};
use crate::error::{Error, Result};
use crate::guidance::{cfg_epsilon, guidance_active, StepPlan};
use crate::linalg::Tensor;
use crate::scalar::Scalar;

/// Smallest `alpha_bar` reached by [`NoiseSchedule::ddpm_cosine`] at `u = 1`.
pub const DEFAULT_ABAR_MIN: f64 = 1e-2;

/// Cosine-squared signal profile `cos^2(u * acos(sqrt(abar_min)))`.
///
/// Equals 1 at `u = 0`, `abar_min` at `u = 1` and decreases strictly in
/// between.
pub fn cosine_alpha_bar<T: Scalar>(u: T, abar_min: T) -> T {
    let c = (u * abar_min.sqrt().acos()).cos();
    c * c
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Ddpm,
    Flow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub enum NoiseSchedule<T> {
    /// `alphas_bar[t - 1]` for `t = 1..=T`; strictly decreasing inside (0, 1).
    Ddpm { alphas_bar: Tensor<T> },
    /// `T + 1` strictly increasing times from 0 to 1.
    Flow { time_grid: Tensor<T> },
}

impl<T: Scalar> NoiseSchedule<T> {
    pub fn ddpm_cosine(steps: usize) -> Result<Self> {
        Self::ddpm_cosine_with_min(steps, T::of(DEFAULT_ABAR_MIN))
    }

    pub fn ddpm_cosine_with_min(steps: usize, abar_min: T) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        if !(abar_min > T::zero() && abar_min < T::one()) {
            return Err(Error::param(
                "abar_min",
                format!("must lie in (0, 1), got {abar_min}"),
            ));
        }
        let total = T::of(steps as f64);
        let abar = (1..=steps)
            .map(|t| cosine_alpha_bar(T::of(t as f64) / total, abar_min))
            .collect();
        Self::ddpm(Tensor::vector(abar))
    }

    pub fn ddpm(alphas_bar: Tensor<T>) -> Result<Self> {
        let a = alphas_bar.data();
        if a.is_empty() || alphas_bar.shape().len() != 1 {
            return Err(Error::param("alphas_bar", "must be a non-empty vector"));
        }
        if a.iter().any(|&v| !(v > T::zero() && v < T::one())) {
            return Err(Error::param("alphas_bar", "values must lie in (0, 1)"));
        }
        if a.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::param("alphas_bar", "must be strictly decreasing"));
        }
        Ok(NoiseSchedule::Ddpm { alphas_bar })
    }

    pub fn flow_uniform(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::param("steps", "must be >= 1"));
        }
        let total = T::of(steps as f64);
        let mut grid: Vec<T> = (0..=steps).map(|k| T::of(k as f64) / total).collect();
        grid[steps] = T::one();
        Self::flow(Tensor::vector(grid))
    }

    pub fn flow(time_grid: Tensor<T>) -> Result<Self> {
        let g = time_grid.data();
        if g.len() < 2 || time_grid.shape().len() != 1 {
            return Err(Error::param("time_grid", "needs at least two points"));
        }
        if g[0] != T::zero() || g[g.len() - 1] != T::one() {
            return Err(Error::param("time_grid", "must start at 0 and end at 1"));
        }
        if g.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("time_grid", "must be strictly increasing"));
        }
        Ok(NoiseSchedule::Flow { time_grid })
    }

    pub fn kind(&self) -> ScheduleKind {
        match self {
            NoiseSchedule::Ddpm { .. } => ScheduleKind::Ddpm,
            NoiseSchedule::Flow { .. } => ScheduleKind::Flow,
        }
    }

    /// Number of sampler steps `T`.
    pub fn steps(&self) -> usize {
        match self {
            NoiseSchedule::Ddpm { alphas_bar } => alphas_bar.len(),
            NoiseSchedule::Flow { time_grid } => time_grid.len() - 1,
        }
    }
}

fn check_abar<T: Scalar>(abar_t: T) -> Result<()> {
    if abar_t > T::zero() && abar_t < T::one() {
        Ok(())
    } else {
        Err(Error::param(
            "abar_t",
            format!("must lie in (0, 1), got {abar_t}"),
        ))
    }
}

/// `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps`.
pub fn forward_noise<T: Scalar>(x0: &Tensor<T>, eps: &Tensor<T>, abar_t: T) -> Result<Tensor<T>> {
    check_abar(abar_t)?;
    if x0.shape() != eps.shape() {
        return Err(Error::dim(
            "forward_noise",
            format!("x0 {:?} vs eps {:?}", x0.shape(), eps.shape()),
        ));
    }
    let (a, b) = (abar_t.sqrt(), (T::one() - abar_t).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Tensor::new(x0.shape().to_vec(), data)
}

/// `x0 = (x_t - sqrt(1 - abar) eps_hat) / sqrt(abar)`.
pub fn reconstruct_x0<T: Scalar>(x_t: &Tensor<T>, eps_hat: &Tensor<T>, abar_t: T) -> Result<Tensor<T>> {
    if abar_t == T::zero() {
        return Err(Error::SingularSchedule(0.0));
    }
    check_abar(abar_t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::dim(
            "reconstruct_x0",
            format!("x_t {:?} vs eps {:?}", x_t.shape(), eps_hat.shape()),
        ));
    }
    let (a, b) = (abar_t.sqrt(), (T::one() - abar_t).sqrt());
    let data = x_t
        .data()
        .iter()
        .zip(eps_hat.data())
        .map(|(&x, &e)| (x - b * e) / a)
        .collect();
    Tensor::new(x_t.shape().to_vec(), data)
}

/// Standard normal tensor from a ChaCha stream keyed by `seed`; identical on
/// every platform.
pub fn gaussian_noise<T: Scalar>(shape: Vec<usize>, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            T::of(v)
        })
        .collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// Output of an attention-guided forward pass.
#[derive(Debug, Clone)]
pub struct GuidedPrediction<T> {
    pub output: Tensor<T>,
    /// Guidance intermediates for the first sample of the batch.
    pub trace: Option<NagTrace<T>>,
    /// Largest `|Z_out[i]|_1 / |Z+[i]|_1` over every sample and token.
    pub max_out_ratio: Option<T>,
}

/// A conditional network the samplers can query.
///
/// `x` is a batch `n x data_dim`; conditions are token ids. The prediction is
/// noise for ddpm sampling and velocity for flow sampling.
pub trait Denoiser<T: Scalar> {
    fn data_dim(&self) -> usize;

    fn predict(&self, x: &Tensor<T>, t: T, cond: &[usize]) -> Result<Tensor<T>>;

    /// Forward pass with the attention processor selected by `guidance`
    /// (NASA or normalized attention guidance) fed by both conditions.
    fn predict_attention_guided(
        &self,
        x: &Tensor<T>,
        t: T,
        cond_pos: &[usize],
        cond_neg: &[usize],
        guidance: &GuidanceConfig<T>,
    ) -> Result<GuidedPrediction<T>>;
}

impl<T: Scalar, D: Denoiser<T> + ?Sized> Denoiser<T> for &D {
    fn data_dim(&self) -> usize {
        (**self).data_dim()
    }

    fn predict(&self, x: &Tensor<T>, t: T, cond: &[usize]) -> Result<Tensor<T>> {
        (**self).predict(x, t, cond)
    }

    fn predict_attention_guided(
        &self,
        x: &Tensor<T>,
        t: T,
        cond_pos: &[usize],
        cond_neg: &[usize],
        guidance: &GuidanceConfig<T>,
    ) -> Result<GuidedPrediction<T>> {
        (**self).predict_attention_guided(x, t, cond_pos, cond_neg, guidance)
    }
}

/// Per-step audit record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct StepTrace<T> {
    pub step: usize,
    /// Model time input at this step.
    pub time: T,
    pub active: bool,
    pub nag: Option<NagTrace<T>>,
    pub max_out_ratio: Option<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(deserialize = "T: Scalar"))]
pub struct SamplerState<T> {
    pub x: Tensor<T>,
    pub step: usize,
    pub rng_seed: u64,
    /// Initial noise followed by the state after every step.
    pub trajectory: Option<Vec<Tensor<T>>>,
    pub traces: Vec<StepTrace<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleOptions {
    pub n_samples: usize,
    pub record_trajectory: bool,
}

impl Default for SampleOptions {
    fn default() -> Self {
        Self {
            n_samples: 1,
            record_trajectory: false,
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn guided_step<T: Scalar, M: Denoiser<T>>(
    model: &M,
    x: &Tensor<T>,
    t: T,
    cond_pos: &[usize],
    cond_neg: &[usize],
    cfg: &GuidanceConfig<T>,
    step: usize,
    active: bool,
) -> Result<(Tensor<T>, StepTrace<T>)> {
    let mut trace = StepTrace {
        step,
        time: t,
        active,
        nag: None,
        max_out_ratio: None,
    };
    let out = match (active, cfg.strategy) {
        (false, _) | (_, Strategy::None) => model.predict(x, t, cond_pos)?,
        (true, Strategy::Cfg) => {
            let pos = model.predict(x, t, cond_pos)?;
            let neg = model.predict(x, t, cond_neg)?;
            cfg_epsilon(&pos, &neg, cfg.phi)?
        }
        (true, Strategy::Nasa | Strategy::Nag) => {
            let guided = model.predict_attention_guided(x, t, cond_pos, cond_neg, cfg)?;
            trace.nag = guided.trace;
            trace.max_out_ratio = guided.max_out_ratio;
            match cfg.compose_cfg {
                Some(scale) => {
                    let neg = model.predict(x, t, cond_neg)?;
                    cfg_epsilon(&guided.output, &neg, scale)?
                }
                None => guided.output,
            }
        }
    };
    if out.shape() != x.shape() {
        return Err(Error::dim(
            "sampler",
            format!("model returned {:?} for state {:?}", out.shape(), x.shape()),
        ));
    }
    Ok((out, trace))
}

/// One guided model evaluation as a sampler step would perform it, with
/// guidance active.
pub fn guided_prediction<T: Scalar, M: Denoiser<T>>(
    model: &M,
    x: &Tensor<T>,
    t: T,
    cond_pos: &[usize],
    cond_neg: &[usize],
    cfg: &GuidanceConfig<T>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    Ok(guided_step(model, x, t, cond_pos, cond_neg, cfg, 0, true)?.0)
}

fn initial_state<T: Scalar, M: Denoiser<T>>(
    model: &M,
    seed: u64,
    opts: SampleOptions,
) -> Result<SamplerState<T>> {
    if opts.n_samples == 0 {
        return Err(Error::param("n_samples", "must be >= 1"));
    }
    let x = gaussian_noise(vec![opts.n_samples, model.data_dim()], seed);
    Ok(SamplerState {
        trajectory: opts.record_trajectory.then(|| vec![x.clone()]),
        x,
        step: 0,
        rng_seed: seed,
        traces: Vec::new(),
    })
}

/// Deterministic (eta = 0) reverse sampler for noise-predicting models.
///
/// Each step predicts noise under the configured guidance, reconstructs the
/// clean sample and re-noises it to the next timestep with the same noise
/// estimate. The last step returns the reconstruction itself.
pub fn ddpm_sample<T: Scalar, M: Denoiser<T>>(
    model: &M,
    cond_pos: &[usize],
    cond_neg: &[usize],
    schedule: &NoiseSchedule<T>,
    cfg: &GuidanceConfig<T>,
    seed: u64,
    opts: SampleOptions,
) -> Result<SamplerState<T>> {
    let NoiseSchedule::Ddpm { alphas_bar } = schedule else {
        return Err(Error::param("schedule", "ddpm_sample needs a ddpm schedule"));
    };
    cfg.validate()?;
    let total = alphas_bar.len();
    let plan = StepPlan::new(total, cfg.theta)?;
    let mut state = initial_state(model, seed, opts)?;
    for k in 0..total {
        let t = total - k;
        let abar = alphas_bar.data()[t - 1];
        let u = T::of(t as f64) / T::of(total as f64);
        let active = guidance_active(&plan.at(k));
        let (eps, trace) = guided_step(model, &state.x, u, cond_pos, cond_neg, cfg, k, active)?;
        let x0 = reconstruct_x0(&state.x, &eps, abar)?;
        state.x = if t > 1 {
            forward_noise(&x0, &eps, alphas_bar.data()[t - 2])?
        } else {
            x0
        };
        state.step = k + 1;
        state.traces.push(trace);
        if let Some(traj) = state.trajectory.as_mut() {
            traj.push(state.x.clone());
        }
    }
    Ok(state)
}

/// Explicit Euler integration of `dx/dt = v(x, t, c)` over the schedule's
/// time grid, from noise at `t = 0` to data at `t = 1`.
pub fn flow_sample<T: Scalar, M: Denoiser<T>>(
    model: &M,
    cond_pos: &[usize],
    cond_neg: &[usize],
    schedule: &NoiseSchedule<T>,
    cfg: &GuidanceConfig<T>,
    seed: u64,
    opts: SampleOptions,
) -> Result<SamplerState<T>> {
    let state = initial_state(model, seed, opts)?;
    flow_integrate(model, cond_pos, cond_neg, schedule, cfg, state)
}

/// Euler integration from an explicit starting state.
pub fn flow_integrate<T: Scalar, M: Denoiser<T>>(
    model: &M,
    cond_pos: &[usize],
    cond_neg: &[usize],
    schedule: &NoiseSchedule<T>,
    cfg: &GuidanceConfig<T>,
    mut state: SamplerState<T>,
) -> Result<SamplerState<T>> {
    let NoiseSchedule::Flow { time_grid } = schedule else {
        return Err(Error::param("schedule", "flow sampling needs a flow schedule"));
    };
    cfg.validate()?;
    let grid = time_grid.data();
    let total = grid.len() - 1;
    let plan = StepPlan::new(total, cfg.theta)?;
    for k in 0..total {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let active = guidance_active(&plan.at(k));
        let (v, trace) = guided_step(model, &state.x, t, cond_pos, cond_neg, cfg, k, active)?;
        for (x, &dv) in state.x.data_mut().iter_mut().zip(v.data()) {
            *x += dt * dv;
        }
        state.step = k + 1;
        state.traces.push(trace);
        if let Some(traj) = state.trajectory.as_mut() {
            traj.push(state.x.clone());
        }
    }
    Ok(state)
}

/// Writes a trajectory as `step,sample,c0,c1,...` rows.
pub fn write_trajectory_csv<T: Scalar, W: Write>(trajectory: &[Tensor<T>], mut out: W) -> Result<()> {
    let dim = trajectory.first().map_or(0, |x| x.cols());
    write!(out, "step,sample")?;
    for c in 0..dim {
        write!(out, ",c{c}")?;
    }
    writeln!(out)?;
    for (step, x) in trajectory.iter().enumerate() {
        for i in 0..x.rows() {
            write!(out, "{step},{i}")?;
            for v in x.row(i) {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}
