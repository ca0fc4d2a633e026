//! Output-space guidance, the early-stopping step plan and per-step latency
//! accounting.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Tensor};
use crate::scalar::Scalar;

/// Classifier-free guidance on noise predictions:
/// `eps_pos + phi (eps_pos - eps_neg)`.
pub fn cfg_epsilon<T: Scalar>(eps_pos: &Tensor<T>, eps_neg: &Tensor<T>, phi: T) -> Result<Tensor<T>> {
    check_phi(phi)?;
    linalg::extrapolate("cfg_epsilon", eps_pos, eps_neg, phi)
}

/// The same extrapolation applied to clean-sample reconstructions.
pub fn cfg_x0<T: Scalar>(x0_pos: &Tensor<T>, x0_neg: &Tensor<T>, phi: T) -> Result<Tensor<T>> {
    check_phi(phi)?;
    linalg::extrapolate("cfg_x0", x0_pos, x0_neg, phi)
}

fn check_phi<T: Scalar>(phi: T) -> Result<()> {
    if phi >= T::zero() && phi.is_finite() {
        Ok(())
    } else {
        Err(Error::param("phi", format!("must be finite and >= 0, got {phi}")))
    }
}

/// Which sampler steps receive guidance under an early-stop fraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepPlan {
    pub total_steps: usize,
    pub guided_steps: usize,
    pub step_index: usize,
}

impl StepPlan {
    /// Plan for step 0 with `ceil(theta * total_steps)` guided steps.
    ///
    /// Products within 1e-9 of an integer are snapped to it first, so
    /// `theta = 0.3, T = 10` guides 3 steps rather than 4.
    pub fn new<T: Scalar>(total_steps: usize, theta: T) -> Result<Self> {
        if total_steps == 0 {
            return Err(Error::param("total_steps", "must be >= 1"));
        }
        let theta = theta.to_f64_lossy();
        if !(0.0..=1.0).contains(&theta) {
            return Err(Error::param("theta", format!("must lie in [0, 1], got {theta}")));
        }
        let raw = theta * total_steps as f64;
        let nearest = raw.round();
        let guided = if (raw - nearest).abs() < 1e-9 {
            nearest
        } else {
            raw.ceil()
        };
        Ok(Self {
            total_steps,
            guided_steps: (guided as usize).min(total_steps),
            step_index: 0,
        })
    }

    pub fn at(self, step_index: usize) -> Self {
        Self { step_index, ..self }
    }
}

pub fn guidance_active(plan: &StepPlan) -> bool {
    plan.step_index < plan.guided_steps
}

/// Minimum number of timed repetitions behind every median.
pub const MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub step: usize,
    pub baseline_ms: f64,
    pub guidance_overhead_ms: f64,
}

impl LatencyRecord {
    pub fn guided_ms(&self) -> f64 {
        self.baseline_ms + self.guidance_overhead_ms
    }

    pub fn overhead_pct(&self) -> f64 {
        if self.baseline_ms > 0.0 {
            100.0 * self.guidance_overhead_ms / self.baseline_ms
        } else {
            0.0
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(|a, b| a.total_cmp(b));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Times `baseline` and `guided` alternately on the calling thread and
/// returns the median durations. Overhead is `guided - baseline` clamped at 0.
pub fn measure_step(
    step: usize,
    repetitions: usize,
    mut baseline: impl FnMut(),
    mut guided: impl FnMut(),
) -> LatencyRecord {
    let reps = repetitions.max(MIN_REPETITIONS);
    // one untimed warm-up each
    baseline();
    guided();
    let mut base = Vec::with_capacity(reps);
    let mut guide = Vec::with_capacity(reps);
    for _ in 0..reps {
        let t0 = Instant::now();
        baseline();
        base.push(t0.elapsed().as_secs_f64() * 1e3);
        let t0 = Instant::now();
        guided();
        guide.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let baseline_ms = median(base);
    let guided_ms = median(guide);
    LatencyRecord {
        step,
        baseline_ms,
        guidance_overhead_ms: (guided_ms - baseline_ms).max(0.0),
    }
}

/// Writes `step,baseline_ms,overhead_ms` rows.
pub fn write_latency_csv<W: Write>(records: &[LatencyRecord], mut out: W) -> Result<()> {
    writeln!(out, "step,baseline_ms,overhead_ms")?;
    for r in records {
        writeln!(out, "{},{},{}", r.step, r.baseline_ms, r.guidance_overhead_ms)?;
    }
    Ok(())
}
