use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::dataset::SyntheticDataset;
use super::model::{DenoiserModel, ModelConfig, Parameterization, TrainBatch, DATA_DIM};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::linalg::Tensor;
use crate::scalar::Scalar;

/// Plain minibatch SGD recipe. Defaults: 20 epochs of 100 steps, batch 64,
/// learning rate 1e-2.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            steps_per_epoch: 100,
            batch_size: 64,
            lr: 1e-2,
        }
    }
}

impl TrainConfig {
    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean minibatch loss of every epoch.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

/// Draws a minibatch of regression problems.
///
/// Epsilon models see `x_t = sqrt(abar) x0 + sqrt(1 - abar) eps` at a uniform
/// timestep of the ddpm schedule and regress `eps`. Velocity models see
/// `x_t = (1 - t) z + t x1` at `t ~ U[0, 1)` and regress `x1 - z`.
pub fn draw_batch<T: Scalar>(
    dataset: &SyntheticDataset<T>,
    schedule: &NoiseSchedule<T>,
    config: &ModelConfig,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch<T>> {
    if dataset.is_empty() {
        return Err(Error::param("dataset", "cannot train on an empty dataset"));
    }
    let mut x_t = Vec::with_capacity(batch_size * DATA_DIM);
    let mut target = Vec::with_capacity(batch_size * DATA_DIM);
    let mut time = Vec::with_capacity(batch_size);
    let mut conditions = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let sample = &dataset.samples[rng.gen_range(0..dataset.len())];
        let noise: [T; DATA_DIM] = std::array::from_fn(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::of(v)
        });
        match (config.parameterization, schedule) {
            (Parameterization::Epsilon, NoiseSchedule::Ddpm { alphas_bar }) => {
                let steps = alphas_bar.len();
                let t = rng.gen_range(1..=steps);
                let abar = alphas_bar.data()[t - 1];
                let (a, b) = (abar.sqrt(), (T::one() - abar).sqrt());
                for d in 0..DATA_DIM {
                    x_t.push(a * sample.x0[d] + b * noise[d]);
                    target.push(noise[d]);
                }
                time.push(T::of(t as f64) / T::of(steps as f64));
            }
            (Parameterization::Velocity, NoiseSchedule::Flow { .. }) => {
                let t = T::of(rng.gen_range(0.0..1.0));
                for d in 0..DATA_DIM {
                    x_t.push((T::one() - t) * noise[d] + t * sample.x0[d]);
                    target.push(sample.x0[d] - noise[d]);
                }
                time.push(t);
            }
            (p, s) => {
                return Err(Error::param(
                    "schedule",
                    format!("{p:?} models cannot train on a {:?} schedule", s.kind()),
                ))
            }
        }
        conditions.push(config.condition(sample.class_id));
    }
    Ok(TrainBatch {
        x_t: Tensor::new(vec![batch_size, DATA_DIM], x_t)?,
        time,
        target: Tensor::new(vec![batch_size, DATA_DIM], target)?,
        conditions,
    })
}

/// Trains a copy of `model` with plain SGD on the noise (or velocity)
/// regression objective.
pub fn train<T: Scalar>(
    model: &DenoiserModel<T>,
    dataset: &SyntheticDataset<T>,
    schedule: &NoiseSchedule<T>,
    config: &TrainConfig,
    seed: u64,
) -> Result<(DenoiserModel<T>, TrainReport)> {
    if dataset.is_empty() {
        return Err(Error::param("dataset", "cannot train on an empty dataset"));
    }
    if let Some(s) = dataset
        .samples
        .iter()
        .find(|s| s.class_id >= model.config.classes)
    {
        return Err(Error::InvalidToken {
            token: s.class_id,
            vocab: model.config.classes,
        });
    }
    if config.batch_size == 0 || !(config.lr >= 0.0) || !config.lr.is_finite() {
        return Err(Error::param("train", format!("invalid recipe {config:?}")));
    }
    let mut model = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lr = T::of(config.lr);
    let mut loss_curve = Vec::with_capacity(config.epochs);
    let mut last_finite = f64::NAN;
    let mut step = 0;
    for _ in 0..config.epochs {
        let mut total = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch = draw_batch(dataset, schedule, &model.config, config.batch_size, &mut rng)?;
            let (loss, grad) = model.loss_and_gradient(&batch)?;
            let loss = loss.to_f64_lossy();
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    loss,
                    last_finite,
                });
            }
            model.add_scaled(&grad, -lr);
            if !model.is_finite() {
                return Err(Error::TrainingDiverged {
                    step,
                    loss: f64::NAN,
                    last_finite: loss,
                });
            }
            last_finite = loss;
            total += loss;
            step += 1;
        }
        if config.steps_per_epoch > 0 {
            loss_curve.push(total / config.steps_per_epoch as f64);
        }
    }
    Ok((
        model,
        TrainReport {
            loss_curve,
            steps: step,
        },
    ))
}

/// Irreducible per-coordinate noise-prediction error for data drawn from a
/// single isotropic Gaussian of width `sigma`, averaged over the timesteps of
/// `alphas_bar`: `mean_t abar sigma^2 / (abar sigma^2 + 1 - abar)`.
pub fn epsilon_loss_floor(sigma: f64, alphas_bar: &[f64]) -> f64 {
    let s2 = sigma * sigma;
    let total: f64 = alphas_bar.iter().map(|&a| a * s2 / (a * s2 + 1.0 - a)).sum();
    total / alphas_bar.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toymodel::{default_centers, make_dataset};

    fn setup() -> (DenoiserModel<f64>, SyntheticDataset<f64>, NoiseSchedule<f64>) {
        let model = DenoiserModel::init(ModelConfig::default(), 3).unwrap();
        let data = make_dataset(200, &default_centers(), 0.15, 3).unwrap();
        (model, data, NoiseSchedule::ddpm_cosine(1000).unwrap())
    }

    #[test]
    fn zero_learning_rate_keeps_weights() {
        let (model, data, sched) = setup();
        let cfg = TrainConfig {
            epochs: 2,
            steps_per_epoch: 5,
            batch_size: 8,
            lr: 0.0,
        };
        let (trained, report) = train(&model, &data, &sched, &cfg, 1).unwrap();
        assert_eq!(trained, model);
        assert_eq!(report.steps, 10);
        assert_eq!(report.loss_curve.len(), 2);
    }

    #[test]
    fn divergence_is_reported() {
        let (model, data, sched) = setup();
        let cfg = TrainConfig {
            epochs: 50,
            steps_per_epoch: 20,
            batch_size: 8,
            lr: 1e12,
        };
        let err = train(&model, &data, &sched, &cfg, 1).unwrap_err();
        assert!(matches!(err, Error::TrainingDiverged { .. }), "{err}");
    }

    #[test]
    fn rejects_empty_or_mismatched_inputs() {
        let (model, data, sched) = setup();
        let empty = make_dataset(0, &default_centers(), 0.15, 3).unwrap();
        assert!(train(&model, &empty, &sched, &TrainConfig::default(), 0).is_err());
        let flow = NoiseSchedule::flow_uniform(4).unwrap();
        assert!(train(&model, &data, &flow, &TrainConfig::default(), 0).is_err());
    }

    #[test]
    fn loss_floor_limits() {
        assert_eq!(epsilon_loss_floor(0.0, &[0.5, 0.9]), 0.0);
        // abar sigma^2 / (abar sigma^2 + 1 - abar) at abar = 0.5, sigma = 1
        assert!((epsilon_loss_floor(1.0, &[0.5]) - 0.5).abs() < 1e-15);
    }
}
