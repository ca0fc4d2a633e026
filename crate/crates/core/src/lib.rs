//! Guidance kernels for diffusion and flow sampling, studied on a toy
//! conditional denoiser.
//!
//! Everything numeric is generic over [`Scalar`] (`f32` or `f64`); the
//! aliases below fix the precision for the common case.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod diffusion;
pub mod error;
pub mod guidance;
pub mod linalg;
pub mod metrics;
pub mod scalar;
pub mod toymodel;

pub use attention::{AttentionParams, GuidanceConfig, NagTrace, Strategy};
pub use diffusion::{Denoiser, NoiseSchedule, SampleOptions, SamplerState, ScheduleKind};
pub use error::{Error, Result};
pub use guidance::{LatencyRecord, StepPlan};
pub use linalg::Tensor;
pub use metrics::MetricsReport;
pub use scalar::Scalar;
pub use toymodel::{DenoiserModel, ModelConfig, Parameterization, SyntheticDataset, TrainConfig};

pub type Tensor64 = Tensor<f64>;
pub type Tensor32 = Tensor<f32>;
pub type GuidanceConfig64 = GuidanceConfig<f64>;
pub type GuidanceConfig32 = GuidanceConfig<f32>;
pub type NagTrace64 = NagTrace<f64>;
pub type NoiseSchedule64 = NoiseSchedule<f64>;
pub type SamplerState64 = SamplerState<f64>;
pub type DenoiserModel64 = DenoiserModel<f64>;
pub type DenoiserModel32 = DenoiserModel<f32>;
pub type SyntheticDataset64 = SyntheticDataset<f64>;
