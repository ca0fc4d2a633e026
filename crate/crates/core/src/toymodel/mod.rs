//! A tiny conditional denoiser trained on synthetic planar mixtures, so that
//! guidance effects can be observed end to end.

mod dataset;
mod model;
mod train;
mod weights;

pub use dataset::{
    default_centers, make_dataset, sample_class, Mode, Sample, SyntheticDataset, DEFAULT_SIGMA,
};
pub use model::{DenoiserModel, ModelConfig, Parameterization, TrainBatch, BLOCK_NAMES, DATA_DIM, INPUT_DIM};
pub use train::{draw_batch, epsilon_loss_floor, train, TrainConfig, TrainReport};
pub use weights::{load_weights, read_weights, save_weights, write_weights, WEIGHTS_MAGIC};
