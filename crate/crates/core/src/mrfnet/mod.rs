//! The network estimator: a fixed subspace projection followed by
//! trainable ReLU layers, its training loop and checkpoint format.

mod checkpoint;
mod model;
mod train;

pub use checkpoint::{decode_model, encode_model, load_model, save_model, CheckpointMeta};
pub use model::{
    Activation, DenseLayer, Gradients, MlpModel, Trace, DEFAULT_LAYOUT, DEFAULT_TARGET_SCALE,
};
pub use train::{
    make_training_set, pair_seed, train, NoiseDomain, TrainConfig, TrainingPair, TrainingSet,
};

#[cfg(test)]
pub(crate) use model::tests as test_support;
