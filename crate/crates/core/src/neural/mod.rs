//! Neural forecasters: four sequence architectures, user-embedding
//! personalization, and weighted / focal losses, all running on a small
//! reverse-mode tape over `f64` tensors.
//!
//! Everything here is CPU-only and sized for desk-scale experiments. The
//! tape trades speed for auditability: every operator carries an explicit
//! backward rule that is checked against finite differences in tests.

mod loss;
mod models;
mod tape;
mod train;


pub use loss::{cross_entropy, focal_loss, weighted_ce, LossKind};
pub use models::{
    load_checkpoint, save_checkpoint, NeuralKind, NeuralModel, NeuralPersonalization, NeuralSpec,
    OptimizerSettings,
};
pub(crate) use models::{
    add_positions, affine_norm, init_dense, init_norm, init_tf_block, linear3, randn_init,
    transformer_block, Dense, NormAffine, TfBlock,
};
pub use tape::{Adam, Gradients, ParamStore, Tape, ValueId};
pub use train::{train, EpochRecord, NeuralForecaster, TrainedNeural, TrainingHistory};
