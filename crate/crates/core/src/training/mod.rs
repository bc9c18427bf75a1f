//! Learning and adaptation: ReLU training, surrogate-gradient SNN training
//! (optionally with time-indexed batch norm), ANN-to-SNN conversion and
//! noise-aware re-estimation of norm statistics.

mod adapt;
mod backward;
mod convert;
mod optim;
mod trainer;

pub use adapt::{adapt_bn_noise_aware, update_running_stats, AdaptConfig};
pub use backward::{
    ann_backward, ann_backward_from, softmax_cross_entropy, stbp_backward, stbp_backward_from, surrogate_grad,
    zero_gradients, Gradients,
};
pub use convert::convert_ann_to_snn;
pub use optim::{adam_step, learning_rate, AdamConfig, OptimState};
pub use trainer::{train_ann, train_bntt, train_sg, training_sample_id, EpochLog, TrainConfig};

#[cfg(test)]
mod tests;
