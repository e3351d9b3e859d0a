//! Differentiable models: the global classifiers under attack, the
//! conditional generator stack with split-at-layer evaluation, and local
//! training for both.

mod classifier;
mod generator;
mod train;

pub use classifier::{classifier_forward, loss_and_gradients, penultimate_features, Classifier};
pub use generator::{generator_forward, generator_tail_forward, FeatureVec, GenBlock, GeneratorStack};
pub use train::{
    train_classifier, train_generator, ClassifierTrainConfig, GanTrainConfig, GanTrainStats,
};

pub use crate::autodiff::input_gradient;
