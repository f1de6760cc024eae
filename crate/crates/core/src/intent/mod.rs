//! The learned reward function: features, history windows, the LSTM
//! model, datasets and training.

pub mod dataset;
pub mod features;
pub mod history;
pub mod model;
pub mod train;

pub use dataset::{shift_labels, Dataset, DatasetRow, WindowSet};
pub use features::{extract_features, FeatureVector, StateDerivative, FEATURE_COUNT, FEATURE_NAMES, GOAL_HORIZON};
pub use history::{History, Normalizer, Window, HISTORY_LEN};
pub use model::{ModelConfig, RewardModel};
pub use train::{evaluate, train, train_with, EpochMetrics, EvalMetrics, TrainConfig, TrainReport};
