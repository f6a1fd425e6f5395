//! The 16-block synthetic benchmark used for construction comparisons.

use crate::block::SkipConstruction;
use crate::data::DatasetSpec;
use crate::model::ModelConfig;
use crate::train::{LrSchedule, TrainConfig};

pub const CLASSES: usize = 5;
pub const TRAIN: usize = 2000;
pub const TEST: usize = 1000;
pub const NOISE: f64 = 0.02;
pub const DATA_SEED: u64 = 2024;
pub const DEPTH: usize = 16;
pub const WIDTH: usize = 64;
pub const EPOCHS: usize = 40;
/// Base rate of the step schedule. The library default of 0.1 diverges or
/// stalls on most seeds of this unnormalized-input MLP.
pub const LR: f64 = 0.01;

pub fn data_spec() -> DatasetSpec {
    DatasetSpec::spiral(CLASSES, TRAIN, TEST, NOISE, DATA_SEED)
}

/// Training configuration for one benchmark cell. Momentum, weight decay,
/// batch size, and the decay milestones keep their library defaults.
pub fn train_config(construction: SkipConstruction, seed: u64) -> TrainConfig {
    let model = ModelConfig::new(construction, DEPTH, 2, WIDTH, CLASSES);
    let mut cfg = TrainConfig::new(model, EPOCHS).with_seed(seed);
    cfg.lr = LrSchedule::step_decay(LR, EPOCHS);
    cfg
}
