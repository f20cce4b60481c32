//! Ready-made configurations: a desk-scale setup that trains in seconds and
//! the full-scale CIFAR protocol (long-running; not part of the test suite).

use crate::config::{BufferUnit, ExperimentConfig, Mode};
use crate::data::DatasetSpec;
use crate::net::AuxKind;
use std::path::PathBuf;

/// Quick synthetic-task setup: width 16, 4 modules, 10 epoch-equivalents,
/// batch 16. Runs in seconds in any mode.
pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig {
        mode: Mode::Sync,
        seed: 0,
        epochs: 10,
        batch_size: 16,
        eval_per_epoch: 2,
        precision: 32,
        width: 16,
        modules: 4,
        aux: AuxKind::MlpAux,
        lr: 0.05,
        momentum: 0.9,
        weight_decay: 5e-4,
        decay_factor: 0.2,
        decay_period: 4,
        slow_module: None,
        slowdown: 1.0,
        pmf: None,
        buffer_capacity: 2,
        buffer_unit: BufferUnit::Batches,
        channel_capacity: 2,
        atoms: 256,
        groups: 8,
        ema_decay: 0.99,
        sync_period: 1,
        sync_rate: None,
        dataset: DatasetSpec::SyntheticGaussians {
            classes: 4,
            channels: 1,
            spatial: 8,
            train_n: 512,
            test_n: 512,
            noise: 1.0,
        },
    }
}

/// The full-scale protocol on CIFAR-10 binary batches: width 128, 6 modules,
/// 50 epochs, batch 128, lr 0.1 with 0.2 decay every 15 epochs, momentum 0.9,
/// weight decay 5e-4. Expect hours on a CPU.
pub fn cifar_config(train_paths: Vec<PathBuf>, test_path: PathBuf) -> ExperimentConfig {
    ExperimentConfig {
        width: 128,
        modules: 6,
        atoms: 256,
        groups: 32,
        aux: AuxKind::MlpSrAux,
        dataset: DatasetSpec::Cifar10Binary {
            train_paths,
            test_path: Some(test_path),
            subset_n: 0,
        },
        ..ExperimentConfig::default()
    }
}
