use serde::{Deserialize, Serialize};

use crate::augment::{RuntimeAugmentParams, CLASSIFICATION_RESIZE, SEGMENTATION_SIZE};
use crate::data::{Task, CLASSIFICATION_BATCH, DEFAULT_FOLDS, SEGMENTATION_BATCH};
use crate::error::{Error, Result};
use crate::metrics::DEFAULT_THRESHOLD;
use crate::models::{AlexConfig, ModelConfig, UNetConfig};
use crate::optim::{CLASSIFICATION_LR, SEGMENTATION_LR};

fn default_true() -> bool {
    true
}
fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub task: Task,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub folds: usize,
    pub seed: u64,
    pub model: ModelConfig,
    #[serde(default)]
    pub augment: RuntimeAugmentParams,
    /// Add the offline-expanded copies of every training original.
    #[serde(default = "default_true")]
    pub offline_expand: bool,
    /// Stratify folds by label (classification only).
    #[serde(default = "default_true")]
    pub stratify: bool,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// Train folds on the rayon pool instead of one after another.
    #[serde(default)]
    pub parallel_folds: bool,
    #[serde(default)]
    pub verbose: bool,
}

impl TrainConfig {
    /// 192 px U-Net, batch 20, 200 epochs, 10 folds.
    pub fn paper_segmentation() -> Self {
        TrainConfig {
            task: Task::Segmentation,
            epochs: 200,
            batch_size: SEGMENTATION_BATCH,
            lr: SEGMENTATION_LR,
            folds: DEFAULT_FOLDS,
            seed: 0,
            model: ModelConfig::Unet(UNetConfig {
                input_size: SEGMENTATION_SIZE,
                base_channels: 32,
                bottleneck_width: 512,
                ..UNetConfig::default()
            }),
            augment: RuntimeAugmentParams::default(),
            offline_expand: true,
            stratify: false,
            threshold: DEFAULT_THRESHOLD,
            parallel_folds: false,
            verbose: false,
        }
    }

    /// 224 px AlexNet with 1024-wide dense layers, batch 64, 300 epochs.
    /// Melanoma is scored one-vs-rest so the batch splits evenly over two
    /// classes.
    pub fn paper_classification() -> Self {
        TrainConfig {
            task: Task::Classification,
            epochs: 300,
            batch_size: CLASSIFICATION_BATCH,
            lr: CLASSIFICATION_LR,
            folds: DEFAULT_FOLDS,
            seed: 0,
            model: ModelConfig::Alexnet(AlexConfig {
                num_classes: 2,
                ..AlexConfig::default()
            }),
            augment: RuntimeAugmentParams::default(),
            offline_expand: true,
            stratify: true,
            threshold: DEFAULT_THRESHOLD,
            parallel_folds: false,
            verbose: false,
        }
    }

    /// 64 px inputs, base width 8, 30 epochs, 3 folds.
    pub fn desk_segmentation() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 4,
            lr: 1e-3,
            folds: 3,
            model: ModelConfig::Unet(UNetConfig::default()),
            offline_expand: false,
            ..Self::paper_segmentation()
        }
    }

    /// 64 px crops from 73 px squares, narrowed AlexNet, 20 epochs, 3 folds.
    pub fn desk_classification() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 30,
            lr: 1e-3,
            folds: 3,
            model: ModelConfig::Alexnet(AlexConfig {
                input_size: 64,
                fc_width: 64,
                num_classes: 3,
                width_mult: 0.125,
                ..AlexConfig::default()
            }),
            ..Self::paper_classification()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be at least 1"));
        }
        if self.folds < 2 {
            return Err(Error::invalid(format!("need at least 2 folds, got {}", self.folds)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        self.model.validate()?;
        self.augment.validate()?;
        match (&self.task, &self.model) {
            (Task::Segmentation, ModelConfig::Unet(_)) => Ok(()),
            (Task::Classification, ModelConfig::Alexnet(a)) => {
                if self.batch_size % a.num_classes != 0 {
                    return Err(Error::invalid(format!(
                        "batch size {} is not divisible by {} classes",
                        self.batch_size, a.num_classes
                    )));
                }
                Ok(())
            }
            (task, _) => Err(Error::invalid(format!("model architecture does not fit task {task:?}"))),
        }
    }

    pub fn input_size(&self) -> usize {
        self.model.input_size()
    }

    /// Side classification images are resized to before cropping.
    pub fn resize_side(&self) -> usize {
        resize_side_for(self.input_size())
    }
}

/// Keeps the 256:224 resize-to-crop ratio at any input size.
pub fn resize_side_for(input_size: usize) -> usize {
    (input_size as f64 * CLASSIFICATION_RESIZE as f64 / 224.0).round() as usize
}

/// Maps a dataset label onto the model's classes: with two classes,
/// class 0 stays 0 and every other label becomes 1.
pub fn model_label(label: usize, num_classes: usize) -> usize {
    if num_classes == 2 {
        usize::from(label != 0)
    } else {
        label
    }
}
