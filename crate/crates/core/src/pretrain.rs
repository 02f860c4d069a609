//! Desk-scale stand-in for an ImageNet backbone: train the residual network
//! with a temporary multi-class head on the synthetic shapes task and keep
//! the backbone.

use serde::{Deserialize, Serialize};

use crate::loss::LossKind;
use crate::model::{ModelConfig, ModelGraph};
use crate::synth::{shapes_dataset, ShapesConfig, SHAPE_CLASSES};
use crate::train::{evaluate, split_indices, train, FitOutcome, TrainConfig, TrainObserver};
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub shapes: ShapesConfig,
    /// Images generated for training (validation is carved from these).
    pub samples: usize,
    /// Held-out images used to report the pretraining accuracy.
    pub test_samples: usize,
    pub train: TrainConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            shapes: ShapesConfig::default(),
            samples: 600,
            test_samples: 300,
            train: TrainConfig {
                max_epochs: 12,
                loss: LossKind::Bce,
                augmentation: None,
                validation_fraction: 0.2,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Backbone-only model, the transfer source.
    pub backbone: ModelGraph,
    pub fit: FitOutcome,
    /// Argmax accuracy on held-out shapes.
    pub test_accuracy: f64,
}

pub fn pretrain<O: TrainObserver + ?Sized>(
    config: &PretrainConfig,
    observer: &mut O,
) -> Result<PretrainOutcome> {
    let seed = config.train.seed;
    let mut shapes = config.shapes;
    shapes.size = config.model.input_shape[1].min(config.model.input_shape[2]);
    let data = shapes_dataset(config.samples, &shapes, seed, 0)?;
    let (tr, va) = split_indices(data.images.len(), config.train.validation_fraction, seed);
    let (train_split, val_split) = (data.select(&tr), data.select(&va));
    let mut model = ModelGraph::build_pretrain(&config.model, SHAPE_CLASSES.len(), seed)?;
    let fit = train(&mut model, &train_split, &val_split, config.train, observer)?;
    let test = shapes_dataset(config.test_samples.max(1), &shapes, seed, 1)?;
    let eval = evaluate(&model, &test, config.train.batch_size, &config.train.loss)?;
    Ok(PretrainOutcome {
        backbone: model.backbone_only(),
        fit,
        test_accuracy: eval.accuracy,
    })
}

/// Binary classifier whose backbone is copied from `backbone` and frozen.
pub fn transfer(config: &ModelConfig, backbone: &ModelGraph, seed: u64) -> Result<ModelGraph> {
    let mut model = ModelGraph::build(config, seed)?;
    model.load_backbone(backbone)?;
    model.freeze_backbone();
    Ok(model)
}
