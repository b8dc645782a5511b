//! Toy-scale architectures and training settings for the bundled tasks.

use crate::error::Result;
use crate::mask::{build_explainer, split_model, ExplainerVariant, MaskPoint, MaskedModel};
use crate::nn::{Activation, LayerSpec, ModelGraph};
use crate::objectives::RegularizerConfig;
use crate::tasks::{TaskKind, TaskSpec};
use crate::tensor::Padding;
use crate::train::TrainConfig;

/// Everything needed to run the two training phases on one task.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub base: Vec<LayerSpec>,
    pub split_index: usize,
    pub mask_point: MaskPoint,
    pub explainer: ExplainerVariant,
    pub base_train: TrainConfig,
    pub explainer_train: TrainConfig,
}

impl Preset {
    /// Fresh base model initialized from `seed`.
    pub fn base_model(&self, seed: u64) -> Result<ModelGraph> {
        ModelGraph::new(self.base.clone(), seed)
    }

    /// Splits a trained base model and attaches a fresh explainer.
    pub fn masked_model(&self, base: ModelGraph, input_shape: &[usize], seed: u64) -> Result<MaskedModel> {
        let split = split_model(base, self.split_index)?;
        let explainer = build_explainer(&self.explainer, seed)?;
        MaskedModel::assemble(split, explainer, self.mask_point, input_shape)
    }
}

fn train(epochs: usize, lr: f64, seed: u64, reg: RegularizerConfig) -> TrainConfig {
    TrainConfig { epochs, batch_size: 32, seed, lr: Some(lr), reg, eval_every: epochs, ..Default::default() }
}

/// Per-task defaults. Training seeds derive from `seed`.
pub fn preset(spec: &TaskSpec, seed: u64) -> Result<Preset> {
    spec.validate()?;
    let none = RegularizerConfig::default();
    Ok(match spec.kind {
        TaskKind::PlantedPatch => {
            let s = spec.image_size;
            // 2x pooling then one channel keeps the bottleneck a spatial map
            let side = s / 2;
            Preset {
                base: vec![
                    LayerSpec::Conv2d {
                        in_channels: 1,
                        filters: 8,
                        kernel: 3,
                        padding: Padding::Same,
                        activation: Activation::Relu,
                    },
                    LayerSpec::AvgPool2x,
                    LayerSpec::Conv2d {
                        in_channels: 8,
                        filters: 1,
                        kernel: 1,
                        padding: Padding::Same,
                        activation: Activation::Tanh,
                    },
                    LayerSpec::Reshape { shape: vec![side * side] },
                    LayerSpec::Dense { input: side * side, units: 16, activation: Activation::Relu },
                    LayerSpec::Dense { input: 16, units: spec.classes, activation: Activation::Identity },
                ],
                split_index: 4,
                mask_point: MaskPoint::RawInput,
                explainer: ExplainerVariant::Image { bottleneck: side * side, filters: 8, depth: 4 },
                base_train: train(10, 3e-3, seed, none),
                explainer_train: train(15, 3e-3, seed.wrapping_add(1), RegularizerConfig { l2: 1e-4, ..none }),
            }
        }
        TaskKind::KeywordSeq => Preset {
            base: vec![
                LayerSpec::Embedding { vocab: spec.vocab, dim: 16 },
                LayerSpec::BiGru { input: 16, hidden: 16 },
                LayerSpec::MeanOverTime,
                LayerSpec::Dense { input: 32, units: 16, activation: Activation::Relu },
                LayerSpec::Dense { input: 16, units: spec.classes, activation: Activation::Identity },
            ],
            split_index: 2,
            mask_point: MaskPoint::PostEmbedding,
            explainer: ExplainerVariant::Sequence {
                input: 32,
                steps: spec.seq_len,
                hidden: 16,
                gru_layers: 2,
                dense: 16,
                head: Activation::Sigmoid,
            },
            base_train: train(10, 3e-3, seed, none),
            explainer_train: train(25, 3e-3, seed.wrapping_add(1), RegularizerConfig { entropy: 0.1, ..none }),
        },
        TaskKind::CharCount => Preset {
            base: vec![
                LayerSpec::Embedding { vocab: spec.vocab, dim: 8 },
                LayerSpec::Conv1d {
                    in_channels: 8,
                    filters: 16,
                    kernel: 3,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                LayerSpec::MeanOverTime,
                LayerSpec::Dense { input: 16, units: 1, activation: Activation::Identity },
            ],
            split_index: 1,
            mask_point: MaskPoint::PostEmbedding,
            explainer: ExplainerVariant::Chars {
                input: 8,
                steps: spec.seq_len,
                filters: 8,
                conv_layers: 20,
                block_depth: 4,
            },
            base_train: train(40, 3e-3, seed, none),
            explainer_train: train(40, 1e-3, seed.wrapping_add(1), RegularizerConfig { l1: 1e-3, l2: 1e-4, ..none }),
        },
    })
}
