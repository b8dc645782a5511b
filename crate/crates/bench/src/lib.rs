//! Fixtures shared by the benchmarks.

use maskwright::gradcheck::random_tensor;
use maskwright::nn::{Activation, Batch, LayerSpec, ModelGraph, TokenBatch};
use maskwright::presets::preset;
use maskwright::tasks::{generate, LabeledDataset, TaskKind, TaskSpec};
use maskwright::Padding;

/// A single 3x3 same-padded convolution and an image batch for it.
pub fn conv2d_fixture(batch: usize, side: usize) -> (ModelGraph, Batch) {
    let model = ModelGraph::new(
        vec![LayerSpec::Conv2d {
            in_channels: 1,
            filters: 8,
            kernel: 3,
            padding: Padding::Same,
            activation: Activation::Relu,
        }],
        1,
    )
    .expect("valid conv");
    (model, Batch::Values(random_tensor(&[batch, 1, side, side], -1.0, 1.0, 2)))
}

/// Embedding followed by a bidirectional GRU over token sequences.
pub fn bigru_fixture(batch: usize, steps: usize) -> (ModelGraph, Batch) {
    let model = ModelGraph::new(
        vec![LayerSpec::Embedding { vocab: 50, dim: 16 }, LayerSpec::BiGru { input: 16, hidden: 16 }],
        1,
    )
    .expect("valid gru");
    let ids = (0..batch * steps).map(|i| (i * 7 + 3) % 50).collect();
    (model, Batch::Tokens(TokenBatch::new(ids, batch, steps).expect("sized ids")))
}

/// Small generated dataset plus its preset base model.
pub fn task_fixture(kind: TaskKind, n: usize) -> (ModelGraph, LabeledDataset, TaskSpec) {
    let spec = TaskSpec::new(kind, n, 5);
    let data = generate(&spec).expect("valid spec");
    let model = preset(&spec, 5).and_then(|p| p.base_model(5)).expect("preset");
    (model, data, spec)
}
