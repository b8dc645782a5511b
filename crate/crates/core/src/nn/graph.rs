use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, NodeId, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{fnv_feed, fnv_start, Tensor};

use super::functional::{
    forward_batchnorm, forward_bigru, forward_conv1d_seq, forward_dense, forward_embedding, forward_gru,
    forward_residual_block, update_running_stats, GruParams,
};
use super::spec::{ConvDims, LayerSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Infer,
}

/// A named parameter tensor owned by one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
    /// Running statistics and similar state: never trainable.
    pub buffer: bool,
    pub grad: Option<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<Param>,
}

impl Layer {
    fn param(&self, name: &str) -> &Param {
        self.params.iter().find(|p| p.name == name).expect("declared parameter")
    }
}

/// A batch of equal-length token sequences, `[batch, len]` row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
}

impl TokenBatch {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize) -> Result<Self> {
        if batch == 0 || len == 0 || ids.len() != batch * len {
            return Err(Error::size(format!("{} token ids for a [{batch}, {len}] batch", ids.len())));
        }
        Ok(TokenBatch { ids, batch, len })
    }

    pub fn from_rows(rows: &[&[usize]]) -> Result<Self> {
        let len = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::size("token rows of unequal length"));
        }
        Self::new(rows.iter().flat_map(|r| r.iter().copied()).collect(), rows.len(), len)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.len..(i + 1) * self.len]
    }
}

/// Model input for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Batch {
    Values(Tensor),
    Tokens(TokenBatch),
}

impl Batch {
    pub fn batch_size(&self) -> usize {
        match self {
            Batch::Values(t) => t.shape()[0],
            Batch::Tokens(t) => t.batch(),
        }
    }

    pub fn feed<'a, 't>(&'a self, tape: &'t Tape) -> Feed<'a, 't> {
        match self {
            Batch::Values(t) => Feed::Values(tape.constant(t.clone())),
            Batch::Tokens(t) => Feed::Tokens(t),
        }
    }
}

/// What a layer receives: a value on the tape, or raw token ids for an
/// embedding layer.
#[derive(Clone, Copy, Debug)]
pub enum Feed<'a, 't> {
    Values(Var<'t>),
    Tokens(&'a TokenBatch),
}

impl<'a, 't> Feed<'a, 't> {
    fn values(self) -> Result<Var<'t>> {
        match self {
            Feed::Values(v) => Ok(v),
            Feed::Tokens(_) => Err(Error::size("token ids reached a layer that expects values")),
        }
    }
}

/// Records which tape leaves stand for which trainable parameters during
/// one forward pass, so gradients can be written back.
#[derive(Clone, Debug, Default)]
pub struct Binding {
    entries: Vec<(usize, usize, NodeId)>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Train-mode side effects of a forward pass.
#[derive(Debug, Default)]
struct Effects {
    bn_updates: Vec<(usize, Vec<f64>, Vec<f64>, usize)>,
    dropout_calls: u64,
}

/// An ordered stack of layers with their parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGraph {
    layers: Vec<Layer>,
    mode: Mode,
    dropout_seed: u64,
    dropout_calls: u64,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::from_vec(shape, data).expect("param shape")
}

fn init_param(rng: &mut ChaCha8Rng, spec: &LayerSpec, name: &str, shape: &[usize]) -> Tensor {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    match (spec, leaf) {
        (_, "b") | (_, "beta") | (_, "running_mean") => Tensor::zeros(shape),
        (_, "gamma") | (_, "running_var") => Tensor::ones(shape),
        (LayerSpec::Conv2d { .. }, "w") | (LayerSpec::ResidualBlock { .. }, "w") if shape.len() == 4 => {
            let rf = shape[2] * shape[3];
            glorot(rng, shape, shape[1] * rf, shape[0] * rf)
        }
        (_, "w") if shape.len() == 3 => {
            let rf = shape[2];
            glorot(rng, shape, shape[1] * rf, shape[0] * rf)
        }
        _ => glorot(rng, shape, shape[0], shape[shape.len() - 1]),
    }
}

impl ModelGraph {
    /// Builds a graph with freshly initialized, trainable parameters.
    ///
    /// Dense, convolution, GRU and embedding weights are Glorot-uniform;
    /// biases start at zero, batch-norm scale at one.
    pub fn new(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            spec.validate().map_err(|e| Error::Layer { index: i, source: Box::new(e) })?;
            let params = spec
                .param_shapes()
                .into_iter()
                .map(|(name, shape, buffer)| Param {
                    value: init_param(&mut rng, &spec, &name, &shape),
                    name,
                    trainable: !buffer,
                    buffer,
                    grad: None,
                })
                .collect();
            layers.push(Layer { spec, params });
        }
        Ok(ModelGraph { layers, mode: Mode::Train, dropout_seed: rng.random(), dropout_calls: 0 })
    }

    /// Reassembles a graph from stored layers (used when loading files).
    pub fn from_layers(layers: Vec<Layer>, dropout_seed: u64) -> Result<Self> {
        for (i, layer) in layers.iter().enumerate() {
            let expected = layer.spec.param_shapes();
            let ok = expected.len() == layer.params.len()
                && expected
                    .iter()
                    .zip(&layer.params)
                    .all(|((n, s, _), p)| *n == p.name && s.as_slice() == p.value.shape());
            if !ok {
                return Err(Error::Layer {
                    index: i,
                    source: Box::new(Error::size(format!("parameters do not match {} layer", layer.spec.kind()))),
                });
            }
        }
        Ok(ModelGraph { layers, mode: Mode::Infer, dropout_seed, dropout_calls: 0 })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn dropout_seed(&self) -> u64 {
        self.dropout_seed
    }

    /// `(qualified name, param)` pairs; names are `layer{i}.{param}`.
    pub fn params(&self) -> impl Iterator<Item = (String, &Param)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.params.iter().map(move |p| (format!("layer{i}.{}", p.name), p)))
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().flat_map(|l| &l.params).map(|p| p.value.len()).sum()
    }

    /// Digest over every parameter's name, shape and value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv_start();
        for (name, p) in self.params() {
            h = fnv_feed(h, name.as_bytes());
            h = fnv_feed(h, &p.value.checksum().to_le_bytes());
        }
        h
    }

    /// Sets the trainable flag on every non-buffer parameter.
    pub fn set_trainable(&mut self, trainable: bool) {
        for p in self.params_mut() {
            p.trainable = trainable && !p.buffer;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.grad = None;
        }
    }

    /// Per-example output shape after `range` of layers.
    pub fn output_shape_range(&self, input: &[usize], range: Range<usize>) -> Result<Vec<usize>> {
        let mut shape = input.to_vec();
        for i in range {
            shape =
                self.layers[i].spec.output_shape(&shape).map_err(|e| Error::Layer { index: i, source: Box::new(e) })?;
        }
        Ok(shape)
    }

    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.output_shape_range(input, 0..self.layers.len())
    }

    /// Forward pass through every layer in the graph's current mode.
    pub fn forward<'a, 't>(&mut self, tape: &'t Tape, input: Feed<'a, 't>, binding: &mut Binding) -> Result<Var<'t>> {
        self.forward_range(tape, input, 0..self.layers.len(), binding)
    }

    /// Forward pass through `range`. In train mode this updates batch-norm
    /// running statistics and advances the dropout stream.
    pub fn forward_range<'a, 't>(
        &mut self,
        tape: &'t Tape,
        input: Feed<'a, 't>,
        range: Range<usize>,
        binding: &mut Binding,
    ) -> Result<Var<'t>> {
        let mut fx = Effects::default();
        let out = self.run(tape, input, range, self.mode, binding, &mut fx)?;
        self.apply_effects(fx);
        Ok(out)
    }

    /// Infer-mode forward pass that leaves the graph untouched.
    pub fn forward_infer<'a, 't>(
        &self,
        tape: &'t Tape,
        input: Feed<'a, 't>,
        range: Range<usize>,
        binding: &mut Binding,
    ) -> Result<Var<'t>> {
        let mut fx = Effects::default();
        self.run(tape, input, range, Mode::Infer, binding, &mut fx)
    }

    /// Infer-mode evaluation without gradients.
    pub fn predict(&self, input: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let mut binding = Binding::new();
        let out = self.forward_infer(&tape, input.feed(&tape), 0..self.layers.len(), &mut binding)?;
        Ok((*out.value()).clone())
    }

    fn apply_effects(&mut self, fx: Effects) {
        for (layer, mean, var, rows) in fx.bn_updates {
            let params = &mut self.layers[layer].params;
            let mut rm = params[2].value.data().to_vec();
            let mut rv = params[3].value.data().to_vec();
            update_running_stats(&mut rm, &mut rv, &mean, &var, rows);
            params[2].value.data_mut().copy_from_slice(&rm);
            params[3].value.data_mut().copy_from_slice(&rv);
        }
        self.dropout_calls += fx.dropout_calls;
    }

    /// Adds the gradients of every bound trainable parameter into its
    /// `grad` buffer.
    pub fn accumulate_grads(&mut self, binding: &Binding, grads: &Gradients) {
        for &(l, p, node) in &binding.entries {
            let param = &mut self.layers[l].params[p];
            if !param.trainable {
                continue;
            }
            if let Some(g) = grads.slice(node) {
                let acc = param.grad.get_or_insert_with(|| Tensor::zeros(param.value.shape()));
                acc.data_mut().iter_mut().zip(g).for_each(|(a, &v)| *a += v);
            }
        }
    }

    fn run<'a, 't>(
        &self,
        tape: &'t Tape,
        input: Feed<'a, 't>,
        range: Range<usize>,
        mode: Mode,
        binding: &mut Binding,
        fx: &mut Effects,
    ) -> Result<Var<'t>> {
        if range.end > self.layers.len() || range.start > range.end {
            return Err(Error::Index(format!("layer range {range:?} of {} layers", self.layers.len())));
        }
        let mut cur = input;
        for i in range {
            let out = self
                .run_layer(i, tape, cur, mode, binding, fx)
                .map_err(|e| Error::Layer { index: i, source: Box::new(e) })?;
            cur = Feed::Values(out);
        }
        cur.values()
    }

    fn bind<'t>(&self, tape: &'t Tape, layer: usize, binding: &mut Binding) -> Vec<Var<'t>> {
        self.layers[layer]
            .params
            .iter()
            .enumerate()
            .map(|(pi, p)| {
                let v = tape.leaf(p.value.clone(), p.trainable && !p.buffer);
                if v.requires_grad() {
                    binding.entries.push((layer, pi, v.id()));
                }
                v
            })
            .collect()
    }

    fn run_layer<'a, 't>(
        &self,
        index: usize,
        tape: &'t Tape,
        input: Feed<'a, 't>,
        mode: Mode,
        binding: &mut Binding,
        fx: &mut Effects,
    ) -> Result<Var<'t>> {
        let layer = &self.layers[index];
        if let LayerSpec::Embedding { .. } = layer.spec {
            let Feed::Tokens(tokens) = input else {
                return Err(Error::size("embedding layer needs token ids"));
            };
            let p = self.bind(tape, index, binding);
            return forward_embedding(tape, tokens.ids(), &[tokens.batch(), tokens.len()], p[0]);
        }
        let x = input.values()?;
        // per-example shape contract
        let xs = x.shape();
        let expected = layer.spec.output_shape(&xs[1..])?;
        let n = xs[0];
        let p = self.bind(tape, index, binding);
        let out = match &layer.spec {
            LayerSpec::Dense { activation, .. } => forward_dense(x, p[0], p[1], *activation)?,
            LayerSpec::Conv2d { padding, activation, .. } => {
                activation.apply(x.conv2d(p[0], *padding)?.add_bias(p[1], 1)?)
            }
            LayerSpec::Conv1d { padding, activation, .. } => forward_conv1d_seq(x, p[0], p[1], *padding, *activation)?,
            LayerSpec::Gru { hidden, .. } => {
                let h0 = tape.constant(Tensor::zeros(&[n, *hidden]));
                forward_gru(x, h0, GruParams { w: p[0], u: p[1], b: p[2] })?
            }
            LayerSpec::BiGru { .. } => {
                forward_bigru(x, GruParams { w: p[0], u: p[1], b: p[2] }, GruParams { w: p[3], u: p[4], b: p[5] })?
            }
            LayerSpec::Embedding { .. } => unreachable!(),
            LayerSpec::BatchNorm { .. } => match mode {
                Mode::Train => {
                    let rows = x.value().len() / xs[xs.len() - 1];
                    let (y, mean, var) = forward_batchnorm(x, p[0], p[1], None)?;
                    fx.bn_updates.push((index, mean, var, rows));
                    y
                }
                Mode::Infer => {
                    let rm = layer.param("running_mean").value.data();
                    let rv = layer.param("running_var").value.data();
                    forward_batchnorm(x, p[0], p[1], Some((rm, rv)))?.0
                }
            },
            LayerSpec::Upsample2x => x.upsample2x()?,
            LayerSpec::AvgPool2x => x.avgpool2x()?,
            LayerSpec::ResidualBlock { dims, activation, .. } => {
                let convs: Vec<(Var<'t>, Var<'t>)> = p.chunks(2).map(|c| (c[0], c[1])).collect();
                match dims {
                    ConvDims::Two => forward_residual_block(x, &convs, *dims, *activation)?,
                    ConvDims::One => {
                        forward_residual_block(x.swap_last2()?, &convs, *dims, *activation)?.swap_last2()?
                    }
                }
            }
            LayerSpec::Activation(a) => a.apply(x),
            LayerSpec::MeanOverTime => x.mean(&[1])?,
            LayerSpec::Reshape { shape } => {
                let mut s = vec![n];
                s.extend_from_slice(shape);
                x.reshape(&s)?
            }
            LayerSpec::TimestepDropout { rate } => {
                if mode == Mode::Infer || *rate == 0.0 {
                    x
                } else {
                    let calls = self.dropout_calls + fx.dropout_calls;
                    fx.dropout_calls += 1;
                    let mut rng =
                        ChaCha8Rng::seed_from_u64(self.dropout_seed ^ calls.wrapping_mul(0x9e37_79b9_7f4a_7c15));
                    let (t_len, d) = (xs[1], xs[2]);
                    let keep = 1.0 / (1.0 - rate);
                    let mut mask = Vec::with_capacity(n * t_len * d);
                    for _ in 0..n * t_len {
                        let v = if rng.random::<f64>() < *rate { 0.0 } else { keep };
                        mask.extend(std::iter::repeat_n(v, d));
                    }
                    x.mul(tape.constant(Tensor::from_vec(&xs, mask)?))?
                }
            }
        };
        let got = out.shape();
        if got[1..] != expected[..] {
            return Err(Error::size(format!("layer produced {:?}, shape contract says {expected:?}", &got[1..])));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::Activation;
    use crate::nn::testutil::rand_tensor;
    use crate::tensor::Padding;

    #[test]
    fn empty_graph_is_identity() {
        let g = ModelGraph::new(vec![], 0).unwrap();
        let x = rand_tensor(&[2, 3], 1);
        assert_eq!(g.predict(&Batch::Values(x.clone())).unwrap(), x);
    }

    #[test]
    fn identity_dense_layer() {
        let mut g = ModelGraph::new(vec![LayerSpec::Dense { input: 3, units: 3, activation: Activation::Identity }], 0)
            .unwrap();
        let eye = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        g.layers_mut()[0].params[0].value = eye;
        let x = rand_tensor(&[4, 3], 2);
        assert_eq!(g.predict(&Batch::Values(x.clone())).unwrap(), x);
    }

    #[test]
    fn layer_errors_carry_index() {
        let g = ModelGraph::new(
            vec![
                LayerSpec::Dense { input: 3, units: 4, activation: Activation::Relu },
                LayerSpec::Dense { input: 5, units: 1, activation: Activation::Identity },
            ],
            0,
        )
        .unwrap();
        let err = g.predict(&Batch::Values(rand_tensor(&[2, 3], 3))).unwrap_err();
        assert!(matches!(err, Error::Layer { index: 1, .. }), "{err}");
    }

    #[test]
    fn infer_mode_is_deterministic_and_skips_dropout() {
        let mut g = ModelGraph::new(
            vec![
                LayerSpec::Embedding { vocab: 10, dim: 4 },
                LayerSpec::TimestepDropout { rate: 0.5 },
                LayerSpec::BiGru { input: 4, hidden: 3 },
                LayerSpec::MeanOverTime,
            ],
            5,
        )
        .unwrap();
        g.set_mode(Mode::Infer);
        let b = Batch::Tokens(TokenBatch::new(vec![1, 2, 3, 4, 5, 6], 2, 3).unwrap());
        let a = g.predict(&b).unwrap();
        let c = g.predict(&b).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            c.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );

        // train mode drops timesteps, so outputs differ from infer mode
        g.set_mode(Mode::Train);
        let tape = Tape::new();
        let mut bind = Binding::new();
        let t = g.forward(&tape, b.feed(&tape), &mut bind).unwrap();
        assert_ne!(t.value().data(), a.data());
    }

    #[test]
    fn batchnorm_train_updates_running_stats() {
        let mut g = ModelGraph::new(vec![LayerSpec::BatchNorm { features: 2 }], 0).unwrap();
        let x = Tensor::from_vec(&[2, 2], vec![1., 2., 3., 6.]).unwrap();
        let tape = Tape::new();
        let mut bind = Binding::new();
        let y = g.forward(&tape, Feed::Values(tape.constant(x.clone())), &mut bind).unwrap();
        let yv = y.value();
        // each column normalized to mean 0, var ~1
        for c in 0..2 {
            let m = (yv.data()[c] + yv.data()[2 + c]) / 2.0;
            let v = ((yv.data()[c] - m).powi(2) + (yv.data()[2 + c] - m).powi(2)) / 2.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-4);
        }
        let rm = g.layers()[0].params[2].value.data().to_vec();
        let rv = g.layers()[0].params[3].value.data().to_vec();
        assert!((rm[0] - 0.2).abs() < 1e-15 && (rm[1] - 0.4).abs() < 1e-15);
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
        assert!((rv[1] - (0.9 + 0.1 * 8.0)).abs() < 1e-15);

        // a single-row batch cannot be normalized in train mode
        let tape = Tape::new();
        let one = tape.constant(Tensor::from_vec(&[1, 2], vec![1., 2.]).unwrap());
        let err = g.forward(&tape, Feed::Values(one), &mut bind).unwrap_err();
        assert!(matches!(err.root(), Error::Batch(_)));
    }

    #[test]
    fn batchnorm_zero_gamma_outputs_beta() {
        let mut g = ModelGraph::new(vec![LayerSpec::BatchNorm { features: 3 }], 0).unwrap();
        g.layers_mut()[0].params[0].value = Tensor::zeros(&[3]);
        g.layers_mut()[0].params[1].value = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[4, 3], 8));
        let y = g.forward(&tape, Feed::Values(x), &mut Binding::new()).unwrap();
        for r in 0..4 {
            assert_eq!(&y.value().data()[r * 3..r * 3 + 3], &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn frozen_params_receive_no_grads() {
        let mut g = ModelGraph::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 1,
                    filters: 2,
                    kernel: 3,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                LayerSpec::Reshape { shape: vec![32] },
                LayerSpec::Dense { input: 32, units: 2, activation: Activation::Identity },
            ],
            1,
        )
        .unwrap();
        g.set_trainable(false);
        let tape = Tape::new();
        let mut bind = Binding::new();
        let x = tape.leaf(rand_tensor(&[2, 1, 4, 4], 4), true);
        let y = g.forward(&tape, Feed::Values(x), &mut bind).unwrap();
        let grads = tape.backward(y.sum_all()).unwrap();
        g.accumulate_grads(&bind, &grads);
        assert!(bind.is_empty());
        assert!(g.params().all(|(_, p)| p.grad.is_none()));
        assert!(grads.get(x).is_some());
    }
}
