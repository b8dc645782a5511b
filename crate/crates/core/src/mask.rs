//! Split base model, explanation network, and the masked forward pass.
//!
//! The frozen base model is cut into a feature extractor `F` and a
//! classifier `C`. The explanation network `E` maps `F(x)` to a mask `m`
//! shaped like the maskable input, and the prediction is
//! `C(F(x ⊙ broadcast(m)))`. The base model always runs in infer mode here.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Batch, Binding, ConvDims, Feed, LayerSpec, ModelGraph};
use crate::tensor::{Padding, Tensor};

/// Where the mask is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum MaskPoint {
    /// Directly on the model input (images).
    RawInput,
    /// On the output of the base model's leading embedding layer (token
    /// inputs, which cannot be multiplied directly).
    PostEmbedding,
}

impl MaskPoint {
    /// Number of base layers run before the mask is applied.
    pub fn offset(self) -> usize {
        match self {
            MaskPoint::RawInput => 0,
            MaskPoint::PostEmbedding => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MaskPoint::RawInput => "raw_input",
            MaskPoint::PostEmbedding => "post_embedding",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "raw_input" => Some(MaskPoint::RawInput),
            "post_embedding" => Some(MaskPoint::PostEmbedding),
            _ => None,
        }
    }
}

/// How a mask is replicated to the maskable-input shape (per example, no
/// batch axis).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BroadcastSpec {
    mask_shape: Vec<usize>,
    input_shape: Vec<usize>,
    broadcast_axis: Option<usize>,
}

impl BroadcastSpec {
    /// `broadcast_axis` indexes `input_shape`; removing it from
    /// `input_shape` must give `mask_shape`.
    pub fn new(mask_shape: Vec<usize>, input_shape: Vec<usize>, broadcast_axis: Option<usize>) -> Result<Self> {
        let expected: Vec<usize> = match broadcast_axis {
            Some(a) if a < input_shape.len() => {
                input_shape.iter().enumerate().filter(|(i, _)| *i != a).map(|(_, &d)| d).collect()
            }
            Some(a) => return Err(Error::size(format!("broadcast axis {a} outside input shape {input_shape:?}"))),
            None => input_shape.clone(),
        };
        if expected != mask_shape {
            return Err(Error::size(format!(
                "mask shape {mask_shape:?} does not broadcast to {input_shape:?} over axis {broadcast_axis:?}"
            )));
        }
        Ok(BroadcastSpec { mask_shape, input_shape, broadcast_axis })
    }

    pub fn mask_shape(&self) -> &[usize] {
        &self.mask_shape
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn broadcast_axis(&self) -> Option<usize> {
        self.broadcast_axis
    }
}

/// The usual mask layout for a maskable input: one value per pixel shared
/// across channels for `[C, H, W]`, one per timestep shared across feature
/// channels for `[T, D]`, elementwise otherwise.
pub fn default_broadcast(maskable: &[usize]) -> Result<BroadcastSpec> {
    match maskable.len() {
        3 => BroadcastSpec::new(maskable[1..].to_vec(), maskable.to_vec(), Some(0)),
        2 => BroadcastSpec::new(vec![maskable[0]], maskable.to_vec(), Some(1)),
        _ => BroadcastSpec::new(maskable.to_vec(), maskable.to_vec(), None),
    }
}

/// `x ⊙ broadcast(m)` for batched `x: [N, input_shape]`, `m: [N, mask_shape]`.
pub fn apply_mask<'t>(x: Var<'t>, m: Var<'t>, spec: &BroadcastSpec) -> Result<Var<'t>> {
    let xs = x.shape();
    let ms = m.shape();
    if xs[1..] != spec.input_shape[..] || ms[1..] != spec.mask_shape[..] || xs[0] != ms[0] {
        return Err(Error::size(format!("cannot mask input {xs:?} with mask {ms:?} under {spec:?}")));
    }
    let full = match spec.broadcast_axis {
        Some(a) => m.expand_axis(a + 1, spec.input_shape[a])?,
        None => m,
    };
    x.mul(full)
}

/// The base model cut at `split_index`: layers before it form the feature
/// extractor, the rest the classifier. Both views share the base's
/// parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitModel {
    base: ModelGraph,
    split_index: usize,
}

pub fn split_model(base: ModelGraph, split_index: usize) -> Result<SplitModel> {
    if split_index == 0 || split_index >= base.len() {
        return Err(Error::Index(format!("split index {split_index} must lie strictly inside 0..{}", base.len())));
    }
    Ok(SplitModel { base, split_index })
}

impl SplitModel {
    pub fn split_index(&self) -> usize {
        self.split_index
    }

    pub fn base(&self) -> &ModelGraph {
        &self.base
    }

    pub fn base_mut(&mut self) -> &mut ModelGraph {
        &mut self.base
    }

    pub fn into_base(self) -> ModelGraph {
        self.base
    }

    pub fn feature_extractor_specs(&self) -> &[crate::nn::Layer] {
        &self.base.layers()[..self.split_index]
    }

    pub fn classifier_specs(&self) -> &[crate::nn::Layer] {
        &self.base.layers()[self.split_index..]
    }

    /// `F(x)` in infer mode.
    pub fn features<'a, 't>(&self, tape: &'t Tape, input: Feed<'a, 't>) -> Result<Var<'t>> {
        self.base.forward_infer(tape, input, 0..self.split_index, &mut Binding::new())
    }

    /// `C(F(x))` in infer mode.
    pub fn recompose<'a, 't>(&self, tape: &'t Tape, input: Feed<'a, 't>) -> Result<Var<'t>> {
        let f = self.features(tape, input)?;
        self.base.forward_infer(tape, Feed::Values(f), self.split_index..self.base.len(), &mut Binding::new())
    }
}

/// Which explainer architecture to build.
#[derive(Clone, Debug, PartialEq)]
pub enum ExplainerVariant {
    /// Bottleneck vector → square map → residual conv block (tanh) →
    /// 2x upsample → residual conv block → 1x1 conv with sigmoid.
    Image { bottleneck: usize, filters: usize, depth: usize },
    /// Stacked bidirectional GRUs over per-timestep features, then a
    /// per-timestep relu dense layer and a linear scalar head followed by
    /// `head` (sigmoid by default).
    Sequence { input: usize, steps: usize, hidden: usize, gru_layers: usize, dense: usize, head: Activation },
    /// `conv_layers` same-padded SELU convolutions in residual blocks of
    /// `block_depth`, then a length-1 convolution, batch norm and softplus.
    Chars { input: usize, steps: usize, filters: usize, conv_layers: usize, block_depth: usize },
}

/// Layer list for an explanation network; the result maps per-example
/// feature shapes to per-example mask shapes.
pub fn explainer_specs(variant: &ExplainerVariant) -> Result<Vec<LayerSpec>> {
    match *variant {
        ExplainerVariant::Image { bottleneck, filters, depth } => {
            let side = (bottleneck as f64).sqrt().round() as usize;
            if side == 0 || side * side != bottleneck {
                return Err(Error::Config(format!("bottleneck of {bottleneck} cannot be reshaped to a square map")));
            }
            Ok(vec![
                LayerSpec::Reshape { shape: vec![1, side, side] },
                LayerSpec::ResidualBlock {
                    dims: ConvDims::Two,
                    in_channels: 1,
                    filters,
                    kernel: 3,
                    depth,
                    activation: Activation::Tanh,
                },
                LayerSpec::Upsample2x,
                LayerSpec::ResidualBlock {
                    dims: ConvDims::Two,
                    in_channels: filters,
                    filters,
                    kernel: 3,
                    depth,
                    activation: Activation::Tanh,
                },
                LayerSpec::Conv2d {
                    in_channels: filters,
                    filters: 1,
                    kernel: 1,
                    padding: Padding::Same,
                    activation: Activation::Sigmoid,
                },
                LayerSpec::Reshape { shape: vec![2 * side, 2 * side] },
            ])
        }
        ExplainerVariant::Sequence { input, steps, hidden, gru_layers, dense, head } => {
            if gru_layers == 0 {
                return Err(Error::Config("sequence explainer needs at least one GRU layer".into()));
            }
            let mut v = Vec::new();
            for i in 0..gru_layers {
                v.push(LayerSpec::BiGru { input: if i == 0 { input } else { 2 * hidden }, hidden });
            }
            v.push(LayerSpec::Dense { input: 2 * hidden, units: dense, activation: Activation::Relu });
            v.push(LayerSpec::Dense { input: dense, units: 1, activation: Activation::Identity });
            v.push(LayerSpec::Activation(head));
            v.push(LayerSpec::Reshape { shape: vec![steps] });
            Ok(v)
        }
        ExplainerVariant::Chars { input, steps, filters, conv_layers, block_depth } => {
            if block_depth == 0 || conv_layers == 0 || conv_layers % block_depth != 0 {
                return Err(Error::Config(format!(
                    "{conv_layers} conv layers do not split into blocks of {block_depth}"
                )));
            }
            let mut v = Vec::new();
            for b in 0..conv_layers / block_depth {
                v.push(LayerSpec::ResidualBlock {
                    dims: ConvDims::One,
                    in_channels: if b == 0 { input } else { filters },
                    filters,
                    kernel: 3,
                    depth: block_depth,
                    activation: Activation::Selu,
                });
            }
            v.push(LayerSpec::Conv1d {
                in_channels: filters,
                filters: 1,
                kernel: 1,
                padding: Padding::Same,
                activation: Activation::Identity,
            });
            v.push(LayerSpec::BatchNorm { features: 1 });
            v.push(LayerSpec::Activation(Activation::Softplus));
            v.push(LayerSpec::Reshape { shape: vec![steps] });
            Ok(v)
        }
    }
}

pub fn build_explainer(variant: &ExplainerVariant, seed: u64) -> Result<ModelGraph> {
    ModelGraph::new(explainer_specs(variant)?, seed)
}

/// Output of one masked forward pass.
#[derive(Debug)]
pub struct MaskedOutput<'t> {
    /// Base-model output on the masked input.
    pub output: Var<'t>,
    /// `[N, mask_shape]`.
    pub mask: Var<'t>,
    /// Explainer parameter bindings for gradient write-back.
    pub binding: Binding,
}

/// Frozen split base model plus a trainable explanation network.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskedModel {
    split: SplitModel,
    explainer: ModelGraph,
    broadcast: BroadcastSpec,
    mask_point: MaskPoint,
    forced_mask: Option<f64>,
}

impl MaskedModel {
    /// Assembles the model, freezing the base and making the explainer
    /// trainable. `input_shape` is the per-example base input shape (token
    /// count for token inputs).
    pub fn new(
        mut split: SplitModel,
        mut explainer: ModelGraph,
        broadcast: BroadcastSpec,
        mask_point: MaskPoint,
        input_shape: &[usize],
    ) -> Result<Self> {
        let offset = mask_point.offset();
        if mask_point == MaskPoint::PostEmbedding
            && !matches!(split.base.layers().first().map(|l| &l.spec), Some(LayerSpec::Embedding { .. }))
        {
            return Err(Error::Config("post-embedding masking needs an embedding as the first base layer".into()));
        }
        if offset > split.split_index {
            return Err(Error::Config("mask point lies after the split".into()));
        }
        let maskable = split.base.output_shape_range(input_shape, 0..offset)?;
        if maskable != broadcast.input_shape {
            return Err(Error::size(format!(
                "maskable input is {maskable:?} but broadcast expects {:?}",
                broadcast.input_shape
            )));
        }
        let features = split.base.output_shape_range(&maskable, offset..split.split_index)?;
        let mask = explainer.output_shape(&features)?;
        if mask != broadcast.mask_shape {
            return Err(Error::size(format!(
                "explainer maps features {features:?} to {mask:?}, mask must be {:?}",
                broadcast.mask_shape
            )));
        }
        split.base.set_trainable(false);
        split.base.set_mode(crate::nn::Mode::Infer);
        explainer.set_trainable(true);
        Ok(MaskedModel { split, explainer, broadcast, mask_point, forced_mask: None })
    }

    /// [`MaskedModel::new`] with the [`default_broadcast`] layout.
    pub fn assemble(
        split: SplitModel,
        explainer: ModelGraph,
        mask_point: MaskPoint,
        input_shape: &[usize],
    ) -> Result<Self> {
        let maskable = split.base.output_shape_range(input_shape, 0..mask_point.offset().min(split.base.len()))?;
        let broadcast = default_broadcast(&maskable)?;
        Self::new(split, explainer, broadcast, mask_point, input_shape)
    }

    pub fn split(&self) -> &SplitModel {
        &self.split
    }

    pub fn base(&self) -> &ModelGraph {
        &self.split.base
    }

    pub fn explainer(&self) -> &ModelGraph {
        &self.explainer
    }

    pub fn explainer_mut(&mut self) -> &mut ModelGraph {
        &mut self.explainer
    }

    pub fn broadcast(&self) -> &BroadcastSpec {
        &self.broadcast
    }

    pub fn mask_point(&self) -> MaskPoint {
        self.mask_point
    }

    /// Re-freezes every base parameter.
    pub fn freeze_base(&mut self) {
        self.split.base.set_trainable(false);
    }

    /// Diagnostic hook: replace every explainer mask value with `value`.
    pub fn force_mask(&mut self, value: Option<f64>) {
        self.forced_mask = value;
    }

    pub fn into_parts(self) -> (SplitModel, ModelGraph) {
        (self.split, self.explainer)
    }

    fn maskable<'a, 't>(&self, tape: &'t Tape, input: Feed<'a, 't>) -> Result<Var<'t>> {
        match self.mask_point {
            MaskPoint::RawInput => match input {
                Feed::Values(v) => Ok(v),
                Feed::Tokens(_) => Err(Error::Config("token inputs need post-embedding masking".into())),
            },
            MaskPoint::PostEmbedding => self.split.base.forward_infer(tape, input, 0..1, &mut Binding::new()),
        }
    }

    fn mask_from<'t>(&mut self, tape: &'t Tape, maskable: Var<'t>, binding: &mut Binding) -> Result<Var<'t>> {
        let offset = self.mask_point.offset();
        let feats = self.split.base.forward_infer(
            tape,
            Feed::Values(maskable),
            offset..self.split.split_index,
            &mut Binding::new(),
        )?;
        let mask = self.explainer.forward(tape, Feed::Values(feats), binding)?;
        Ok(match self.forced_mask {
            Some(v) => tape.constant(Tensor::full(&mask.shape(), v)),
            None => mask,
        })
    }

    /// `E(F(x))`, computed from the unmasked input.
    pub fn compute_mask(&mut self, input: &Batch) -> Result<Tensor> {
        let tape = Tape::new();
        let maskable = self.maskable(&tape, input.feed(&tape))?;
        let mask = self.mask_from(&tape, maskable, &mut Binding::new())?;
        Ok((*mask.value()).clone())
    }

    /// Mask from the unmasked input's features, then the full base model on
    /// the masked input. The explainer runs in its own mode (batch norm
    /// statistics update in train mode).
    pub fn masked_forward<'a, 't>(&mut self, tape: &'t Tape, input: Feed<'a, 't>) -> Result<MaskedOutput<'t>> {
        let mut binding = Binding::new();
        let maskable = self.maskable(tape, input)?;
        let mask = self.mask_from(tape, maskable, &mut binding)?;
        let masked = apply_mask(maskable, mask, &self.broadcast)?;
        let output = self.split.base.forward_infer(
            tape,
            Feed::Values(masked),
            self.mask_point.offset()..self.split.base.len(),
            &mut Binding::new(),
        )?;
        Ok(MaskedOutput { output, mask, binding })
    }

    /// Infer-mode masked prediction: `(output, mask)` values.
    pub fn predict(&mut self, input: &Batch) -> Result<(Tensor, Tensor)> {
        let mode = self.explainer.mode();
        self.explainer.set_mode(crate::nn::Mode::Infer);
        let tape = Tape::new();
        let res = self.masked_forward(&tape, input.feed(&tape));
        self.explainer.set_mode(mode);
        let out = res?;
        Ok(((*out.output.value()).clone(), (*out.mask.value()).clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testutil::rand_tensor;
    use crate::nn::Mode;

    fn small_cnn(seed: u64) -> ModelGraph {
        ModelGraph::new(
            vec![
                LayerSpec::Conv2d {
                    in_channels: 3,
                    filters: 2,
                    kernel: 3,
                    padding: Padding::Same,
                    activation: Activation::Relu,
                },
                LayerSpec::AvgPool2x,
                LayerSpec::Reshape { shape: vec![8] },
                LayerSpec::Dense { input: 8, units: 2, activation: Activation::Identity },
            ],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn split_bounds() {
        assert!(split_model(small_cnn(0), 0).is_err());
        assert!(split_model(small_cnn(0), 4).is_err());
        let s = split_model(small_cnn(0), 2).unwrap();
        assert_eq!(s.feature_extractor_specs().len(), 2);
        assert_eq!(s.classifier_specs().len(), 2);
    }

    #[test]
    fn recomposition_is_bitwise() {
        let mut base = small_cnn(3);
        base.set_mode(Mode::Infer);
        for split in 1..4 {
            let s = split_model(base.clone(), split).unwrap();
            for seed in 0..10 {
                let x = rand_tensor(&[2, 3, 4, 4], seed);
                let want = base.predict(&Batch::Values(x.clone())).unwrap();
                let tape = Tape::new();
                let got = s.recompose(&tape, Feed::Values(tape.constant(x))).unwrap().value();
                let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(&want), bits(&got));
            }
        }
    }

    #[test]
    fn apply_mask_broadcasts_over_channels() {
        let spec = BroadcastSpec::new(vec![2, 2], vec![3, 2, 2], Some(0)).unwrap();
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[1, 3, 2, 2], 1));
        let m = tape.constant(Tensor::from_vec(&[1, 2, 2], vec![0.1, 0.5, 0.9, 0.3]).unwrap());
        let y = apply_mask(x, m, &spec).unwrap().value();
        let xv = x.value();
        for i in 0..4 {
            let ratios: Vec<f64> = (0..3).map(|c| y.data()[c * 4 + i] / xv.data()[c * 4 + i]).collect();
            assert!(ratios.iter().all(|r| (r - ratios[0]).abs() < 1e-15));
        }
        let ones = tape.constant(Tensor::ones(&[1, 2, 2]));
        assert_eq!(apply_mask(x, ones, &spec).unwrap().value().data(), xv.data());
        let zeros = tape.constant(Tensor::zeros(&[1, 2, 2]));
        assert!(apply_mask(x, zeros, &spec).unwrap().value().data().iter().all(|&v| v == 0.0));
        assert!(BroadcastSpec::new(vec![3, 2], vec![3, 2, 2], Some(0)).is_err());
    }

    #[test]
    fn explainer_shapes() {
        let e = explainer_specs(&ExplainerVariant::Image { bottleneck: 64, filters: 4, depth: 4 }).unwrap();
        let g = ModelGraph::new(e, 0).unwrap();
        assert_eq!(g.output_shape(&[64]).unwrap(), vec![16, 16]);
        assert!(explainer_specs(&ExplainerVariant::Image { bottleneck: 60, filters: 4, depth: 4 }).is_err());

        let e = explainer_specs(&ExplainerVariant::Sequence {
            input: 8,
            steps: 20,
            hidden: 4,
            gru_layers: 2,
            dense: 6,
            head: Activation::Sigmoid,
        })
        .unwrap();
        assert_eq!(ModelGraph::new(e, 0).unwrap().output_shape(&[20, 8]).unwrap(), vec![20]);

        let e = explainer_specs(&ExplainerVariant::Chars {
            input: 5,
            steps: 12,
            filters: 4,
            conv_layers: 20,
            block_depth: 4,
        })
        .unwrap();
        let mut g = ModelGraph::new(e, 0).unwrap();
        assert_eq!(g.output_shape(&[12, 5]).unwrap(), vec![12]);
        g.set_mode(Mode::Train);
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[3, 12, 5], 4));
        let m = g.forward(&tape, Feed::Values(x), &mut Binding::new()).unwrap();
        assert!(m.value().data().iter().all(|&v| v >= 0.0));
    }
}
