use std::fmt;

use crate::autodiff::{Unary, Var};
use crate::error::{Error, Result};
use crate::tensor::Padding;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Tanh,
    Relu,
    Selu,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Identity => x,
            Activation::Tanh => x.unary(Unary::Tanh),
            Activation::Relu => x.unary(Unary::Relu),
            Activation::Selu => x.unary(Unary::Selu),
            Activation::Sigmoid => x.unary(Unary::Sigmoid),
            Activation::Softplus => x.unary(Unary::Softplus),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Selu => "selu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "identity" | "linear" => Activation::Identity,
            "tanh" => Activation::Tanh,
            "relu" => Activation::Relu,
            "selu" => Activation::Selu,
            "sigmoid" => Activation::Sigmoid,
            "softplus" => Activation::Softplus,
            _ => return None,
        })
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Spatial rank of a residual block's convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ConvDims {
    One,
    Two,
}

/// One layer of a [`ModelGraph`](super::ModelGraph).
///
/// Shapes below are per example; every layer also carries a leading batch
/// axis at run time. Sequence layers use `[T, features]` layout, so
/// `Conv1d` and 1-D residual blocks transpose around the `[C, T]` primitive.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerSpec {
    /// `[.., input] -> [.., units]`, applied over the last axis.
    Dense {
        input: usize,
        units: usize,
        activation: Activation,
    },
    /// `[C, H, W] -> [filters, H', W']` with a square kernel.
    Conv2d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
        activation: Activation,
    },
    /// `[T, C] -> [T', filters]`.
    Conv1d {
        in_channels: usize,
        filters: usize,
        kernel: usize,
        padding: Padding,
        activation: Activation,
    },
    /// `[T, input] -> [T, hidden]`, all hidden states.
    Gru {
        input: usize,
        hidden: usize,
    },
    /// `[T, input] -> [T, 2 * hidden]`, forward states then backward states.
    BiGru {
        input: usize,
        hidden: usize,
    },
    /// token ids `[T] -> [T, dim]`.
    Embedding {
        vocab: usize,
        dim: usize,
    },
    /// Normalizes the last axis.
    BatchNorm {
        features: usize,
    },
    /// `[C, H, W] -> [C, 2H, 2W]`, nearest neighbour.
    Upsample2x,
    /// `[C, H, W] -> [C, H/2, W/2]`.
    AvgPool2x,
    /// `depth` same-padded convolutions; the output is
    /// `activation(z_first + z_last)` where `z` are pre-activations and the
    /// intermediate layers apply `activation`.
    ResidualBlock {
        dims: ConvDims,
        in_channels: usize,
        filters: usize,
        kernel: usize,
        depth: usize,
        activation: Activation,
    },
    Activation(Activation),
    /// `[T, D] -> [D]`.
    MeanOverTime,
    Reshape {
        shape: Vec<usize>,
    },
    /// Zeroes whole timesteps of `[T, D]` with probability `rate` in train
    /// mode (scaled by `1 / (1 - rate)`); identity in infer mode.
    TimestepDropout {
        rate: f64,
    },
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return Err(Error::Config(format!("{name} must be positive")));
    }
    Ok(())
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Gru { .. } => "gru",
            LayerSpec::BiGru { .. } => "bigru",
            LayerSpec::Embedding { .. } => "embedding",
            LayerSpec::BatchNorm { .. } => "batchnorm",
            LayerSpec::Upsample2x => "upsample2x",
            LayerSpec::AvgPool2x => "avgpool2x",
            LayerSpec::ResidualBlock { .. } => "residual_block",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::MeanOverTime => "mean_over_time",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::TimestepDropout { .. } => "dropout",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            LayerSpec::Dense { input, units, .. } => {
                positive("dense input", *input)?;
                positive("dense units", *units)
            }
            LayerSpec::Conv2d { in_channels, filters, kernel, padding, .. }
            | LayerSpec::Conv1d { in_channels, filters, kernel, padding, .. } => {
                positive("conv in_channels", *in_channels)?;
                positive("conv filters", *filters)?;
                positive("conv kernel", *kernel)?;
                if *padding == Padding::Same && kernel % 2 == 0 {
                    return Err(Error::Config(format!("same padding needs an odd kernel, got {kernel}")));
                }
                Ok(())
            }
            LayerSpec::Gru { input, hidden } | LayerSpec::BiGru { input, hidden } => {
                positive("gru input", *input)?;
                positive("gru hidden", *hidden)
            }
            LayerSpec::Embedding { vocab, dim } => {
                positive("vocab", *vocab)?;
                positive("embedding dim", *dim)
            }
            LayerSpec::BatchNorm { features } => positive("batchnorm features", *features),
            LayerSpec::ResidualBlock { in_channels, filters, kernel, depth, .. } => {
                positive("residual in_channels", *in_channels)?;
                positive("residual filters", *filters)?;
                positive("residual depth", *depth)?;
                if kernel % 2 == 0 {
                    return Err(Error::Config(format!("residual blocks need an odd kernel, got {kernel}")));
                }
                Ok(())
            }
            LayerSpec::Reshape { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::Config(format!("bad reshape target {shape:?}")));
                }
                Ok(())
            }
            LayerSpec::TimestepDropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")));
                }
                Ok(())
            }
            LayerSpec::Upsample2x | LayerSpec::AvgPool2x | LayerSpec::Activation(_) | LayerSpec::MeanOverTime => Ok(()),
        }
    }

    /// Parameter names and shapes, in storage order. The flag marks
    /// non-trainable buffers (batch-norm running statistics).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>, bool)> {
        let p = |n: &str, s: Vec<usize>| (n.to_string(), s, false);
        match self {
            LayerSpec::Dense { input, units, .. } => vec![p("w", vec![*input, *units]), p("b", vec![*units])],
            LayerSpec::Conv2d { in_channels, filters, kernel, .. } => {
                vec![p("w", vec![*filters, *in_channels, *kernel, *kernel]), p("b", vec![*filters])]
            }
            LayerSpec::Conv1d { in_channels, filters, kernel, .. } => {
                vec![p("w", vec![*filters, *in_channels, *kernel]), p("b", vec![*filters])]
            }
            LayerSpec::Gru { input, hidden } => {
                vec![p("w", vec![*input, 3 * hidden]), p("u", vec![*hidden, 3 * hidden]), p("b", vec![3 * hidden])]
            }
            LayerSpec::BiGru { input, hidden } => vec![
                p("fwd.w", vec![*input, 3 * hidden]),
                p("fwd.u", vec![*hidden, 3 * hidden]),
                p("fwd.b", vec![3 * hidden]),
                p("bwd.w", vec![*input, 3 * hidden]),
                p("bwd.u", vec![*hidden, 3 * hidden]),
                p("bwd.b", vec![3 * hidden]),
            ],
            LayerSpec::Embedding { vocab, dim } => vec![p("table", vec![*vocab, *dim])],
            LayerSpec::BatchNorm { features } => vec![
                p("gamma", vec![*features]),
                p("beta", vec![*features]),
                ("running_mean".into(), vec![*features], true),
                ("running_var".into(), vec![*features], true),
            ],
            LayerSpec::ResidualBlock { dims, in_channels, filters, kernel, depth, .. } => {
                let mut v = Vec::new();
                for i in 0..*depth {
                    let c_in = if i == 0 { *in_channels } else { *filters };
                    let w = match dims {
                        ConvDims::One => vec![*filters, c_in, *kernel],
                        ConvDims::Two => vec![*filters, c_in, *kernel, *kernel],
                    };
                    v.push((format!("conv{i}.w"), w, false));
                    v.push((format!("conv{i}.b"), vec![*filters], false));
                }
                v
            }
            _ => Vec::new(),
        }
    }

    /// Per-example output shape for a per-example input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = || Error::size(format!("{} layer cannot take input shape {input:?}", self.kind()));
        match self {
            LayerSpec::Dense { input: d, units, .. } => {
                if input.last() != Some(d) {
                    return Err(bad());
                }
                let mut s = input.to_vec();
                *s.last_mut().unwrap() = *units;
                Ok(s)
            }
            LayerSpec::Conv2d { in_channels, filters, kernel, padding, .. } => {
                if input.len() != 3 || input[0] != *in_channels {
                    return Err(bad());
                }
                let (h, w) = conv_out(input[1], input[2], *kernel, *padding).ok_or_else(bad)?;
                Ok(vec![*filters, h, w])
            }
            LayerSpec::Conv1d { in_channels, filters, kernel, padding, .. } => {
                if input.len() != 2 || input[1] != *in_channels {
                    return Err(bad());
                }
                let (_, t) = conv_out(1, input[0], *kernel, *padding).ok_or_else(bad)?;
                Ok(vec![t, *filters])
            }
            LayerSpec::Gru { input: d, hidden } => {
                if input.len() != 2 || input[1] != *d {
                    return Err(bad());
                }
                Ok(vec![input[0], *hidden])
            }
            LayerSpec::BiGru { input: d, hidden } => {
                if input.len() != 2 || input[1] != *d {
                    return Err(bad());
                }
                Ok(vec![input[0], 2 * hidden])
            }
            LayerSpec::Embedding { dim, .. } => {
                if input.len() != 1 {
                    return Err(bad());
                }
                Ok(vec![input[0], *dim])
            }
            LayerSpec::BatchNorm { features } => {
                if input.last() != Some(features) {
                    return Err(bad());
                }
                Ok(input.to_vec())
            }
            LayerSpec::Upsample2x => {
                if input.len() != 3 {
                    return Err(bad());
                }
                Ok(vec![input[0], 2 * input[1], 2 * input[2]])
            }
            LayerSpec::AvgPool2x => {
                if input.len() != 3 || !input[1].is_multiple_of(2) || !input[2].is_multiple_of(2) {
                    return Err(bad());
                }
                Ok(vec![input[0], input[1] / 2, input[2] / 2])
            }
            LayerSpec::ResidualBlock { dims, in_channels, filters, .. } => match dims {
                ConvDims::Two if input.len() == 3 && input[0] == *in_channels => Ok(vec![*filters, input[1], input[2]]),
                ConvDims::One if input.len() == 2 && input[1] == *in_channels => Ok(vec![input[0], *filters]),
                _ => Err(bad()),
            },
            LayerSpec::Activation(_) | LayerSpec::TimestepDropout { .. } => Ok(input.to_vec()),
            LayerSpec::MeanOverTime => {
                if input.len() != 2 {
                    return Err(bad());
                }
                Ok(vec![input[1]])
            }
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() != input.iter().product::<usize>() {
                    return Err(bad());
                }
                Ok(shape.clone())
            }
        }
    }

    /// Serializes as `kind key=value ...`.
    pub fn to_line(&self) -> String {
        match self {
            LayerSpec::Dense { input, units, activation } => {
                format!("dense input={input} units={units} activation={activation}")
            }
            LayerSpec::Conv2d { in_channels, filters, kernel, padding, activation } => format!(
                "conv2d in_channels={in_channels} filters={filters} kernel={kernel} padding={} activation={activation}",
                padding.as_str()
            ),
            LayerSpec::Conv1d { in_channels, filters, kernel, padding, activation } => format!(
                "conv1d in_channels={in_channels} filters={filters} kernel={kernel} padding={} activation={activation}",
                padding.as_str()
            ),
            LayerSpec::Gru { input, hidden } => format!("gru input={input} hidden={hidden}"),
            LayerSpec::BiGru { input, hidden } => format!("bigru input={input} hidden={hidden}"),
            LayerSpec::Embedding { vocab, dim } => format!("embedding vocab={vocab} dim={dim}"),
            LayerSpec::BatchNorm { features } => format!("batchnorm features={features}"),
            LayerSpec::Upsample2x => "upsample2x".into(),
            LayerSpec::AvgPool2x => "avgpool2x".into(),
            LayerSpec::ResidualBlock { dims, in_channels, filters, kernel, depth, activation } => format!(
                "residual_block dims={} in_channels={in_channels} filters={filters} kernel={kernel} depth={depth} activation={activation}",
                match dims {
                    ConvDims::One => 1,
                    ConvDims::Two => 2,
                }
            ),
            LayerSpec::Activation(a) => format!("activation kind={a}"),
            LayerSpec::MeanOverTime => "mean_over_time".into(),
            LayerSpec::Reshape { shape } => format!(
                "reshape shape={}",
                shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
            ),
            LayerSpec::TimestepDropout { rate } => format!("dropout rate={rate:?}"),
        }
    }

    pub fn parse_line(line: &str) -> Result<LayerSpec> {
        let mut words = line.split_whitespace();
        let kind = words.next().ok_or_else(|| Error::Config("empty layer line".into()))?;
        let mut kv = std::collections::BTreeMap::new();
        for w in words {
            let (k, v) =
                w.split_once('=').ok_or_else(|| Error::Config(format!("expected key=value, got {w:?} in {line:?}")))?;
            kv.insert(k, v);
        }
        let get = |k: &str| -> Result<&str> {
            kv.get(k).copied().ok_or_else(|| Error::Config(format!("{kind} layer missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("{kind}: {k} is not an integer")))
        };
        let act = |k: &str| -> Result<Activation> {
            let v = get(k)?;
            Activation::parse(v).ok_or_else(|| Error::Config(format!("unknown activation {v:?}")))
        };
        let pad = || -> Result<Padding> {
            let v = get("padding")?;
            Padding::parse(v).ok_or_else(|| Error::Config(format!("unknown padding {v:?}")))
        };
        let spec = match kind {
            "dense" => LayerSpec::Dense { input: num("input")?, units: num("units")?, activation: act("activation")? },
            "conv2d" => LayerSpec::Conv2d {
                in_channels: num("in_channels")?,
                filters: num("filters")?,
                kernel: num("kernel")?,
                padding: pad()?,
                activation: act("activation")?,
            },
            "conv1d" => LayerSpec::Conv1d {
                in_channels: num("in_channels")?,
                filters: num("filters")?,
                kernel: num("kernel")?,
                padding: pad()?,
                activation: act("activation")?,
            },
            "gru" => LayerSpec::Gru { input: num("input")?, hidden: num("hidden")? },
            "bigru" => LayerSpec::BiGru { input: num("input")?, hidden: num("hidden")? },
            "embedding" => LayerSpec::Embedding { vocab: num("vocab")?, dim: num("dim")? },
            "batchnorm" => LayerSpec::BatchNorm { features: num("features")? },
            "upsample2x" => LayerSpec::Upsample2x,
            "avgpool2x" => LayerSpec::AvgPool2x,
            "residual_block" => LayerSpec::ResidualBlock {
                dims: match num("dims")? {
                    1 => ConvDims::One,
                    2 => ConvDims::Two,
                    d => return Err(Error::Config(format!("residual dims must be 1 or 2, got {d}"))),
                },
                in_channels: num("in_channels")?,
                filters: num("filters")?,
                kernel: num("kernel")?,
                depth: num("depth")?,
                activation: act("activation")?,
            },
            "activation" => LayerSpec::Activation(act("kind")?),
            "mean_over_time" => LayerSpec::MeanOverTime,
            "reshape" => LayerSpec::Reshape {
                shape: get("shape")?
                    .split('x')
                    .map(|d| d.parse().map_err(|_| Error::Config(format!("bad reshape dim {d:?}"))))
                    .collect::<Result<_>>()?,
            },
            "dropout" => LayerSpec::TimestepDropout {
                rate: get("rate")?.parse().map_err(|_| Error::Config("dropout rate is not a number".into()))?,
            },
            other => return Err(Error::Config(format!("unknown layer kind {other:?}"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

fn conv_out(h: usize, w: usize, k: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        // 1-D convolutions pass h = 1 and only use the width
        Padding::Same => Some((h, w)),
        Padding::Valid => {
            let ho = if h == 1 { 1 } else { h.checked_sub(k)? + 1 };
            Some((ho, w.checked_sub(k)? + 1))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let specs = vec![
            LayerSpec::Dense { input: 4, units: 3, activation: Activation::Relu },
            LayerSpec::Conv2d {
                in_channels: 1,
                filters: 8,
                kernel: 3,
                padding: Padding::Same,
                activation: Activation::Tanh,
            },
            LayerSpec::Conv1d {
                in_channels: 8,
                filters: 4,
                kernel: 1,
                padding: Padding::Valid,
                activation: Activation::Identity,
            },
            LayerSpec::Gru { input: 3, hidden: 5 },
            LayerSpec::BiGru { input: 3, hidden: 5 },
            LayerSpec::Embedding { vocab: 50, dim: 16 },
            LayerSpec::BatchNorm { features: 1 },
            LayerSpec::Upsample2x,
            LayerSpec::AvgPool2x,
            LayerSpec::ResidualBlock {
                dims: ConvDims::Two,
                in_channels: 1,
                filters: 8,
                kernel: 3,
                depth: 4,
                activation: Activation::Tanh,
            },
            LayerSpec::Activation(Activation::Softplus),
            LayerSpec::MeanOverTime,
            LayerSpec::Reshape { shape: vec![1, 8, 8] },
            LayerSpec::TimestepDropout { rate: 0.4 },
        ];
        for s in specs {
            assert_eq!(LayerSpec::parse_line(&s.to_line()).unwrap(), s);
        }
    }

    #[test]
    fn rejects_bad_hyperparams() {
        assert!(LayerSpec::parse_line("dense input=0 units=2 activation=relu").is_err());
        assert!(LayerSpec::parse_line("conv2d in_channels=1 filters=2 kernel=2 padding=same activation=relu").is_err());
        assert!(LayerSpec::parse_line("lstm units=3").is_err());
    }

    #[test]
    fn valid_conv_shrinks() {
        let s = LayerSpec::Conv2d {
            in_channels: 1,
            filters: 2,
            kernel: 3,
            padding: Padding::Valid,
            activation: Activation::Identity,
        };
        assert_eq!(s.output_shape(&[1, 5, 6]).unwrap(), vec![2, 3, 4]);
        let s = LayerSpec::Conv1d {
            in_channels: 2,
            filters: 4,
            kernel: 3,
            padding: Padding::Valid,
            activation: Activation::Identity,
        };
        assert_eq!(s.output_shape(&[7, 2]).unwrap(), vec![5, 4]);
    }
}
