//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Activation, Batch, Binding, ConvDims, Feed, LayerSpec, Mode, ModelGraph, TokenBatch};
use crate::objectives::{
    cross_entropy_loss, entropy_penalty, l1_penalty, l2_penalty, mse_loss, total_objective, EntropyKind,
    RegularizerConfig,
};
use crate::tensor::{Padding, Tensor};

/// Compares tape gradients of `f` at `x` with central differences of step `h`.
///
/// Returns the maximum over coordinates of
/// `|analytic - numeric| / max(1, |analytic|)`. A NaN anywhere makes the
/// result NaN.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'t> Fn(Var<'t>) -> Result<Var<'t>>,
{
    check_gradients(|_, vars| f(vars[0]), std::slice::from_ref(x), h)
}

/// Multi-input form of [`finite_diff_check`]: every input is a
/// differentiable leaf, and the error is maximised over all of them.
pub fn check_gradients<F>(f: F, inputs: &[Tensor], h: f64) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |vals: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = vals.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = f(&tape, &vars)?;
        scalar_of(out)
    };

    let tape = Tape::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    scalar_of(out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).unwrap_or_else(|| Tensor::zeros(inputs[k].shape()));
        for i in 0..inputs[k].len() {
            let orig = inputs[k].data()[i];
            let (hi, lo) = (orig + h, orig - h);
            work[k].data_mut()[i] = hi;
            let plus = eval(&work)?;
            work[k].data_mut()[i] = lo;
            let minus = eval(&work)?;
            work[k].data_mut()[i] = orig;
            // divide by the step actually taken after rounding
            let numeric = (plus - minus) / (hi - lo);
            let a = analytic.data()[i];
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err.is_nan() {
                return Ok(f64::NAN);
            }
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(v: Var<'_>) -> Result<f64> {
    let val = v.value();
    if val.len() != 1 {
        return Err(Error::Shape(format!("gradient check needs a scalar output, got {:?}", val.shape())));
    }
    Ok(val.item())
}

/// Uniform values in `[lo, hi)` from `seed`.
pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("valid shape")
}

fn weighted_sum<'t>(out: Var<'t>, seed: u64) -> Result<Var<'t>> {
    let r = random_tensor(&out.shape(), -1.0, 1.0, seed);
    Ok(out.mul(out.tape().constant(r))?.sum_all())
}

/// Gradient error of a whole model, in its current mode, with respect to
/// every trainable parameter and (for value inputs) the input. The output is
/// reduced to a scalar by a fixed random weighting.
pub fn model_gradient_error(model: &ModelGraph, input: &Batch, h: f64, seed: u64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |m: &ModelGraph, x: &Batch| -> Result<f64> {
        let mut m = m.clone();
        let tape = Tape::new();
        let out = m.forward(&tape, x.feed(&tape), &mut Binding::new())?;
        Ok(weighted_sum(out, seed)?.value().item())
    };

    let mut analytic = model.clone();
    analytic.zero_grads();
    let tape = Tape::new();
    let mut binding = Binding::new();
    let x_leaf = match input {
        Batch::Values(t) => Some(tape.leaf(t.clone(), true)),
        Batch::Tokens(_) => None,
    };
    let feed = match (x_leaf, input) {
        (Some(v), _) => Feed::Values(v),
        (None, Batch::Tokens(t)) => Feed::Tokens(t),
        (None, Batch::Values(_)) => unreachable!(),
    };
    let out = analytic.forward(&tape, feed, &mut binding)?;
    let loss = weighted_sum(out, seed)?;
    let grads = tape.backward(loss)?;
    analytic.accumulate_grads(&binding, &grads);

    let mut worst = 0.0f64;
    let mut record = |a: f64, plus: f64, minus: f64, step: f64| -> bool {
        let err = (a - (plus - minus) / step).abs() / a.abs().max(1.0);
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
        err.is_nan()
    };

    let mut work = model.clone();
    for l in 0..model.len() {
        for p in 0..model.layers()[l].params.len() {
            let param = &analytic.layers()[l].params[p];
            if !param.trainable {
                continue;
            }
            let zeros = Tensor::zeros(param.value.shape());
            let g = param.grad.as_ref().unwrap_or(&zeros).data().to_vec();
            for (i, &a) in g.iter().enumerate() {
                let orig = model.layers()[l].params[p].value.data()[i];
                let (hi, lo) = (orig + h, orig - h);
                work.layers_mut()[l].params[p].value.data_mut()[i] = hi;
                let plus = eval(&work, input)?;
                work.layers_mut()[l].params[p].value.data_mut()[i] = lo;
                let minus = eval(&work, input)?;
                work.layers_mut()[l].params[p].value.data_mut()[i] = orig;
                if record(a, plus, minus, hi - lo) {
                    return Ok(f64::NAN);
                }
            }
        }
    }
    if let (Some(v), Batch::Values(x)) = (x_leaf, input) {
        let g = grads.get(v).unwrap_or_else(|| Tensor::zeros(x.shape()));
        let mut xw = x.clone();
        for i in 0..x.len() {
            let orig = x.data()[i];
            let (hi, lo) = (orig + h, orig - h);
            xw.data_mut()[i] = hi;
            let plus = eval(model, &Batch::Values(xw.clone()))?;
            xw.data_mut()[i] = lo;
            let minus = eval(model, &Batch::Values(xw.clone()))?;
            xw.data_mut()[i] = orig;
            if record(g.data()[i], plus, minus, hi - lo) {
                return Ok(f64::NAN);
            }
        }
    }
    Ok(worst)
}

/// Worst error of one suite entry over its instances.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub instances: usize,
    pub worst: f64,
}

impl CheckResult {
    /// NaN never passes.
    pub fn passed(&self, tol: f64) -> bool {
        self.worst < tol
    }
}

struct LayerCase {
    name: &'static str,
    layers: Vec<LayerSpec>,
    /// Per-example input shape; `None` means token ids of this length.
    input: Option<Vec<usize>>,
    tokens: Option<(usize, usize)>,
    batch: usize,
    mode: Mode,
}

fn dense(act: Activation) -> Vec<LayerSpec> {
    vec![LayerSpec::Dense { input: 4, units: 3, activation: act }]
}

fn layer_cases() -> Vec<LayerCase> {
    let vals = |name, layers, shape: &[usize]| LayerCase {
        name,
        layers,
        input: Some(shape.to_vec()),
        tokens: None,
        batch: 3,
        mode: Mode::Train,
    };
    let conv2d = |padding, activation| LayerSpec::Conv2d { in_channels: 2, filters: 2, kernel: 3, padding, activation };
    let conv1d = |padding, activation| LayerSpec::Conv1d { in_channels: 2, filters: 3, kernel: 3, padding, activation };
    let mut bn_infer = vals("batchnorm_infer", vec![LayerSpec::BatchNorm { features: 3 }], &[3]);
    bn_infer.mode = Mode::Infer;
    vec![
        vals("dense_identity", dense(Activation::Identity), &[4]),
        vals("dense_tanh", dense(Activation::Tanh), &[4]),
        vals("dense_relu", dense(Activation::Relu), &[4]),
        vals("dense_selu", dense(Activation::Selu), &[4]),
        vals("dense_sigmoid", dense(Activation::Sigmoid), &[4]),
        vals("dense_softplus", dense(Activation::Softplus), &[4]),
        vals("conv2d_same", vec![conv2d(Padding::Same, Activation::Tanh)], &[2, 4, 4]),
        vals("conv2d_valid", vec![conv2d(Padding::Valid, Activation::Relu)], &[2, 4, 4]),
        vals("conv1d_same", vec![conv1d(Padding::Same, Activation::Selu)], &[5, 2]),
        vals("conv1d_valid", vec![conv1d(Padding::Valid, Activation::Identity)], &[5, 2]),
        vals("gru", vec![LayerSpec::Gru { input: 3, hidden: 2 }], &[4, 3]),
        vals("bigru", vec![LayerSpec::BiGru { input: 3, hidden: 2 }], &[4, 3]),
        LayerCase {
            name: "embedding",
            layers: vec![LayerSpec::Embedding { vocab: 6, dim: 3 }, LayerSpec::MeanOverTime],
            input: None,
            tokens: Some((6, 4)),
            batch: 3,
            mode: Mode::Train,
        },
        vals("batchnorm_train", vec![LayerSpec::BatchNorm { features: 3 }], &[3]),
        bn_infer,
        vals(
            "residual2d_tanh",
            vec![LayerSpec::ResidualBlock {
                dims: ConvDims::Two,
                in_channels: 1,
                filters: 2,
                kernel: 3,
                depth: 3,
                activation: Activation::Tanh,
            }],
            &[1, 4, 4],
        ),
        vals(
            "residual1d_selu",
            vec![LayerSpec::ResidualBlock {
                dims: ConvDims::One,
                in_channels: 2,
                filters: 2,
                kernel: 3,
                depth: 4,
                activation: Activation::Selu,
            }],
            &[5, 2],
        ),
        vals("upsample2x", vec![LayerSpec::Upsample2x], &[2, 2, 3]),
        vals("avgpool2x", vec![LayerSpec::AvgPool2x], &[2, 4, 4]),
        vals("mean_over_time", vec![LayerSpec::MeanOverTime], &[4, 3]),
        vals("reshape", vec![LayerSpec::Reshape { shape: vec![12] }, LayerSpec::Activation(Activation::Tanh)], &[4, 3]),
        vals("dropout", vec![LayerSpec::TimestepDropout { rate: 0.3 }], &[6, 2]),
    ]
}

type LossFn = for<'t> fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>;

struct LossCase {
    name: &'static str,
    shapes: Vec<Vec<usize>>,
    range: (f64, f64),
    f: LossFn,
}

const LABELS: [usize; 4] = [2, 0, 1, 2];

fn loss_cases() -> Vec<LossCase> {
    let case = |name, shapes: &[&[usize]], range, f: LossFn| LossCase {
        name,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
        range,
        f,
    };
    vec![
        case("cross_entropy", &[&[4, 3]], (-2.0, 2.0), |_, v| cross_entropy_loss(v[0], &LABELS)),
        case("mse", &[&[5], &[5]], (-2.0, 2.0), |_, v| mse_loss(v[0], v[1])),
        case("l1", &[&[3, 4]], (0.05, 1.0), |_, v| l1_penalty(v[0], 0.7)),
        case("l2", &[&[3, 4]], (-1.0, 1.0), |_, v| l2_penalty(v[0], 0.7)),
        case("entropy_distribution", &[&[3, 4]], (0.05, 1.0), |_, v| {
            entropy_penalty(v[0], 0.7, EntropyKind::Distribution)
        }),
        case("entropy_bernoulli", &[&[3, 4]], (0.05, 0.95), |_, v| entropy_penalty(v[0], 0.7, EntropyKind::Bernoulli)),
        case("max_reduce", &[&[3, 4]], (-1.0, 1.0), |_, v| Ok(v[0].max(&[1])?.square().sum_all())),
        case("total_objective", &[&[4, 3], &[4, 5]], (0.05, 1.0), |_, v| {
            let task = cross_entropy_loss(v[0], &LABELS)?;
            let reg = RegularizerConfig { l1: 0.1, l2: 0.2, entropy: 0.3, entropy_kind: EntropyKind::Distribution };
            Ok(total_objective(task, v[1], &reg)?.total)
        }),
    ]
}

/// Checks every layer kind and every loss and regularizer on `instances`
/// random instances each.
pub fn gradient_suite(instances: usize, h: f64, seed: u64) -> Result<Vec<CheckResult>> {
    let mut results = Vec::new();
    for (ci, case) in layer_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let s = seed ^ ((ci as u64) << 32) ^ inst as u64;
            let mut model = ModelGraph::new(case.layers.clone(), s)?;
            // nonzero biases and shifted norm parameters exercise every path
            for p in model.params_mut() {
                if !p.buffer {
                    p.value = random_tensor(p.value.shape(), -1.0, 1.0, s.wrapping_add(p.value.len() as u64 * 7919));
                } else if p.name == "running_var" {
                    p.value = random_tensor(p.value.shape(), 0.5, 1.5, s ^ 0xbeef);
                } else {
                    p.value = random_tensor(p.value.shape(), -0.5, 0.5, s ^ 0xcafe);
                }
            }
            model.set_mode(case.mode);
            let input = match (&case.input, case.tokens) {
                (Some(shape), _) => {
                    let mut full = vec![case.batch];
                    full.extend(shape);
                    Batch::Values(random_tensor(&full, -1.0, 1.0, s ^ 0x1234))
                }
                (None, Some((vocab, len))) => {
                    let mut rng = ChaCha8Rng::seed_from_u64(s);
                    let ids = (0..case.batch * len).map(|_| rng.random_range(0..vocab)).collect();
                    Batch::Tokens(TokenBatch::new(ids, case.batch, len)?)
                }
                (None, None) => return Err(Error::Config(format!("case {} has no input", case.name))),
            };
            let err = model_gradient_error(&model, &input, h, s)?;
            worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
        }
        results.push(CheckResult { name: case.name.to_string(), instances, worst });
    }
    for (ci, case) in loss_cases().into_iter().enumerate() {
        let mut worst = 0.0f64;
        for inst in 0..instances {
            let s = seed ^ ((ci as u64 + 1000) << 32) ^ inst as u64;
            let inputs: Vec<Tensor> = case
                .shapes
                .iter()
                .enumerate()
                .map(|(k, sh)| random_tensor(sh, case.range.0, case.range.1, s.wrapping_add(k as u64)))
                .collect();
            let err = check_gradients(case.f, &inputs, h)?;
            worst = if err.is_nan() || worst.is_nan() { f64::NAN } else { worst.max(err) };
        }
        results.push(CheckResult { name: case.name.to_string(), instances, worst });
    }
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_is_exact_up_to_rounding() {
        let x = Tensor::from_vec(&[3], vec![0.3, -1.2, 7.0]).unwrap();
        let err = finite_diff_check(|v| Ok(v.sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
        let x = Tensor::from_vec(&[2], vec![0.0, 0.0]).unwrap();
        let err = finite_diff_check(|v| Ok(v.sum_all()), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn quadratic_matches() {
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(|v| Ok(v.square().sum_all()), &x, 1e-5).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn nan_propagates() {
        let x = Tensor::from_vec(&[1], vec![-1.0]).unwrap();
        let err = finite_diff_check(|v| Ok(v.unary(crate::autodiff::Unary::Sqrt)), &x, 1e-5).unwrap();
        assert!(err.is_nan());
    }

    #[test]
    fn detects_wrong_gradient() {
        // abs at a kink: analytic 0, numeric 0, fine; a shifted kink is not
        let x = Tensor::from_vec(&[1], vec![1e-7]).unwrap();
        let err = finite_diff_check(|v| Ok(v.abs().sum_all()), &x, 1e-5).unwrap();
        assert!(err > 0.5);
    }

    #[test]
    fn suite_runs_small() {
        let res = gradient_suite(2, 1e-5, 3).unwrap();
        for r in &res {
            assert!(r.passed(1e-4), "{} {}", r.name, r.worst);
        }
    }
}
