//! Stateless layer forward passes over tape variables.

use crate::autodiff::{concat, stack, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Padding, Tensor};

use super::spec::{Activation, ConvDims};

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Running statistics keep this fraction of their old value per update.
pub const BN_MOMENTUM: f64 = 0.9;

/// `act(x · W + b)` over the last axis of `x`.
pub fn forward_dense<'t>(x: Var<'t>, w: Var<'t>, b: Var<'t>, act: Activation) -> Result<Var<'t>> {
    let shape = x.shape();
    let ws = w.shape();
    if ws.len() != 2 || shape.last() != Some(&ws[0]) {
        return Err(Error::size(format!("dense weights {ws:?} on input {shape:?}")));
    }
    let rows: usize = shape[..shape.len() - 1].iter().product();
    let flat = if shape.len() == 2 { x } else { x.reshape(&[rows, ws[0]])? };
    let y = flat.matmul(w)?.add_bias(b, 1)?;
    let y = if shape.len() == 2 {
        y
    } else {
        let mut out = shape.clone();
        *out.last_mut().unwrap() = ws[1];
        y.reshape(&out)?
    };
    Ok(act.apply(y))
}

pub fn apply_activation(kind: Activation, x: Var<'_>) -> Var<'_> {
    kind.apply(x)
}

/// GRU gate parameters: `w: [d, 3h]`, `u: [h, 3h]`, `b: [3h]`, gate blocks
/// ordered update (z), reset (r), candidate.
#[derive(Clone, Copy, Debug)]
pub struct GruParams<'t> {
    pub w: Var<'t>,
    pub u: Var<'t>,
    pub b: Var<'t>,
}

impl<'t> GruParams<'t> {
    fn hidden(&self) -> usize {
        self.u.shape()[0]
    }
}

/// Runs a GRU over `x: [N, T, d]` (or unbatched `[T, d]`) from `h0`
/// (`[N, h]` or `[h]`) and returns every hidden state, `[N, T, h]`.
///
/// ```text
/// z = σ(W_z x + U_z h + b_z)
/// r = σ(W_r x + U_r h + b_r)
/// c = tanh(W_c x + U_c (r ⊙ h) + b_c)
/// h' = (1 - z) ⊙ h + z ⊙ c
/// ```
pub fn forward_gru<'t>(x: Var<'t>, h0: Var<'t>, p: GruParams<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() == 2 {
        let hs = h0.shape();
        let h0b = if hs.len() == 1 { h0.reshape(&[1, hs[0]])? } else { h0 };
        let out = forward_gru(x.reshape(&[1, shape[0], shape[1]])?, h0b, p)?;
        let os = out.shape();
        return out.reshape(&os[1..]);
    }
    let hid = p.hidden();
    let ws = p.w.shape();
    if shape.len() != 3 || ws != [shape[2], 3 * hid] || p.u.shape() != [hid, 3 * hid] || p.b.shape() != [3 * hid] {
        return Err(Error::size(format!(
            "gru on input {shape:?} with w {ws:?}, u {:?}, b {:?}",
            p.u.shape(),
            p.b.shape()
        )));
    }
    let (n, t_len, d) = (shape[0], shape[1], shape[2]);
    if h0.shape() != [n, hid] {
        return Err(Error::size(format!("gru initial state {:?}, expected [{n}, {hid}]", h0.shape())));
    }
    let xw = x.reshape(&[n * t_len, d])?.matmul(p.w)?.add_bias(p.b, 1)?.reshape(&[n, t_len, 3 * hid])?;
    let u_zr = p.u.narrow(1, 0, 2 * hid)?;
    let u_c = p.u.narrow(1, 2 * hid, hid)?;
    let mut h = h0;
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let xt = xw.select(1, t)?;
        let zr = xt.narrow(1, 0, 2 * hid)?.add(h.matmul(u_zr)?)?.sigmoid();
        let z = zr.narrow(1, 0, hid)?;
        let r = zr.narrow(1, hid, hid)?;
        let c = xt.narrow(1, 2 * hid, hid)?.add(r.mul(h)?.matmul(u_c)?)?.tanh();
        let keep = z.neg().offset(1.0).mul(h)?;
        h = keep.add(z.mul(c)?)?;
        states.push(h);
    }
    stack(&states, 1)
}

/// Bidirectional GRU from zero initial states: forward states concatenated
/// with the re-reversed states of a GRU run over the reversed sequence.
pub fn forward_bigru<'t>(x: Var<'t>, fwd: GruParams<'t>, bwd: GruParams<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let tape = x.tape();
    if shape.len() == 2 {
        let out = forward_bigru(x.reshape(&[1, shape[0], shape[1]])?, fwd, bwd)?;
        let os = out.shape();
        return out.reshape(&os[1..]);
    }
    if shape.len() != 3 {
        return Err(Error::size(format!("bigru input must be [N,T,d], got {shape:?}")));
    }
    let n = shape[0];
    let h0f = tape.constant(Tensor::zeros(&[n, fwd.hidden()]));
    let h0b = tape.constant(Tensor::zeros(&[n, bwd.hidden()]));
    let forward = forward_gru(x, h0f, fwd)?;
    let backward = forward_gru(x.reverse(1)?, h0b, bwd)?.reverse(1)?;
    concat(&[forward, backward], 2)
}

/// Row lookup of `ids` (laid out as `shape`) in `table: [V, D]`.
pub fn forward_embedding<'t>(tape: &'t Tape, ids: &[usize], shape: &[usize], table: Var<'t>) -> Result<Var<'t>> {
    tape.embedding(table, ids, shape)
}

/// Batch normalization over the last axis of `x`.
///
/// `running = None` normalizes by batch statistics (train mode) and returns
/// them as `(mean, biased variance)`; otherwise the given running statistics
/// are used.
pub fn forward_batchnorm<'t>(
    x: Var<'t>,
    gamma: Var<'t>,
    beta: Var<'t>,
    running: Option<(&[f64], &[f64])>,
) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
    x.batchnorm(gamma, beta, running, BN_EPS)
}

/// Running-statistics update after one train-mode batch of `rows` rows.
///
/// `running = 0.9 · running + 0.1 · batch`, with the batch variance
/// Bessel-corrected by `rows / (rows - 1)`.
pub fn update_running_stats(
    running_mean: &mut [f64],
    running_var: &mut [f64],
    batch_mean: &[f64],
    batch_var: &[f64],
    rows: usize,
) {
    let correction = rows as f64 / (rows as f64 - 1.0);
    for c in 0..running_mean.len() {
        running_mean[c] = BN_MOMENTUM * running_mean[c] + (1.0 - BN_MOMENTUM) * batch_mean[c];
        running_var[c] = BN_MOMENTUM * running_var[c] + (1.0 - BN_MOMENTUM) * batch_var[c] * correction;
    }
}

pub fn forward_upsample2x(x: Var<'_>) -> Result<Var<'_>> {
    x.upsample2x()
}

/// Sequence-layout 1-D convolution: `[N, T, C] -> [N, T', F]`.
pub fn forward_conv1d_seq<'t>(
    x: Var<'t>,
    w: Var<'t>,
    b: Var<'t>,
    padding: Padding,
    act: Activation,
) -> Result<Var<'t>> {
    let y = x.swap_last2()?.conv1d(w, padding)?.add_bias(b, 1)?.swap_last2()?;
    Ok(act.apply(y))
}

fn conv_pre<'t>(dims: ConvDims, x: Var<'t>, w: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    match dims {
        ConvDims::Two => x.conv2d(w, Padding::Same)?.add_bias(b, 1),
        ConvDims::One => x.conv1d(w, Padding::Same)?.add_bias(b, 1),
    }
}

/// Residual convolution block on channel-first input (`[N, C, H, W]` or
/// `[N, C, T]`).
///
/// With pre-activations `z_i` of the inner convolutions, layers before the
/// last feed `act(z_i)` forward and the block returns `act(z_1 + z_L)`.
/// A single-layer block therefore yields `act(2 z_1)`.
pub fn forward_residual_block<'t>(
    x: Var<'t>,
    convs: &[(Var<'t>, Var<'t>)],
    dims: ConvDims,
    act: Activation,
) -> Result<Var<'t>> {
    let (first, rest) = convs.split_first().ok_or_else(|| Error::Config("residual block without layers".into()))?;
    let z_first = conv_pre(dims, x, first.0, first.1)?;
    let mut z_last = z_first;
    let mut h = act.apply(z_first);
    for (w, b) in rest {
        let z = conv_pre(dims, h, *w, *b)?;
        if z.shape() != z_first.shape() {
            return Err(Error::size(format!("residual block shape drift: {:?} vs {:?}", z.shape(), z_first.shape())));
        }
        z_last = z;
        h = act.apply(z);
    }
    Ok(act.apply(z_first.add(z_last)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::testutil::rand_tensor;

    #[test]
    fn dense_identity_and_zero_input() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.5, 4.0]).unwrap());
        let eye = tape.constant(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let zero_b = tape.constant(Tensor::zeros(&[2]));
        let y = forward_dense(x, eye, zero_b, Activation::Identity).unwrap();
        assert_eq!(y.value().data(), x.value().data());

        let z = tape.constant(Tensor::zeros(&[3, 2]));
        let w = tape.constant(rand_tensor(&[2, 4], 1));
        let c = tape.constant(Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = forward_dense(z, w, c, Activation::Identity).unwrap();
        assert_eq!(y.value().data(), &[1., 2., 3., 4., 1., 2., 3., 4., 1., 2., 3., 4.]);
    }

    #[test]
    fn dense_matches_loop_oracle() {
        let tape = Tape::new();
        let xv = rand_tensor(&[3, 4], 2);
        let wv = rand_tensor(&[4, 5], 3);
        let bv = rand_tensor(&[5], 4);
        let y = forward_dense(
            tape.constant(xv.clone()),
            tape.constant(wv.clone()),
            tape.constant(bv.clone()),
            Activation::Tanh,
        )
        .unwrap()
        .value();
        for i in 0..3 {
            for j in 0..5 {
                let mut s = bv.data()[j];
                for k in 0..4 {
                    s += xv.data()[i * 4 + k] * wv.data()[k * 5 + j];
                }
                let want = s.tanh();
                let got = y.data()[i * 5 + j];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn activation_values() {
        let tape = Tape::new();
        let v = |a: Activation, x: f64| a.apply(tape.constant(Tensor::scalar(x))).value().item();
        assert_eq!(v(Activation::Sigmoid, 0.0), 0.5);
        assert!((v(Activation::Softplus, 0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(v(Activation::Relu, -3.0), 0.0);
        assert_eq!(v(Activation::Tanh, 0.0), 0.0);
        assert!((v(Activation::Selu, 1.0) - 1.050_700_987_355_480_5).abs() < 1e-15);
        assert!(
            (v(Activation::Selu, -1.0) - 1.050_700_987_355_480_5 * 1.673_263_242_354_377_2 * ((-1.0f64).exp() - 1.0))
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn gru_zero_weights_fixed_point() {
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[2, 5, 3], 9));
        let p = GruParams {
            w: tape.constant(Tensor::zeros(&[3, 12])),
            u: tape.constant(Tensor::zeros(&[4, 12])),
            b: tape.constant(Tensor::zeros(&[12])),
        };
        let h0 = tape.constant(Tensor::zeros(&[2, 4]));
        let out = forward_gru(x, h0, p).unwrap();
        assert_eq!(out.shape(), vec![2, 5, 4]);
        assert!(out.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gru_single_step_matches_cell_oracle() {
        let (d, h) = (3, 2);
        let xv = rand_tensor(&[1, d], 11);
        let h0v = rand_tensor(&[h], 12);
        let wv = rand_tensor(&[d, 3 * h], 13);
        let uv = rand_tensor(&[h, 3 * h], 14);
        let bv = rand_tensor(&[3 * h], 15);
        let tape = Tape::new();
        let p = GruParams { w: tape.constant(wv.clone()), u: tape.constant(uv.clone()), b: tape.constant(bv.clone()) };
        let out = forward_gru(tape.constant(xv.clone()), tape.constant(h0v.clone()), p).unwrap().value();

        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let gate = |g: usize, j: usize, hvec: &[f64]| {
            let mut s = bv.data()[g * h + j];
            for k in 0..d {
                s += xv.data()[k] * wv.data()[k * 3 * h + g * h + j];
            }
            for k in 0..h {
                s += hvec[k] * uv.data()[k * 3 * h + g * h + j];
            }
            s
        };
        let h_prev = h0v.data();
        let z: Vec<f64> = (0..h).map(|j| sig(gate(0, j, h_prev))).collect();
        let r: Vec<f64> = (0..h).map(|j| sig(gate(1, j, h_prev))).collect();
        let rh: Vec<f64> = (0..h).map(|j| r[j] * h_prev[j]).collect();
        let c: Vec<f64> = (0..h).map(|j| gate(2, j, &rh).tanh()).collect();
        for j in 0..h {
            let want = (1.0 - z[j]) * h_prev[j] + z[j] * c[j];
            assert!((out.data()[j] - want).abs() < 1e-12, "{} vs {want}", out.data()[j]);
        }
    }

    #[test]
    fn residual_degenerate_cases() {
        let tape = Tape::new();
        let x = tape.constant(rand_tensor(&[1, 2, 4, 4], 21));
        let zw = tape.constant(Tensor::zeros(&[3, 2, 3, 3]));
        let zb = tape.constant(Tensor::zeros(&[3]));
        let y = forward_residual_block(x, &[(zw, zb)], ConvDims::Two, Activation::Tanh).unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));

        let w = tape.constant(rand_tensor(&[3, 2, 3, 3], 22));
        let b = tape.constant(rand_tensor(&[3], 23));
        let y = forward_residual_block(x, &[(w, b)], ConvDims::Two, Activation::Tanh).unwrap();
        let z = x.conv2d(w, Padding::Same).unwrap().add_bias(b, 1).unwrap();
        let want = z.scale(2.0).tanh();
        assert_eq!(y.value().data(), want.value().data());
    }

    #[test]
    fn running_stats_hand_formula() {
        let mut rm = vec![0.0, 1.0];
        let mut rv = vec![1.0, 1.0];
        // batch rows [1,2],[3,6]: mean [2,4], biased var [1,4]
        update_running_stats(&mut rm, &mut rv, &[2.0, 4.0], &[1.0, 4.0], 2);
        assert!((rm[0] - 0.2).abs() < 1e-15);
        assert!((rm[1] - 1.3).abs() < 1e-15);
        assert!((rv[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
        assert!((rv[1] - (0.9 + 0.1 * 8.0)).abs() < 1e-15);
    }
}
