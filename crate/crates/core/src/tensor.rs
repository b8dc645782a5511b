//! Dense row-major `f64` tensors and the raw numeric kernels the tape
//! builds on.

use std::fmt;

use crate::error::{Error, Result};

/// Initial contents for [`Tensor::new`].
#[derive(Clone, Copy, Debug)]
pub enum Fill<'a> {
    Scalar(f64),
    Buffer(&'a [f64]),
}

/// A dense n-dimensional array of `f64` stored row-major.
///
/// Every dimension is at least 1 and `data.len()` always equals the product
/// of the shape.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor").field("shape", &self.shape).field("data", &self.data).finish()
    }
}

pub(crate) fn check_shape(shape: &[usize]) -> Result<usize> {
    if shape.contains(&0) {
        return Err(Error::size(format!("shape {shape:?} has a zero dimension")));
    }
    Ok(shape.iter().product())
}

impl Tensor {
    pub fn new(shape: &[usize], fill: Fill<'_>) -> Result<Self> {
        let n = check_shape(shape)?;
        let data = match fill {
            Fill::Scalar(v) => vec![v; n],
            Fill::Buffer(buf) => {
                if buf.len() != n {
                    return Err(Error::size(format!(
                        "buffer of length {} does not fill shape {shape:?} ({n} elements)",
                        buf.len()
                    )));
                }
                buf.to_vec()
            }
        };
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n = check_shape(shape)?;
        if data.len() != n {
            return Err(Error::size(format!(
                "buffer of length {} does not fill shape {shape:?} ({n} elements)",
                data.len()
            )));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    /// Panics on a zero dimension; use [`Tensor::new`] for checked construction.
    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::new(shape, Fill::Scalar(value)).expect("invalid shape")
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n = check_shape(shape)?;
        if n != self.data.len() {
            return Err(Error::size(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        Ok(Tensor { shape: shape.to_vec(), data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Rows `start..start + count` along the leading axis.
    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Tensor> {
        let rows = self.shape[0];
        if count == 0 || start + count > rows {
            return Err(Error::Index(format!(
                "rows {start}..{} out of range for leading dimension {rows}",
                start + count
            )));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut shape = self.shape.clone();
        shape[0] = count;
        Ok(Tensor { shape, data: self.data[start * inner..(start + count) * inner].to_vec() })
    }

    /// Gathers rows along the leading axis in the given order.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(Error::Index("empty row selection".into()));
        }
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            if r >= self.shape[0] {
                return Err(Error::Index(format!("row {r} out of range {}", self.shape[0])));
            }
            data.extend_from_slice(&self.data[r * inner..(r + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// FNV-1a digest of the shape and the raw value bits.
    pub fn checksum(&self) -> u64 {
        let mut h = fnv_start();
        for &d in &self.shape {
            h = fnv_feed(h, &(d as u64).to_le_bytes());
        }
        for v in &self.data {
            h = fnv_feed(h, &v.to_bits().to_le_bytes());
        }
        h
    }
}

pub(crate) fn fnv_start() -> u64 {
    0xcbf2_9ce4_8422_2325
}

pub(crate) fn fnv_feed(mut h: u64, bytes: &[u8]) -> u64 {
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `(outer, dim, inner)` decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ---------------------------------------------------------------------------
// GEMM kernels. Row-major, accumulate into `c`.

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ * b[k,n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

// ---------------------------------------------------------------------------
// Convolution (cross-correlation, no kernel flip).

/// Zero padding policy for convolutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Zero-pad so the spatial size is preserved. Requires odd kernels.
    Same,
    /// No padding; output shrinks by `kernel - 1`.
    Valid,
}

impl Padding {
    pub fn as_str(self) -> &'static str {
        match self {
            Padding::Same => "same",
            Padding::Valid => "valid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "same" => Some(Padding::Same),
            "valid" => Some(Padding::Valid),
            _ => None,
        }
    }
}

/// Geometry of one 2-D convolution over a batch.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(x: &[usize], k: &[usize], padding: Padding) -> Result<Self> {
        if x.len() != 4 || k.len() != 4 {
            return Err(Error::size(format!(
                "conv2d expects [N,C,H,W] input and [O,C,kh,kw] kernels, got {x:?} and {k:?}"
            )));
        }
        let (batch, c_in, h, w) = (x[0], x[1], x[2], x[3]);
        let (c_out, kc, kh, kw) = (k[0], k[1], k[2], k[3]);
        if kc != c_in {
            return Err(Error::size(format!("kernel expects {kc} input channels, input has {c_in}")));
        }
        let (pad_h, pad_w) = match padding {
            Padding::Same => {
                if kh % 2 == 0 || kw % 2 == 0 {
                    return Err(Error::size(format!("same padding needs odd kernel, got {kh}x{kw}")));
                }
                (kh / 2, kw / 2)
            }
            Padding::Valid => (0, 0),
        };
        if kh > h + 2 * pad_h || kw > w + 2 * pad_w {
            return Err(Error::size(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * pad_h,
                w + 2 * pad_w
            )));
        }
        let ho = h + 2 * pad_h - kh + 1;
        let wo = w + 2 * pad_w - kw + 1;
        Ok(ConvGeom { batch, c_in, h, w, c_out, kh, kw, pad_h, pad_w, ho, wo })
    }

    fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }

    /// Unrolls one example into `[C*kh*kw, ho*wo]` columns.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let hw_out = self.plane_out();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad_h as isize;
                        for oj in 0..self.wo {
                            let jj = (oj + kj) as isize - self.pad_w as isize;
                            dst[oi * self.wo + oj] =
                                if ii >= 0 && jj >= 0 && (ii as usize) < self.h && (jj as usize) < self.w {
                                    x[(c * self.h + ii as usize) * self.w + jj as usize]
                                } else {
                                    0.0
                                };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let hw_out = self.plane_out();
        for c in 0..self.c_in {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * hw_out..(row + 1) * hw_out];
                    for oi in 0..self.ho {
                        let ii = (oi + ki) as isize - self.pad_h as isize;
                        if ii < 0 || ii as usize >= self.h {
                            continue;
                        }
                        for oj in 0..self.wo {
                            let jj = (oj + kj) as isize - self.pad_w as isize;
                            if jj < 0 || jj as usize >= self.w {
                                continue;
                            }
                            dx[(c * self.h + ii as usize) * self.w + jj as usize] += src[oi * self.wo + oj];
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], k: &[f64]) -> Vec<f64> {
        let in_sz = self.c_in * self.h * self.w;
        let out_sz = self.c_out * self.plane_out();
        let mut out = vec![0.0; self.batch * out_sz];
        let mut cols = vec![0.0; self.patch() * self.plane_out()];
        for b in 0..self.batch {
            self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm_nn(self.c_out, self.patch(), self.plane_out(), k, &cols, &mut out[b * out_sz..(b + 1) * out_sz]);
        }
        out
    }

    /// Accumulates input and kernel gradients for upstream gradient `g`.
    pub fn backward(&self, x: &[f64], k: &[f64], g: &[f64], mut dx: Option<&mut [f64]>, mut dk: Option<&mut [f64]>) {
        let in_sz = self.c_in * self.h * self.w;
        let out_sz = self.c_out * self.plane_out();
        let mut cols = vec![0.0; self.patch() * self.plane_out()];
        for b in 0..self.batch {
            let gb = &g[b * out_sz..(b + 1) * out_sz];
            if let Some(dk) = dk.as_deref_mut() {
                self.im2col(&x[b * in_sz..(b + 1) * in_sz], &mut cols);
                gemm_nt(self.c_out, self.plane_out(), self.patch(), gb, &cols, dk);
            }
            if let Some(dx) = dx.as_deref_mut() {
                cols.iter_mut().for_each(|v| *v = 0.0);
                gemm_tn(self.patch(), self.c_out, self.plane_out(), k, gb, &mut cols);
                self.col2im(&cols, &mut dx[b * in_sz..(b + 1) * in_sz]);
            }
        }
    }
}

/// Maps every flat index of `shape` to its flat index after removing `axes`.
/// Returns the reduced shape (a `[1]` shape when every axis is removed).
pub(crate) fn reduction_map(shape: &[usize], axes: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut seen = vec![false; shape.len()];
    for &a in axes {
        if a >= shape.len() {
            return Err(Error::Axis(format!("axis {a} out of range for rank {}", shape.len())));
        }
        if seen[a] {
            return Err(Error::Axis(format!("axis {a} listed twice")));
        }
        seen[a] = true;
    }
    let mut out_shape: Vec<usize> = shape.iter().enumerate().filter(|(i, _)| !seen[*i]).map(|(_, &d)| d).collect();
    // output strides in terms of the kept axes
    let mut out_stride = vec![0usize; shape.len()];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        if !seen[i] {
            out_stride[i] = s;
            s *= shape[i];
        }
    }
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut cur = 0usize;
    for _ in 0..n {
        map.push(cur);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            cur += out_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            cur -= out_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    if out_shape.is_empty() {
        out_shape.push(1);
    }
    Ok((out_shape, map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_fills() {
        let t = Tensor::new(&[2, 2], Fill::Scalar(0.0)).unwrap();
        assert_eq!(t.data(), &[0.0; 4]);
        let t = Tensor::new(&[3], Fill::Buffer(&[1.0, 2.0, 3.0])).unwrap();
        assert_eq!(t.data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn new_rejects_mismatch_and_zero_dims() {
        assert!(matches!(Tensor::new(&[2], Fill::Buffer(&[1.0, 2.0, 3.0])), Err(Error::Size(_))));
        assert!(matches!(Tensor::new(&[2, 0], Fill::Scalar(1.0)), Err(Error::Size(_))));
    }

    #[test]
    fn reduction_map_middle_axis() {
        let (shape, map) = reduction_map(&[2, 3, 2], &[1]).unwrap();
        assert_eq!(shape, vec![2, 2]);
        assert_eq!(map, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
        let (shape, map) = reduction_map(&[2, 2], &[0, 1]).unwrap();
        assert_eq!(shape, vec![1]);
        assert_eq!(map, vec![0; 4]);
        assert!(matches!(reduction_map(&[2, 2], &[2]), Err(Error::Axis(_))));
        assert!(matches!(reduction_map(&[2, 2], &[0, 0]), Err(Error::Axis(_))));
    }

    #[test]
    fn gemm_variants_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = [0.0; 4];
        gemm_nn(2, 3, 2, &a, &b, &mut c);
        assert_eq!(c, [58.0, 64.0, 139.0, 154.0]);
        // aᵀ stored as 3x2
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        gemm_tn(2, 3, 2, &at, &b, &mut c2);
        assert_eq!(c, c2);
        // bᵀ stored as 2x3
        let bt = [7.0, 9.0, 11.0, 8.0, 10.0, 12.0];
        let mut c3 = [0.0; 4];
        gemm_nt(2, 3, 2, &a, &bt, &mut c3);
        assert_eq!(c, c3);
    }

    #[test]
    fn conv_rejects_oversized_kernel() {
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], Padding::Valid).is_err());
        assert!(ConvGeom::new(&[1, 1, 2, 2], &[1, 1, 3, 3], Padding::Same).is_ok());
        assert!(ConvGeom::new(&[1, 1, 4, 4], &[1, 1, 2, 2], Padding::Same).is_err());
    }
}
