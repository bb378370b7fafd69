//! Dense row-major tensors and the numeric primitives the rest of the crate
//! composes: matrix products, softmax, axis-wise depthwise convolution,
//! pooling, layer normalization, strided patch convolution and a few
//! elementwise activations.
//!
//! Every kernel accumulates sequentially in row-major order, so identical
//! inputs give bit-identical outputs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Default layer-norm epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel(shape) != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} holds {} elements but {} were given",
                numel(shape),
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::from_f64(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(
            shape.iter().all(|&d| d > 0),
            "tensor extents must be positive, got {shape:?}"
        );
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    /// Entries drawn uniformly from `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for v in &mut t.data {
            *v = T::from_f64(if hi > lo { rng.gen_range(lo..hi) } else { lo });
        }
        t
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

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() || shape.contains(&0) {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    /// Elementwise sum; shapes must agree exactly.
    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape(self, other, "add")?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        same_shape(self, other, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.to_f64() - b.to_f64()).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_rank(&self, rank: usize, what: &str) -> Result<()> {
        if self.rank() != rank {
            return Err(Error::Dimension(format!(
                "{what} expects a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

pub(crate) fn same_shape<T>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Dimension(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

pub(crate) fn ensure_finite<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    if let Some(i) = t.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!(
            "{what} produced a non-finite value at flat index {i}"
        )));
    }
    Ok(())
}

/// `[m,k] × [k,n] → [m,n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Dimension(format!(
            "matmul: cannot multiply {:?} by {:?}",
            a.shape, b.shape
        )));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![T::zero(); m * n];
    matmul_into(&a.data, &b.data, &mut out, m, k, n);
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

/// Row-major `out[m,n] += a[m,k] · b[k,n]`, accumulating over k in order.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ · b[k,n]`.
pub(crate) fn matmul_tn_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            for (o, &bv) in out[i * n..(i + 1) * n].iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] · b[n,k]ᵀ`.
pub(crate) fn matmul_nt_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    a.expect_rank(2, "transpose")?;
    let (m, n) = (a.shape[0], a.shape[1]);
    let mut out = Vec::with_capacity(m * n);
    for j in 0..n {
        for i in 0..m {
            out.push(a.data[i * n + j]);
        }
    }
    Ok(Tensor {
        shape: vec![n, m],
        data: out,
    })
}

/// Numerically stable softmax of a rank-1 tensor.
pub fn softmax<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    if v.rank() != 1 {
        return Err(Error::Dimension(format!(
            "softmax expects a vector, got shape {:?}",
            v.shape
        )));
    }
    if let Some(i) = v.data.iter().position(|x| !x.is_finite()) {
        return Err(Error::Numerical(format!("softmax input {i} is not finite")));
    }
    let data = softmax_slice(&v.data);
    Ok(Tensor {
        shape: v.shape.clone(),
        data,
    })
}

pub(crate) fn softmax_slice<T: Scalar>(v: &[T]) -> Vec<T> {
    let max = v.iter().copied().fold(v[0], T::max);
    let exps: Vec<T> = v.iter().map(|&x| (x - max).exp()).collect();
    let mut sum = T::zero();
    for &e in &exps {
        sum += e;
    }
    let inv = T::one() / sum;
    exps.into_iter().map(|e| e * inv).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Convolve along the width (within a row).
    Horizontal,
    /// Convolve along the height (within a column).
    Vertical,
}

/// One odd-length 1-D kernel per channel, zero padded so the output keeps
/// the input shape. Out-of-range taps multiply an explicit zero, so every
/// output costs exactly `k` multiplies.
pub fn depthwise_conv_axis<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    axis: Axis,
) -> Result<Tensor<T>> {
    x.expect_rank(4, "depthwise_conv_axis input")?;
    kernels.expect_rank(2, "depthwise_conv_axis kernels")?;
    let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let k = kernels.shape[1];
    if k % 2 == 0 {
        return Err(Error::Config(format!(
            "depthwise kernel length must be odd, got {k}"
        )));
    }
    if kernels.shape[0] != c {
        return Err(Error::Dimension(format!(
            "depthwise kernels {:?} do not match {c} input channels",
            kernels.shape
        )));
    }
    let half = (k / 2) as isize;
    let mut out = vec![T::zero(); x.len()];
    let plane = h * w;
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            let kern = &kernels.data[ci * k..(ci + 1) * k];
            let src = &x.data[base..base + plane];
            let dst = &mut out[base..base + plane];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = T::zero();
                    for (t, &kv) in kern.iter().enumerate() {
                        let off = t as isize - half;
                        let (ii, jj) = match axis {
                            Axis::Horizontal => (i as isize, j as isize + off),
                            Axis::Vertical => (i as isize + off, j as isize),
                        };
                        let v = if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                            src[ii as usize * w + jj as usize]
                        } else {
                            T::zero()
                        };
                        acc += kv * v;
                    }
                    dst[i * w + j] = acc;
                }
            }
        }
    }
    Ok(Tensor {
        shape: x.shape.clone(),
        data: out,
    })
}

/// Spatial mean per channel: `[B,C,H,W] → [B,C]`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(4, "global_avg_pool")?;
    let (b, c, plane) = (x.shape[0], x.shape[1], x.shape[2] * x.shape[3]);
    let inv = T::uncounted(|| T::one() / T::from_f64(plane as f64));
    let mut out = Vec::with_capacity(b * c);
    for bc in 0..b * c {
        let mut s = T::zero();
        for &v in &x.data[bc * plane..(bc + 1) * plane] {
            s += v;
        }
        out.push(s * inv);
    }
    Ok(Tensor {
        shape: vec![b, c],
        data: out,
    })
}

/// Saved statistics of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct NormStats<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over the trailing channel axis of `[B,N,C]`.
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<Tensor<T>> {
    x.expect_rank(3, "layer_norm")?;
    let (b, n, c) = (x.shape[0], x.shape[1], x.shape[2]);
    let (out, _) = norm_kernel(x, gamma, beta, eps, NormLayout { outer: b * n, channels: c, inner: 1 })?;
    Ok(out)
}

/// How the normalized channel axis sits inside a buffer:
/// element `(o, c, i)` lives at `o * channels * inner + c * inner + i`.
#[derive(Clone, Copy, Debug)]
pub struct NormLayout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl NormLayout {
    /// Channels of an NCHW map: one normalization per pixel.
    pub fn nchw(shape: &[usize]) -> Self {
        NormLayout {
            outer: shape[0],
            channels: shape[1],
            inner: shape[2..].iter().product(),
        }
    }

    /// Trailing axis of a `[.., C]` tensor.
    pub fn last(shape: &[usize]) -> Self {
        let c = *shape.last().unwrap();
        NormLayout {
            outer: shape.iter().product::<usize>() / c,
            channels: c,
            inner: 1,
        }
    }
}

/// Layer norm along the channel axis of an arbitrary layout; per token the
/// cost is `3C + 4` multiplies.
pub fn norm_kernel<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
    layout: NormLayout,
) -> Result<(Tensor<T>, NormStats<T>)> {
    let NormLayout { outer, channels: c, inner } = layout;
    if !(eps > 0.0) {
        return Err(Error::Config(format!("layer norm eps must be positive, got {eps}")));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Dimension(format!(
            "layer norm over {c} channels got gamma {:?} and beta {:?}",
            gamma.shape, beta.shape
        )));
    }
    if outer * c * inner != x.len() {
        return Err(Error::Dimension(format!(
            "layer norm layout {outer}x{c}x{inner} does not cover shape {:?}",
            x.shape
        )));
    }
    let (inv_c, eps_t) = T::uncounted(|| (T::one() / T::from_f64(c as f64), T::from_f64(eps)));
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstds = Vec::with_capacity(outer * inner);
    let mut diff = vec![T::zero(); c];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| o * c * inner + ch * inner + i;
            let mut sum = T::zero();
            for ch in 0..c {
                sum += x.data[idx(ch)];
            }
            let mean = sum * inv_c;
            let mut sq = T::zero();
            for ch in 0..c {
                let d = x.data[idx(ch)] - mean;
                diff[ch] = d;
                sq += d * d;
            }
            let var = sq * inv_c;
            let rstd = T::one() / (var + eps_t).sqrt();
            for ch in 0..c {
                let xh = diff[ch] * rstd;
                xhat[idx(ch)] = xh;
                out[idx(ch)] = xh * gamma.data[ch] + beta.data[ch];
            }
            rstds.push(rstd);
        }
    }
    Ok((
        Tensor {
            shape: x.shape.clone(),
            data: out,
        },
        NormStats { xhat, rstd: rstds },
    ))
}

/// Non-overlapping convolution with kernel size equal to its stride:
/// `x[B,I,H,W]`, `weight[O,I,s,s]`, `bias[O]` → `[B,O,H/s,W/s]`.
pub fn patch_conv<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    x.expect_rank(4, "patch_conv input")?;
    weight.expect_rank(4, "patch_conv weight")?;
    let (b, ci, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, wi, s, s2) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
    if wi != ci || s != s2 || bias.len() != co {
        return Err(Error::Dimension(format!(
            "patch_conv: input {:?}, weight {:?}, bias {:?} are inconsistent",
            x.shape, weight.shape, bias.shape
        )));
    }
    if h % s != 0 || w % s != 0 {
        return Err(Error::Shape(format!(
            "patch_conv: H={h}, W={w} not divisible by stride {s}"
        )));
    }
    let (ho, wo) = (h / s, w / s);
    let mut out = vec![T::zero(); b * co * ho * wo];
    for bi in 0..b {
        for o in 0..co {
            let wbase = o * ci * s * s;
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = bias.data[o];
                    for c in 0..ci {
                        let xbase = (bi * ci + c) * h * w;
                        let kbase = wbase + c * s * s;
                        for u in 0..s {
                            let row = xbase + (i * s + u) * w + j * s;
                            for v in 0..s {
                                acc += weight.data[kbase + u * s + v] * x.data[row + v];
                            }
                        }
                    }
                    out[((bi * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Ok(Tensor {
        shape: vec![b, co, ho, wo],
        data: out,
    })
}

/// `x[B,in] · weightᵀ + bias` with `weight[out,in]`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    x.expect_rank(2, "linear input")?;
    weight.expect_rank(2, "linear weight")?;
    let (b, din) = (x.shape[0], x.shape[1]);
    let dout = weight.shape[0];
    if weight.shape[1] != din || bias.len() != dout {
        return Err(Error::Dimension(format!(
            "linear: input {:?}, weight {:?}, bias {:?} are inconsistent",
            x.shape, weight.shape, bias.shape
        )));
    }
    let mut out = Vec::with_capacity(b * dout);
    for bi in 0..b {
        let row = &x.data[bi * din..(bi + 1) * din];
        for o in 0..dout {
            let wrow = &weight.data[o * din..(o + 1) * din];
            let mut acc = bias.data[o];
            for (&xv, &wv) in row.iter().zip(wrow) {
                acc += wv * xv;
            }
            out.push(acc);
        }
    }
    Ok(Tensor {
        shape: vec![b, dout],
        data: out,
    })
}

const GELU_A: f64 = 0.044_715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Multiplies charged per GELU evaluation.
pub const GELU_COST: u64 = 7;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let (a, c, half) = (T::from_f64(GELU_A), T::from_f64(SQRT_2_OVER_PI), T::from_f64(0.5));
    let x3 = x * x * x;
    let t = ((x + a * x3) * c).tanh();
    half * x * (T::one() + t)
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (a, c, half) = (T::from_f64(GELU_A), T::from_f64(SQRT_2_OVER_PI), T::from_f64(0.5));
    let three_a = T::from_f64(3.0 * GELU_A);
    let inner = (x + a * x * x * x) * c;
    let t = inner.tanh();
    let dinner = c * (T::one() + three_a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[inline]
pub fn relu<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        T::zero()
    }
}
