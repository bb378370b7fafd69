//! Adjoints of the tensor-core primitives.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{self, Axis, NormLayout, NormStats, Tensor};

fn expect_same(shape: &[usize], dy: &[usize], what: &str) -> Result<()> {
    if shape != dy {
        return Err(Error::Dimension(format!(
            "{what}: upstream gradient {dy:?} does not match output shape {shape:?}"
        )));
    }
    Ok(())
}

/// Gradients of `c = a · b` given `dc`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    dc: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_same(&[a.shape()[0], b.shape()[1]], dc.shape(), "matmul_backward")?;
    let da = tensor::matmul(dc, &tensor::transpose(b)?)?;
    let db = tensor::matmul(&tensor::transpose(a)?, dc)?;
    Ok((da, db))
}

/// Vector-Jacobian product of softmax from its output `y`.
pub fn softmax_backward<T: Scalar>(y: &[T], dy: &[T]) -> Vec<T> {
    let mut dot = T::zero();
    for (&a, &g) in y.iter().zip(dy) {
        dot += a * g;
    }
    y.iter().zip(dy).map(|(&a, &g)| a * (g - dot)).collect()
}

/// Gradients of [`tensor::depthwise_conv_axis`] for input and kernels.
pub fn depthwise_conv_axis_backward<T: Scalar>(
    x: &Tensor<T>,
    kernels: &Tensor<T>,
    axis: Axis,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    expect_same(x.shape(), dy.shape(), "depthwise_conv_axis_backward")?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let k = kernels.shape()[1];
    let half = (k / 2) as isize;
    let plane = h * w;
    let mut dx = vec![T::zero(); x.len()];
    let mut dk = vec![T::zero(); kernels.len()];
    let (xd, gd, kd) = (x.data(), dy.data(), kernels.data());
    for bi in 0..b {
        for ci in 0..c {
            let base = (bi * c + ci) * plane;
            for i in 0..h {
                for j in 0..w {
                    let g = gd[base + i * w + j];
                    for t in 0..k {
                        let off = t as isize - half;
                        let (ii, jj) = match axis {
                            Axis::Horizontal => (i as isize, j as isize + off),
                            Axis::Vertical => (i as isize + off, j as isize),
                        };
                        if ii >= 0 && ii < h as isize && jj >= 0 && jj < w as isize {
                            let src = base + ii as usize * w + jj as usize;
                            dx[src] += kd[ci * k + t] * g;
                            dk[ci * k + t] += xd[src] * g;
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(kernels.shape(), dk)?,
    ))
}

/// Spreads `dy[B,C]` uniformly over each `H×W` plane.
pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], dy: &Tensor<T>) -> Result<Tensor<T>> {
    expect_same(&input_shape[..2], dy.shape(), "global_avg_pool_backward")?;
    let plane: usize = input_shape[2..].iter().product();
    let inv = T::one() / T::from_f64(plane as f64);
    let mut dx = Vec::with_capacity(dy.len() * plane);
    for &g in dy.data() {
        let v = g * inv;
        dx.extend(std::iter::repeat_n(v, plane));
    }
    Tensor::new(input_shape, dx)
}

/// Gradients of [`tensor::norm_kernel`] for input, gamma and beta.
pub fn norm_backward<T: Scalar>(
    stats: &NormStats<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
    layout: NormLayout,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let NormLayout { outer, channels: c, inner } = layout;
    if dy.len() != outer * c * inner || stats.xhat.len() != dy.len() {
        return Err(Error::Dimension(format!(
            "norm_backward: gradient {:?} does not match the saved statistics",
            dy.shape()
        )));
    }
    let inv_c = T::one() / T::from_f64(c as f64);
    let g = dy.data();
    let mut dx = vec![T::zero(); dy.len()];
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |ch: usize| o * c * inner + ch * inner + i;
            let rstd = stats.rstd[o * inner + i];
            let mut sum_d = T::zero();
            let mut sum_dx = T::zero();
            for ch in 0..c {
                let gi = g[idx(ch)];
                let xh = stats.xhat[idx(ch)];
                dgamma[ch] += gi * xh;
                dbeta[ch] += gi;
                let d = gi * gamma.data()[ch];
                sum_d += d;
                sum_dx += d * xh;
            }
            for ch in 0..c {
                let d = g[idx(ch)] * gamma.data()[ch];
                let xh = stats.xhat[idx(ch)];
                dx[idx(ch)] = rstd * (d - sum_d * inv_c - xh * sum_dx * inv_c);
            }
        }
    }
    Ok((
        Tensor::new(dy.shape(), dx)?,
        Tensor::new(gamma.shape(), dgamma)?,
        Tensor::new(gamma.shape(), dbeta)?,
    ))
}

/// Gradients of [`tensor::patch_conv`] for input, weight and bias.
pub fn patch_conv_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, ci, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, s) = (weight.shape()[0], weight.shape()[2]);
    let (ho, wo) = (h / s, w / s);
    expect_same(&[b, co, ho, wo], dy.shape(), "patch_conv_backward")?;
    let (xd, wd, gd) = (x.data(), weight.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); co];
    for bi in 0..b {
        for o in 0..co {
            let wbase = o * ci * s * s;
            for i in 0..ho {
                for j in 0..wo {
                    let g = gd[((bi * co + o) * ho + i) * wo + j];
                    db[o] += g;
                    for c in 0..ci {
                        let xbase = (bi * ci + c) * h * w;
                        let kbase = wbase + c * s * s;
                        for u in 0..s {
                            let row = xbase + (i * s + u) * w + j * s;
                            for v in 0..s {
                                dw[kbase + u * s + v] += g * xd[row + v];
                                dx[row + v] += g * wd[kbase + u * s + v];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[co], db)?,
    ))
}

/// Gradients of [`tensor::linear`] for input, weight and bias.
pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (b, din) = (x.shape()[0], x.shape()[1]);
    let dout = weight.shape()[0];
    expect_same(&[b, dout], dy.shape(), "linear_backward")?;
    let (xd, wd, gd) = (x.data(), weight.data(), dy.data());
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); weight.len()];
    let mut db = vec![T::zero(); dout];
    for bi in 0..b {
        for o in 0..dout {
            let g = gd[bi * dout + o];
            db[o] += g;
            for i in 0..din {
                dw[o * din + i] += g * xd[bi * din + i];
                dx[bi * din + i] += g * wd[o * din + i];
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[dout], db)?,
    ))
}
