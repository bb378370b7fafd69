//! Kolmogorov–Arnold layers over flattened patches.
//!
//! A square layer maps a length-`F` vector to a length-`F` vector with
//! `out[o] = Σ_i φ_{i,o}(x[i])`, where every edge function is a learned
//! basis expansion `φ(x) = Σ_j w_j B_j(x)`. Edge parameters are stored as
//! `[F_in, F_out, M]` tensors.

pub mod basis;
pub mod curve;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{push_param, push_param_mut, Param, ParamMut, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{gelu, gelu_grad, Tensor, GELU_COST};

pub use basis::{BSplineGrid, Edge, EdgeGrad};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BasisKind {
    Rbf,
    Bspline,
    Wavelet,
    /// Ablation arm: a parameter-matched two-layer perceptron instead of KAN edges.
    MlpReplace,
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            BasisKind::Rbf => "rbf",
            BasisKind::Bspline => "bspline",
            BasisKind::Wavelet => "wavelet",
            BasisKind::MlpReplace => "mlp_replace",
        };
        f.write_str(s)
    }
}

/// Basis family plus basis count `M` (ignored by `MlpReplace`).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub count: usize,
}

impl BasisSpec {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::MlpReplace => Ok(()),
            BasisKind::Bspline if self.count < basis::BSPLINE_DEGREE + 1 => Err(Error::Config(
                format!("bspline basis needs M >= 4, got {}", self.count),
            )),
            _ if self.count == 0 => Err(Error::Config("basis count M must be >= 1".into())),
            _ => Ok(()),
        }
    }
}

/// Hidden width of the MLP that stands in for a KAN layer of the same
/// `(F, M)`: the one whose parameter count is closest to `3·F²·M`.
pub fn mlp_replace_hidden(dim: usize, count: usize) -> usize {
    let target = 3 * dim * dim * count;
    let per_unit = 2 * dim + 1;
    let h = (target.saturating_sub(dim) as f64 / per_unit as f64).round() as usize;
    h.max(1)
}

#[derive(Clone, Debug, PartialEq)]
pub enum KanWeights<T> {
    Rbf {
        mu: Tensor<T>,
        log_sigma: Tensor<T>,
        w: Tensor<T>,
    },
    Wavelet {
        shift: Tensor<T>,
        log_scale: Tensor<T>,
        w: Tensor<T>,
    },
    Bspline {
        grid: BSplineGrid,
        w: Tensor<T>,
    },
    MlpReplace {
        w1: Tensor<T>,
        b1: Tensor<T>,
        w2: Tensor<T>,
        b2: Tensor<T>,
    },
}

/// One square KAN layer of width `F = p²`.
#[derive(Clone, Debug, PartialEq)]
pub struct KanLayer<T> {
    dim: usize,
    spec: BasisSpec,
    pub weights: KanWeights<T>,
}

fn centers(count: usize) -> (Vec<f64>, f64) {
    if count == 1 {
        return (vec![0.0], 1.0);
    }
    let step = 4.0 / (count - 1) as f64;
    ((0..count).map(|j| -2.0 + step * j as f64).collect(), step)
}

impl<T: Scalar> KanLayer<T> {
    /// Centers evenly spaced on `[-2, 2]`, widths equal to the spacing,
    /// weights uniform in `±1/√(F·M)`.
    pub fn new<R: Rng + ?Sized>(dim: usize, spec: BasisSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        if dim == 0 {
            return Err(Error::Config("KAN layer width must be >= 1".into()));
        }
        let m = spec.count;
        let shape = [dim, dim, m.max(1)];
        let bound = 1.0 / ((dim * m.max(1)) as f64).sqrt();
        let tiled = |vals: &[f64]| -> Tensor<T> {
            let data: Vec<T> = (0..dim * dim)
                .flat_map(|_| vals.iter().map(|&v| T::from_f64(v)))
                .collect();
            Tensor::new(&shape, data).unwrap()
        };
        let weights = match spec.kind {
            BasisKind::Rbf | BasisKind::Wavelet => {
                let (c, step) = centers(m);
                let center = tiled(&c);
                let log_width = Tensor::full(&shape, T::from_f64(step.ln()));
                let w = Tensor::uniform(&shape, -bound, bound, rng);
                if spec.kind == BasisKind::Rbf {
                    KanWeights::Rbf { mu: center, log_sigma: log_width, w }
                } else {
                    KanWeights::Wavelet { shift: center, log_scale: log_width, w }
                }
            }
            BasisKind::Bspline => KanWeights::Bspline {
                grid: BSplineGrid::uniform(m, basis::BSPLINE_SUPPORT)?,
                w: Tensor::uniform(&shape, -bound, bound, rng),
            },
            BasisKind::MlpReplace => {
                let h = mlp_replace_hidden(dim, m.max(1));
                let b1 = 1.0 / (dim as f64).sqrt();
                let b2 = 1.0 / (h as f64).sqrt();
                KanWeights::MlpReplace {
                    w1: Tensor::uniform(&[h, dim], -b1, b1, rng),
                    b1: Tensor::zeros(&[h]),
                    w2: Tensor::uniform(&[dim, h], -b2, b2, rng),
                    b2: Tensor::zeros(&[dim]),
                }
            }
        };
        Ok(KanLayer { dim, spec, weights })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn spec(&self) -> BasisSpec {
        self.spec
    }

    fn basis_count(&self) -> usize {
        self.spec.count
    }

    /// Parameters of edge `(i, o)` for edge-wise inspection.
    pub fn edge(&self, i: usize, o: usize) -> Result<EdgeView<T>> {
        if i >= self.dim || o >= self.dim {
            return Err(Error::Config(format!(
                "edge ({i},{o}) out of range for a width-{} layer (valid 0..{})",
                self.dim, self.dim
            )));
        }
        let m = self.basis_count();
        let r = (i * self.dim + o) * m..(i * self.dim + o + 1) * m;
        match &self.weights {
            KanWeights::Rbf { mu, log_sigma, w } => Ok(EdgeView::Rbf {
                mu: mu.data()[r.clone()].to_vec(),
                sigma: log_sigma.data()[r.clone()].iter().map(|v| v.exp()).collect(),
                w: w.data()[r].to_vec(),
            }),
            KanWeights::Wavelet { shift, log_scale, w } => Ok(EdgeView::Wavelet {
                shift: shift.data()[r.clone()].to_vec(),
                scale: log_scale.data()[r.clone()].iter().map(|v| v.exp()).collect(),
                w: w.data()[r].to_vec(),
            }),
            KanWeights::Bspline { grid, w } => Ok(EdgeView::Bspline {
                grid: grid.clone(),
                w: w.data()[r].to_vec(),
            }),
            KanWeights::MlpReplace { .. } => Err(Error::Config(
                "an MLP-replaced layer has no per-edge univariate functions".into(),
            )),
        }
    }

    /// Applies the layer to `rows` consecutive length-`F` vectors.
    pub fn forward_rows(&self, x: &[T], out: &mut [T]) {
        let f = self.dim;
        debug_assert_eq!(x.len(), out.len());
        debug_assert_eq!(x.len() % f, 0);
        let m = self.basis_count();
        match &self.weights {
            KanWeights::Rbf { mu, log_sigma, w } => {
                let inv2s2 = T::uncounted(|| {
                    log_sigma
                        .data()
                        .iter()
                        .map(|&ls| T::from_f64(0.5) * (-(ls + ls)).exp())
                        .collect::<Vec<T>>()
                });
                let (mu, w) = (mu.data(), w.data());
                for (xr, yr) in x.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
                    yr.fill(T::zero());
                    for (i, &xi) in xr.iter().enumerate() {
                        for (o, y) in yr.iter_mut().enumerate() {
                            let base = (i * f + o) * m;
                            let mut acc = T::zero();
                            for j in base..base + m {
                                let d = xi - mu[j];
                                acc += w[j] * (-(d * d * inv2s2[j])).exp();
                            }
                            *y += acc;
                        }
                    }
                }
            }
            KanWeights::Wavelet { shift, log_scale, w } => {
                let inv_scale = T::uncounted(|| {
                    log_scale.data().iter().map(|&ls| (-ls).exp()).collect::<Vec<T>>()
                });
                let half = T::from_f64(0.5);
                let (shift, w) = (shift.data(), w.data());
                for (xr, yr) in x.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
                    yr.fill(T::zero());
                    for (i, &xi) in xr.iter().enumerate() {
                        for (o, y) in yr.iter_mut().enumerate() {
                            let base = (i * f + o) * m;
                            let mut acc = T::zero();
                            for j in base..base + m {
                                let t = (xi - shift[j]) * inv_scale[j];
                                let t2 = t * t;
                                let psi = (T::one() - t2) * (-(t2 * half)).exp();
                                acc += w[j] * psi;
                            }
                            *y += acc;
                        }
                    }
                }
            }
            KanWeights::Bspline { grid, w } => {
                let w = w.data();
                for (xr, yr) in x.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
                    yr.fill(T::zero());
                    for (i, &xi) in xr.iter().enumerate() {
                        let (b, _) = grid.eval(xi, false);
                        for (o, y) in yr.iter_mut().enumerate() {
                            let base = (i * f + o) * m;
                            let mut acc = T::zero();
                            for (j, &bj) in b.iter().enumerate() {
                                acc += w[base + j] * bj;
                            }
                            *y += acc;
                        }
                    }
                }
            }
            KanWeights::MlpReplace { w1, b1, w2, b2 } => {
                let h = b1.len();
                let mut hidden = vec![T::zero(); h];
                for (xr, yr) in x.chunks_exact(f).zip(out.chunks_exact_mut(f)) {
                    for (u, hv) in hidden.iter_mut().enumerate() {
                        let mut acc = b1.data()[u];
                        for (i, &xi) in xr.iter().enumerate() {
                            acc += w1.data()[u * f + i] * xi;
                        }
                        *hv = gelu(acc);
                    }
                    for (o, y) in yr.iter_mut().enumerate() {
                        let mut acc = b2.data()[o];
                        for (u, &hv) in hidden.iter().enumerate() {
                            acc += w2.data()[o * h + u] * hv;
                        }
                        *y = acc;
                    }
                }
            }
        }
    }

    /// Backward of [`KanLayer::forward_rows`]: writes the input gradient to
    /// `dx` and accumulates parameter gradients into `grads`.
    pub fn backward_rows(&self, x: &[T], dy: &[T], dx: &mut [T], grads: &mut KanLayer<T>) {
        let f = self.dim;
        let m = self.basis_count();
        match (&self.weights, &mut grads.weights) {
            (
                KanWeights::Rbf { mu, log_sigma, w },
                KanWeights::Rbf { mu: gmu, log_sigma: gls, w: gw },
            ) => {
                let inv_s2: Vec<T> = log_sigma.data().iter().map(|&ls| (-(ls + ls)).exp()).collect();
                let (mu, w) = (mu.data(), w.data());
                let (gmu, gls, gw) = (gmu.data_mut(), gls.data_mut(), gw.data_mut());
                let half = T::from_f64(0.5);
                for ((xr, gr), dxr) in x.chunks_exact(f).zip(dy.chunks_exact(f)).zip(dx.chunks_exact_mut(f)) {
                    for (i, &xi) in xr.iter().enumerate() {
                        let mut gx = T::zero();
                        for (o, &g) in gr.iter().enumerate() {
                            let base = (i * f + o) * m;
                            for j in base..base + m {
                                let d = xi - mu[j];
                                let u = d * d * inv_s2[j];
                                let b = (-(u * half)).exp();
                                gw[j] += g * b;
                                let wb = g * w[j] * b;
                                let slope = wb * d * inv_s2[j];
                                gx -= slope;
                                gmu[j] += slope;
                                gls[j] += wb * u;
                            }
                        }
                        dxr[i] = gx;
                    }
                }
            }
            (
                KanWeights::Wavelet { shift, log_scale, w },
                KanWeights::Wavelet { shift: gsh, log_scale: gls, w: gw },
            ) => {
                let inv_scale: Vec<T> = log_scale.data().iter().map(|&ls| (-ls).exp()).collect();
                let (shift, w) = (shift.data(), w.data());
                let (gsh, gls, gw) = (gsh.data_mut(), gls.data_mut(), gw.data_mut());
                for ((xr, gr), dxr) in x.chunks_exact(f).zip(dy.chunks_exact(f)).zip(dx.chunks_exact_mut(f)) {
                    for (i, &xi) in xr.iter().enumerate() {
                        let mut gx = T::zero();
                        for (o, &g) in gr.iter().enumerate() {
                            let base = (i * f + o) * m;
                            for j in base..base + m {
                                let t = (xi - shift[j]) * inv_scale[j];
                                gw[j] += g * basis::ricker(t);
                                let dpsi = g * w[j] * basis::ricker_grad(t);
                                let dt = dpsi * inv_scale[j];
                                gx += dt;
                                gsh[j] -= dt;
                                gls[j] -= dpsi * t;
                            }
                        }
                        dxr[i] = gx;
                    }
                }
            }
            (KanWeights::Bspline { grid, w }, KanWeights::Bspline { w: gw, .. }) => {
                let (w, gw) = (w.data(), gw.data_mut());
                for ((xr, gr), dxr) in x.chunks_exact(f).zip(dy.chunks_exact(f)).zip(dx.chunks_exact_mut(f)) {
                    for (i, &xi) in xr.iter().enumerate() {
                        let (b, db) = grid.eval(xi, true);
                        let db = db.unwrap();
                        let mut gx = T::zero();
                        for (o, &g) in gr.iter().enumerate() {
                            let base = (i * f + o) * m;
                            for j in 0..m {
                                gw[base + j] += g * b[j];
                                gx += g * w[base + j] * db[j];
                            }
                        }
                        dxr[i] = gx;
                    }
                }
            }
            (
                KanWeights::MlpReplace { w1, b1, w2, .. },
                KanWeights::MlpReplace { w1: gw1, b1: gb1, w2: gw2, b2: gb2 },
            ) => {
                let h = b1.len();
                let mut pre = vec![T::zero(); h];
                let mut dh = vec![T::zero(); h];
                for ((xr, gr), dxr) in x.chunks_exact(f).zip(dy.chunks_exact(f)).zip(dx.chunks_exact_mut(f)) {
                    for (u, p) in pre.iter_mut().enumerate() {
                        let mut acc = b1.data()[u];
                        for (i, &xi) in xr.iter().enumerate() {
                            acc += w1.data()[u * f + i] * xi;
                        }
                        *p = acc;
                    }
                    dh.fill(T::zero());
                    for (o, &g) in gr.iter().enumerate() {
                        gb2.data_mut()[o] += g;
                        for u in 0..h {
                            gw2.data_mut()[o * h + u] += g * gelu(pre[u]);
                            dh[u] += g * w2.data()[o * h + u];
                        }
                    }
                    dxr.fill(T::zero());
                    for u in 0..h {
                        let dp = dh[u] * gelu_grad(pre[u]);
                        gb1.data_mut()[u] += dp;
                        for (i, &xi) in xr.iter().enumerate() {
                            gw1.data_mut()[u * f + i] += dp * xi;
                            dxr[i] += dp * w1.data()[u * f + i];
                        }
                    }
                }
            }
            _ => panic!("gradient buffer does not match the KAN basis kind"),
        }
    }

    /// Multiplies charged per length-`F` row by [`KanLayer::forward_rows`].
    pub fn row_cost(&self) -> u64 {
        row_cost(self.dim, self.spec)
    }
}

/// Multiplies charged per length-`F` row for a layer of this shape.
/// RBF: 4 per edge basis (square, scale, exp, weight). Wavelet: 6.
/// B-spline: one Cox–de Boor table per input plus one per edge basis.
/// MLP: two dense maps and a GELU per hidden unit.
pub fn row_cost(dim: usize, spec: BasisSpec) -> u64 {
    let (f, m) = (dim as u64, spec.count as u64);
    match spec.kind {
        BasisKind::Rbf => 4 * f * f * m,
        BasisKind::Wavelet => 6 * f * f * m,
        BasisKind::Bspline => {
            let grid = BSplineGrid::uniform(spec.count, basis::BSPLINE_SUPPORT)
                .expect("validated basis spec");
            f * grid.eval_cost() + f * f * m
        }
        BasisKind::MlpReplace => {
            let h = mlp_replace_hidden(dim, spec.count.max(1)) as u64;
            2 * f * h + GELU_COST * h
        }
    }
}

/// Trainable scalars in one layer of this shape.
pub fn layer_param_count(dim: usize, spec: BasisSpec) -> usize {
    let edges = dim * dim * spec.count;
    match spec.kind {
        BasisKind::Rbf | BasisKind::Wavelet => 3 * edges,
        BasisKind::Bspline => edges,
        BasisKind::MlpReplace => {
            let h = mlp_replace_hidden(dim, spec.count.max(1));
            h * (2 * dim + 1) + dim
        }
    }
}

/// Owned copy of one edge's parameters, with widths already exponentiated.
#[derive(Clone, Debug)]
pub enum EdgeView<T> {
    Rbf { mu: Vec<T>, sigma: Vec<T>, w: Vec<T> },
    Wavelet { shift: Vec<T>, scale: Vec<T>, w: Vec<T> },
    Bspline { grid: BSplineGrid, w: Vec<T> },
}

impl<T: Scalar> EdgeView<T> {
    pub fn as_edge(&self) -> Edge<'_, T> {
        match self {
            EdgeView::Rbf { mu, sigma, w } => Edge::Rbf { mu, sigma, w },
            EdgeView::Wavelet { shift, scale, w } => Edge::Wavelet { shift, scale, w },
            EdgeView::Bspline { grid, w } => Edge::BSpline { grid, w },
        }
    }

    pub fn eval(&self, x: T) -> Result<T> {
        basis::phi_edge(x, self.as_edge())
    }
}

impl<T: Scalar> Parameterized<T> for KanLayer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        match &self.weights {
            KanWeights::Rbf { mu, log_sigma, w } => {
                push_param!(out, prefix, "mu", mu, false);
                push_param!(out, prefix, "log_sigma", log_sigma, false);
                push_param!(out, prefix, "w", w, true);
            }
            KanWeights::Wavelet { shift, log_scale, w } => {
                push_param!(out, prefix, "shift", shift, false);
                push_param!(out, prefix, "log_scale", log_scale, false);
                push_param!(out, prefix, "w", w, true);
            }
            KanWeights::Bspline { w, .. } => push_param!(out, prefix, "w", w, true),
            KanWeights::MlpReplace { w1, b1, w2, b2 } => {
                push_param!(out, prefix, "fc1.weight", w1, true);
                push_param!(out, prefix, "fc1.bias", b1, false);
                push_param!(out, prefix, "fc2.weight", w2, true);
                push_param!(out, prefix, "fc2.bias", b2, false);
            }
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        match &mut self.weights {
            KanWeights::Rbf { mu, log_sigma, w } => {
                push_param_mut!(out, prefix, "mu", mu, false);
                push_param_mut!(out, prefix, "log_sigma", log_sigma, false);
                push_param_mut!(out, prefix, "w", w, true);
            }
            KanWeights::Wavelet { shift, log_scale, w } => {
                push_param_mut!(out, prefix, "shift", shift, false);
                push_param_mut!(out, prefix, "log_scale", log_scale, false);
                push_param_mut!(out, prefix, "w", w, true);
            }
            KanWeights::Bspline { w, .. } => push_param_mut!(out, prefix, "w", w, true),
            KanWeights::MlpReplace { w1, b1, w2, b2 } => {
                push_param_mut!(out, prefix, "fc1.weight", w1, true);
                push_param_mut!(out, prefix, "fc1.bias", b1, false);
                push_param_mut!(out, prefix, "fc2.weight", w2, true);
                push_param_mut!(out, prefix, "fc2.bias", b2, false);
            }
        }
    }
}
