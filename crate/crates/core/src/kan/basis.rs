//! Univariate basis families used by the KAN edges.
//!
//! * Gaussian RBF: `exp(-(x-μ)² / (2σ²))`
//! * cubic B-spline on a knot vector (Cox–de Boor)
//! * Ricker wavelet: `(1-t²)·exp(-t²/2)` with `t = (x-shift)/scale`

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Gaussian activations of one input against `M` centers and widths.
pub fn rbf_activations<T: Scalar>(x: T, mu: &[T], sigma: &[T]) -> Result<Vec<T>> {
    check_len(mu.len(), sigma.len(), "rbf centers/widths")?;
    if let Some(j) = sigma.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::Parameter(format!(
            "rbf width {j} must be positive, got {}",
            sigma[j]
        )));
    }
    let half = T::from_f64(0.5);
    Ok(mu
        .iter()
        .zip(sigma)
        .map(|(&m, &s)| {
            let d = (x - m) / s;
            (-(d * d * half)).exp()
        })
        .collect())
}

/// Ricker wavelet activations.
pub fn wavelet_activations<T: Scalar>(x: T, scale: &[T], shift: &[T]) -> Result<Vec<T>> {
    check_len(scale.len(), shift.len(), "wavelet scales/shifts")?;
    if let Some(j) = scale.iter().position(|&s| !(s > T::zero())) {
        return Err(Error::Parameter(format!(
            "wavelet scale {j} must be positive, got {}",
            scale[j]
        )));
    }
    Ok(scale
        .iter()
        .zip(shift)
        .map(|(&s, &b)| ricker((x - b) / s))
        .collect())
}

#[inline]
pub fn ricker<T: Scalar>(t: T) -> T {
    let t2 = t * t;
    (T::one() - t2) * (-(t2 * T::from_f64(0.5))).exp()
}

/// dψ/dt of the Ricker wavelet: `t (t² - 3) exp(-t²/2)`.
#[inline]
pub fn ricker_grad<T: Scalar>(t: T) -> T {
    let t2 = t * t;
    t * (t2 - T::from_f64(3.0)) * (-(t2 * T::from_f64(0.5))).exp()
}

fn check_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b || a == 0 {
        return Err(Error::Dimension(format!(
            "{what} must be non-empty and equal in length, got {a} and {b}"
        )));
    }
    Ok(())
}

/// Knot vector plus precomputed reciprocal knot spans for Cox–de Boor.
#[derive(Clone, Debug, PartialEq)]
pub struct BSplineGrid {
    knots: Vec<f64>,
    degree: usize,
    /// `inv[d][i] = 1 / (t[i+d] - t[i])`, zero for empty spans.
    inv: Vec<Vec<f64>>,
}

/// Half-width of the uniform grid support used by B-spline KAN edges.
pub const BSPLINE_SUPPORT: f64 = 4.0;
pub const BSPLINE_DEGREE: usize = 3;

impl BSplineGrid {
    pub fn new(knots: Vec<f64>, degree: usize) -> Result<Self> {
        if knots.len() < degree + 2 {
            return Err(Error::Config(format!(
                "a degree-{degree} B-spline needs at least {} knots, got {}",
                degree + 2,
                knots.len()
            )));
        }
        if knots.windows(2).any(|w| !(w[1] >= w[0])) {
            return Err(Error::Config("B-spline knots must be non-decreasing".into()));
        }
        let inv = (0..=degree + 1)
            .map(|d| {
                (0..knots.len().saturating_sub(d))
                    .map(|i| {
                        let span = knots[i + d] - knots[i];
                        if d > 0 && span > 0.0 {
                            1.0 / span
                        } else {
                            0.0
                        }
                    })
                    .collect()
            })
            .collect();
        let grid = BSplineGrid { knots, degree, inv };
        if !(grid.hi() > grid.lo()) {
            return Err(Error::Config("B-spline support is empty".into()));
        }
        Ok(grid)
    }

    /// Uniform cubic grid with `count` basis functions covering `[-g, g]`.
    pub fn uniform(count: usize, half_width: f64) -> Result<Self> {
        let p = BSPLINE_DEGREE;
        if count < p + 1 {
            return Err(Error::Config(format!(
                "a cubic B-spline basis needs at least {} functions, got {count}",
                p + 1
            )));
        }
        let intervals = count - p;
        let h = 2.0 * half_width / intervals as f64;
        let knots = (0..count + p + 1)
            .map(|i| -half_width + (i as f64 - p as f64) * h)
            .collect();
        Self::new(knots, p)
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn num_basis(&self) -> usize {
        self.knots.len() - self.degree - 1
    }

    /// Left end of the region where the basis sums to one.
    pub fn lo(&self) -> f64 {
        self.knots[self.degree]
    }

    pub fn hi(&self) -> f64 {
        self.knots[self.knots.len() - 1 - self.degree]
    }

    /// Multiplies spent by one [`BSplineGrid::eval`].
    pub fn eval_cost(&self) -> u64 {
        let k = self.knots.len() as u64;
        (1..=self.degree as u64).map(|d| 4 * (k - 1 - d)).sum()
    }

    fn span(&self, x: f64) -> usize {
        let last = self.knots.len() - 2 - self.degree;
        let mut s = self.degree;
        while s < last && x >= self.knots[s + 1] {
            s += 1;
        }
        // skip empty trailing spans at the right end
        while s > self.degree && self.knots[s + 1] <= self.knots[s] {
            s -= 1;
        }
        s
    }

    /// Basis values at `x` after clamping to the support, and `dB/dx`
    /// when requested (zero outside the open support).
    pub fn eval<T: Scalar>(&self, x: T, want_grad: bool) -> (Vec<T>, Option<Vec<T>>) {
        let (lo, hi) = (T::from_f64(self.lo()), T::from_f64(self.hi()));
        let inside = x > lo && x < hi;
        let xc = x.max(lo).min(hi);
        let nk = self.knots.len();
        let mut level = vec![T::zero(); nk - 1];
        level[self.span(xc.to_f64())] = T::one();
        let mut prev = level.clone();
        for d in 1..=self.degree {
            std::mem::swap(&mut prev, &mut level);
            for i in 0..nk - 1 - d {
                let (inv_a, inv_b) = T::uncounted(|| {
                    (
                        T::from_f64(self.inv[d][i]),
                        T::from_f64(self.inv[d][i + 1]),
                    )
                });
                let a = (xc - T::from_f64(self.knots[i])) * inv_a * prev[i];
                let b = (T::from_f64(self.knots[i + d + 1]) - xc) * inv_b * prev[i + 1];
                level[i] = a + b;
            }
            level.truncate(nk - 1 - d);
            if d == self.degree && want_grad {
                // prev holds degree-1 values
                let p = T::from_f64(self.degree as f64);
                let grads = (0..self.num_basis())
                    .map(|i| {
                        if !inside {
                            return T::zero();
                        }
                        let ia = T::from_f64(self.inv[d][i]);
                        let ib = T::from_f64(self.inv[d][i + 1]);
                        p * (ia * prev[i] - ib * prev[i + 1])
                    })
                    .collect();
                return (level, Some(grads));
            }
        }
        (level, None)
    }
}

/// Cubic B-spline basis at `x` on the given knot vector.
pub fn bspline_activations<T: Scalar>(x: T, knots: &[f64], degree: usize) -> Result<Vec<T>> {
    let grid = BSplineGrid::new(knots.to_vec(), degree)?;
    Ok(grid.eval(x, false).0)
}

/// Parameters of one learned edge function `φ(x) = Σ_j w_j B_j(x)`.
#[derive(Clone, Copy, Debug)]
pub enum Edge<'a, T> {
    Rbf { mu: &'a [T], sigma: &'a [T], w: &'a [T] },
    Wavelet { shift: &'a [T], scale: &'a [T], w: &'a [T] },
    BSpline { grid: &'a BSplineGrid, w: &'a [T] },
}

/// Evaluates one edge function.
pub fn phi_edge<T: Scalar>(x: T, edge: Edge<'_, T>) -> Result<T> {
    let (basis, w) = match edge {
        Edge::Rbf { mu, sigma, w } => (rbf_activations(x, mu, sigma)?, w),
        Edge::Wavelet { shift, scale, w } => (wavelet_activations(x, scale, shift)?, w),
        Edge::BSpline { grid, w } => (grid.eval(x, false).0, w),
    };
    check_len(basis.len(), w.len(), "edge basis/weights")?;
    let mut acc = T::zero();
    for (b, &wj) in basis.into_iter().zip(w) {
        acc += wj * b;
    }
    Ok(acc)
}

/// Gradient of `φ(x)` with respect to its input and every edge parameter.
/// `center` is ∂φ/∂μ (RBF) or ∂φ/∂shift (wavelet); `log_width` is
/// ∂φ/∂log σ or ∂φ/∂log scale. Both are empty for B-splines.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeGrad<T> {
    pub x: T,
    pub center: Vec<T>,
    pub log_width: Vec<T>,
    pub w: Vec<T>,
}

pub fn phi_edge_grad<T: Scalar>(x: T, edge: Edge<'_, T>) -> Result<EdgeGrad<T>> {
    match edge {
        Edge::Rbf { mu, sigma, w } => {
            let b = rbf_activations(x, mu, sigma)?;
            check_len(b.len(), w.len(), "edge basis/weights")?;
            let mut g = EdgeGrad { x: T::zero(), center: vec![], log_width: vec![], w: b.clone() };
            for j in 0..b.len() {
                let s2 = sigma[j] * sigma[j];
                let d = x - mu[j];
                let wb = w[j] * b[j];
                g.x -= wb * d / s2;
                g.center.push(wb * d / s2);
                g.log_width.push(wb * d * d / s2);
            }
            Ok(g)
        }
        Edge::Wavelet { shift, scale, w } => {
            check_len(scale.len(), w.len(), "edge basis/weights")?;
            let b = wavelet_activations(x, scale, shift)?;
            let mut g = EdgeGrad { x: T::zero(), center: vec![], log_width: vec![], w: b };
            for j in 0..w.len() {
                let t = (x - shift[j]) / scale[j];
                let dpsi = w[j] * ricker_grad(t);
                g.x += dpsi / scale[j];
                g.center.push(-dpsi / scale[j]);
                g.log_width.push(-dpsi * t);
            }
            Ok(g)
        }
        Edge::BSpline { grid, w } => {
            let (b, db) = grid.eval(x, true);
            check_len(b.len(), w.len(), "edge basis/weights")?;
            let db = db.unwrap();
            let mut gx = T::zero();
            for (&wj, &d) in w.iter().zip(&db) {
                gx += wj * d;
            }
            Ok(EdgeGrad { x: gx, center: vec![], log_width: vec![], w: b })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rbf_peak_and_one_sigma() {
        let b = rbf_activations(0.3f64, &[0.3, -0.7], &[0.5, 0.5]).unwrap();
        assert_eq!(b[0], 1.0);
        let b = rbf_activations(1.5f64, &[1.0], &[0.5]).unwrap();
        assert!((b[0] - (-0.5f64).exp()).abs() < 1e-12);
        assert!((b[0] - 0.60653).abs() < 1e-5);
    }

    #[test]
    fn rbf_rejects_nonpositive_width() {
        assert!(matches!(
            rbf_activations(0.0f32, &[0.0], &[0.0]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn ricker_fixed_points() {
        let v = wavelet_activations(0.25f64, &[2.0], &[0.25]).unwrap();
        assert_eq!(v[0], 1.0);
        let v = wavelet_activations(2.25f64, &[2.0], &[0.25]).unwrap();
        assert_eq!(v[0], 0.0);
        assert!(matches!(
            wavelet_activations(0.0f64, &[-1.0], &[0.0]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn bspline_partition_and_stencils() {
        let g = BSplineGrid::uniform(8, 4.0).unwrap();
        assert_eq!(g.num_basis(), 8);
        assert_eq!((g.lo(), g.hi()), (-4.0, 4.0));
        for k in 0..=200 {
            let x = -3.99 + 7.98 * k as f64 / 200.0;
            let s: f64 = g.eval(x, false).0.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "sum {s} at {x}");
        }
        // at an interior knot: {1/6, 4/6, 1/6}
        let knot = g.knots()[5];
        let v: Vec<f64> = g.eval(knot, false).0;
        let nz: Vec<f64> = v.into_iter().filter(|b| b.abs() > 1e-14).collect();
        assert_eq!(nz.len(), 3);
        for (a, e) in nz.iter().zip([1.0 / 6.0, 4.0 / 6.0, 1.0 / 6.0]) {
            assert!((a - e).abs() < 1e-12);
        }
        // at an interval midpoint: {1/48, 23/48, 23/48, 1/48}
        let mid = 0.5 * (g.knots()[5] + g.knots()[6]);
        let nz: Vec<f64> = g.eval(mid, false).0.into_iter().filter(|b| b.abs() > 1e-14).collect();
        for (a, e) in nz.iter().zip([1.0, 23.0, 23.0, 1.0]) {
            assert!((a - e / 48.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bspline_clamps_outside_support() {
        let g = BSplineGrid::uniform(6, 4.0).unwrap();
        assert_eq!(g.eval(9.0f64, false).0, g.eval(4.0f64, false).0);
        assert_eq!(g.eval(-7.5f64, false).0, g.eval(-4.0f64, false).0);
        let right: f64 = g.eval(4.0f64, false).0.iter().sum();
        assert!((right - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bspline_rejects_short_knot_vectors() {
        assert!(matches!(
            bspline_activations(0.0f64, &[0.0, 1.0, 2.0, 3.0], 3),
            Err(Error::Config(_))
        ));
        assert!(BSplineGrid::uniform(3, 4.0).is_err());
    }

    #[test]
    fn phi_zero_weights_and_single_peak() {
        let z = [0.0; 3];
        let e = Edge::Rbf { mu: &[-1.0, 0.0, 1.0], sigma: &[1.0; 3], w: &z };
        assert_eq!(phi_edge(0.7f64, e).unwrap(), 0.0);
        let e = Edge::Rbf { mu: &[0.4], sigma: &[2.0], w: &[1.0] };
        assert_eq!(phi_edge(0.4f64, e).unwrap(), 1.0);
    }

    #[test]
    fn rbf_gradient_vanishes_at_center() {
        let e = Edge::Rbf { mu: &[0.4], sigma: &[0.8], w: &[1.7] };
        assert_eq!(phi_edge_grad(0.4f64, e).unwrap().x, 0.0);
    }
}
