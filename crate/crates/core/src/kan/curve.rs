//! Tabulation of learned edge functions for plotting.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::KanLayer;

/// Evaluation grid `[lo, hi]` with `points` samples, endpoints included.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CurveGrid {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl CurveGrid {
    pub fn new(lo: f64, hi: f64, points: usize) -> Result<Self> {
        if points < 2 || !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!(
                "curve grid needs lo < hi and at least 2 points, got lo={lo}, hi={hi}, n={points}"
            )));
        }
        Ok(CurveGrid { lo, hi, points })
    }

    /// Parses `"lo,hi,n"`.
    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
        let bad = || Error::Config(format!("grid must look like \"lo,hi,n\", got {spec:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo = parts[0].parse().map_err(|_| bad())?;
        let hi = parts[1].parse().map_err(|_| bad())?;
        let n = parts[2].parse().map_err(|_| bad())?;
        Self::new(lo, hi, n)
    }

    pub fn xs(&self) -> Vec<f64> {
        let step = (self.hi - self.lo) / (self.points - 1) as f64;
        (0..self.points)
            .map(|k| {
                if k + 1 == self.points {
                    self.hi
                } else {
                    self.lo + step * k as f64
                }
            })
            .collect()
    }
}

/// `(x, φ(x))` rows of one edge, in increasing `x`.
pub fn phi_curve_table<T: Scalar>(
    layer: &KanLayer<T>,
    input: usize,
    output: usize,
    grid: CurveGrid,
) -> Result<Vec<(f64, f64)>> {
    let edge = layer.edge(input, output)?;
    let edge = match edge {
        super::EdgeView::Rbf { mu, sigma, w } => super::EdgeView::Rbf {
            mu: mu.iter().map(|v| v.to_f64()).collect(),
            sigma: sigma.iter().map(|v| v.to_f64()).collect(),
            w: w.iter().map(|v| v.to_f64()).collect(),
        },
        super::EdgeView::Wavelet { shift, scale, w } => super::EdgeView::Wavelet {
            shift: shift.iter().map(|v| v.to_f64()).collect(),
            scale: scale.iter().map(|v| v.to_f64()).collect(),
            w: w.iter().map(|v| v.to_f64()).collect(),
        },
        super::EdgeView::Bspline { grid, w } => super::EdgeView::Bspline {
            grid,
            w: w.iter().map(|v| v.to_f64()).collect(),
        },
    };
    grid.xs()
        .into_iter()
        .map(|x| {
            let y = edge.eval(x)?;
            if !y.is_finite() {
                return Err(Error::Numerical(format!("phi({x}) is not finite")));
            }
            Ok((x, y))
        })
        .collect()
}

/// CSV with header `x,phi` and 9 significant digits per value.
pub fn curve_csv(rows: &[(f64, f64)]) -> String {
    let mut s = String::from("x,phi\n");
    for (x, y) in rows {
        let _ = writeln!(s, "{x:.8e},{y:.8e}");
    }
    s
}

/// Sign changes of the discrete second derivative along a curve; a rough
/// measure of how oscillatory a learned function is.
pub fn curvature_sign_changes(rows: &[(f64, f64)]) -> usize {
    if rows.len() < 4 {
        return 0;
    }
    let second: Vec<f64> = rows
        .windows(3)
        .map(|w| w[0].1 - 2.0 * w[1].1 + w[2].1)
        .collect();
    let scale = second.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 {
        return 0;
    }
    let mut last = 0.0f64;
    let mut changes = 0;
    for v in second {
        if v.abs() <= 1e-9 * scale {
            continue;
        }
        if last != 0.0 && v.signum() != last.signum() {
            changes += 1;
        }
        last = v;
    }
    changes
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kan::{BasisKind, BasisSpec, KanWeights};
    use crate::params::Parameterized;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn layer() -> KanLayer<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        KanLayer::new(4, BasisSpec { kind: BasisKind::Rbf, count: 8 }, &mut rng).unwrap()
    }

    #[test]
    fn grid_validation() {
        assert!(CurveGrid::new(1.0, 1.0, 5).is_err());
        assert!(CurveGrid::new(0.0, 1.0, 1).is_err());
        assert!(CurveGrid::parse("a,b").is_err());
        let g = CurveGrid::parse("-2,2,101").unwrap();
        let xs = g.xs();
        assert_eq!(xs.len(), 101);
        assert_eq!((xs[0], xs[100]), (-2.0, 2.0));
        assert!(xs.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn zero_weight_curve_is_flat_zero() {
        let mut l = layer();
        for p in l.params_mut() {
            if p.name == "w" {
                p.tensor.fill(0.0);
            }
        }
        let rows = phi_curve_table(&l, 1, 2, CurveGrid::new(-3.0, 3.0, 17).unwrap()).unwrap();
        assert!(rows.iter().all(|r| r.1 == 0.0));
        assert_eq!(curvature_sign_changes(&rows), 0);
    }

    #[test]
    fn endpoint_grid_and_single_gaussian() {
        let mut l = layer();
        if let KanWeights::Rbf { w, .. } = &mut l.weights {
            w.fill(0.0);
            // edge (0,1) basis 3 only
            let (input, output) = (0, 1);
            w.data_mut()[(input * 4 + output) * 8 + 3] = 1.5;
        }
        let rows = phi_curve_table(&l, 0, 1, CurveGrid::new(-2.0, 2.0, 2).unwrap()).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!((rows[0].0, rows[1].0), (-2.0, 2.0));
        let rows = phi_curve_table(&l, 0, 1, CurveGrid::new(-2.0, 2.0, 41).unwrap()).unwrap();
        let mu = -2.0 + 3.0 * 4.0 / 7.0;
        let sigma = 4.0 / 7.0;
        for (x, y) in rows {
            let e = 1.5 * (-(x - mu) * (x - mu) / (2.0 * sigma * sigma)).exp();
            assert!((y - e).abs() < 1e-6);
        }
    }

    #[test]
    fn csv_has_header_and_nine_digits() {
        let s = curve_csv(&[(-1.0, 0.123456789123), (1.0, 2.0)]);
        let lines: Vec<&str> = s.lines().collect();
        assert_eq!(lines[0], "x,phi");
        assert_eq!(lines[1], "-1.00000000e0,1.23456789e-1");
    }

    #[test]
    fn oscillation_count_of_sine() {
        let rows: Vec<(f64, f64)> = (0..200)
            .map(|k| {
                let x = k as f64 * 0.05;
                (x, (3.0 * x).sin())
            })
            .collect();
        // sin(3x) on [0, 10) has 9 interior zeros of its second derivative
        assert_eq!(curvature_sign_changes(&rows), 9);
    }
}
