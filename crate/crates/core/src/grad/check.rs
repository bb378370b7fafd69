//! Central finite-difference certification of analytic gradients.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{Param, ParamMut, Parameterized};
use crate::tensor::Tensor;

/// Fixed sampling seed for coordinate selection.
pub const GRADCHECK_SEED: u64 = 0x71C;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Coordinates checked per parameter group at most.
    pub max_coords: usize,
    pub seed: u64,
    /// Step is `eps_scale * max(1, |theta|)`.
    pub eps_scale: f64,
    pub threshold: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            max_coords: 256,
            seed: GRADCHECK_SEED,
            eps_scale: 1e-5,
            threshold: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GroupCheck {
    pub name: String,
    pub checked: usize,
    pub total: usize,
    pub max_rel_err: f64,
    /// Flat index of the worst coordinate.
    pub worst: Option<usize>,
    pub analytic: f64,
    pub numeric: f64,
    /// Coordinates whose gradient sat below the difference quotient's
    /// rounding floor, so the denominator was raised to that floor.
    pub resolution_limited: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub eps_scale: f64,
    pub threshold: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.max_rel_err < self.threshold)
    }

    pub fn failures(&self) -> impl Iterator<Item = &GroupCheck> {
        self.groups.iter().filter(move |g| g.max_rel_err >= self.threshold)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let width = self.groups.iter().map(|g| g.name.len()).max().unwrap_or(5).max(5);
        writeln!(
            f,
            "{:<width$}  {:>12}  {:>9}  {:>11}  {:>11}  {:>7}  verdict",
            "group", "max_rel_err", "checked", "analytic", "numeric", "floored"
        )?;
        for g in &self.groups {
            let verdict = if g.max_rel_err < self.threshold { "pass" } else { "FAIL" };
            writeln!(
                f,
                "{:<width$}  {:>12.3e}  {:>9}  {:>11.3e}  {:>11.3e}  {:>7}  {verdict}",
                g.name,
                g.max_rel_err,
                format!("{}/{}", g.checked, g.total),
                g.analytic,
                g.numeric,
                g.resolution_limited
            )?;
        }
        write!(
            f,
            "eps = {:.0e}*max(1,|theta|), threshold {:.0e}: {}",
            self.eps_scale,
            self.threshold,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-8)
}

/// Units of roundoff allowed in each loss evaluation. The forward pass
/// accumulates a few ulps on top of the final rounding.
const ROUNDOFF_ULPS: f64 = 16.0;

/// Largest error a central difference can carry from rounding alone.
/// Below `noise / threshold` a gradient cannot be resolved to the relative
/// threshold in 64-bit arithmetic.
pub fn difference_noise(lp: f64, lm: f64, eps: f64) -> f64 {
    ROUNDOFF_ULPS * f64::EPSILON * lp.abs().max(lm.abs()) / (2.0 * eps)
}

/// [`relative_error`] with the denominator floor raised to what the
/// difference quotient can resolve. Returns the error and whether the raised
/// floor applied.
pub fn resolved_error(a: f64, n: f64, noise: f64, threshold: f64) -> (f64, bool) {
    let floor = (noise / threshold).max(1e-8);
    let scale = a.abs().max(n.abs());
    ((a - n).abs() / scale.max(floor), scale < floor && floor > 1e-8)
}

fn set_coord<M: Parameterized<f64>>(model: &mut M, group: usize, k: usize, v: f64) {
    let mut ps: Vec<ParamMut<'_, f64>> = model.params_mut();
    ps[group].tensor.data_mut()[k] = v;
}

/// Indices of the coordinates checked for a group of `n` scalars.
pub fn sample_coords(n: usize, max: usize, seed: u64, group: usize) -> Vec<usize> {
    if n <= max {
        return (0..n).collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (group as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    let mut idx = rand::seq::index::sample(&mut rng, n, max).into_vec();
    idx.sort_unstable();
    idx
}

/// Perturbs sampled coordinates of `model` by ±ε and compares the central
/// difference of `loss` with the matching entries of `analytic`. The model is
/// restored exactly afterwards.
pub fn finite_diff_check<M, L>(model: &mut M, analytic: &M, loss: L, opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    L: FnMut(&M) -> Result<f64>,
{
    finite_diff_check_groups(model, analytic, loss, opts, |_| true)
}

/// [`finite_diff_check`] restricted to the groups whose name passes `select`.
pub fn finite_diff_check_groups<M, L, S>(
    model: &mut M,
    analytic: &M,
    mut loss: L,
    opts: &GradCheckOptions,
    select: S,
) -> Result<GradCheckReport>
where
    M: Parameterized<f64>,
    L: FnMut(&M) -> Result<f64>,
    S: Fn(&str) -> bool,
{
    if !(opts.eps_scale > 0.0) {
        return Err(Error::Usage(format!("epsilon must be positive, got {}", opts.eps_scale)));
    }
    let grads: Vec<Param<'_, f64>> = analytic.params();
    let shapes: Vec<(String, Vec<usize>)> = model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
        .collect();
    if grads.len() != shapes.len() {
        return Err(Error::Dimension("gradient and parameter lists differ in length".into()));
    }
    let mut groups = Vec::with_capacity(shapes.len());
    for (gi, ((name, shape), g)) in shapes.iter().zip(&grads).enumerate() {
        if g.tensor.shape() != shape.as_slice() {
            return Err(Error::Dimension(format!("gradient of {name} has the wrong shape")));
        }
        if !select(name) {
            continue;
        }
        let total: usize = shape.iter().product();
        let coords = sample_coords(total, opts.max_coords, opts.seed, gi);
        let mut check = GroupCheck {
            name: name.clone(),
            checked: coords.len(),
            total,
            max_rel_err: 0.0,
            worst: None,
            analytic: 0.0,
            numeric: 0.0,
            resolution_limited: 0,
        };
        for k in coords {
            let theta = model.params()[gi].tensor.data()[k];
            let eps = opts.eps_scale * theta.abs().max(1.0);
            set_coord(model, gi, k, theta + eps);
            let lp = loss(model);
            set_coord(model, gi, k, theta - eps);
            let lm = loss(model);
            set_coord(model, gi, k, theta);
            let (lp, lm) = (lp?, lm?);
            if !lp.is_finite() || !lm.is_finite() {
                return Err(Error::Numerical(format!("non-finite loss perturbing {name}[{k}]")));
            }
            let n = (lp - lm) / (2.0 * eps);
            let a = g.tensor.data()[k];
            let (r, limited) = resolved_error(a, n, difference_noise(lp, lm, eps), opts.threshold);
            check.resolution_limited += limited as usize;
            if check.worst.is_none() || r > check.max_rel_err {
                check.max_rel_err = r;
                check.worst = Some(k);
                check.analytic = a;
                check.numeric = n;
            }
        }
        groups.push(check);
    }
    Ok(GradCheckReport {
        groups,
        eps_scale: opts.eps_scale,
        threshold: opts.threshold,
    })
}

/// A bare tensor treated as a single parameter group named `value`.
impl<T: crate::Scalar> Parameterized<T> for Tensor<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        crate::params::push_param!(out, prefix, "value", self, true);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        crate::params::push_param_mut!(out, prefix, "value", self, true);
    }
}
