//! MultiPatch-RBFKAN token mixer.
//!
//! ```text
//! local  = axis_mix(unpatchify(kan(patchify(x))))
//! global = Q · P · x          (per channel, over the N = H·W tokens)
//! out    = local + global
//! ```
//!
//! The axis mix blends a horizontal and a vertical depthwise convolution
//! with two softmax weights computed per image from pooled features.
//! Either branch can be switched off for ablations; the output shape always
//! equals the input shape.

use rand::Rng;

use crate::error::{Error, Result};
use crate::grad::ops as adj;
use crate::kan::{BasisSpec, KanLayer};
use crate::params::{push_param, push_param_mut, Param, ParamMut, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{self, matmul_into, Axis, Tensor};

/// Shape and hyperparameters of one mixer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixerConfig {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Patch side `p`; the KAN width is `F = p²`.
    pub patch: usize,
    pub basis: BasisSpec,
    /// Depthwise kernel length `k` (odd).
    pub kernel: usize,
    /// Global rank `r`; 0 disables the low-rank path.
    pub rank: usize,
    pub axis_mix: bool,
    /// Independent KAN layers across channel groups.
    pub kan_groups: usize,
}

impl MixerConfig {
    pub fn tokens(&self) -> usize {
        self.height * self.width
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn reweight_hidden(&self) -> usize {
        (self.channels / 4).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, p) = (self.height, self.width, self.patch);
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::Shape(format!(
                "feature map H={h}, W={w} is not divisible by patch size p={p}"
            )));
        }
        if self.channels == 0 || self.kan_groups == 0 || self.channels % self.kan_groups != 0 {
            return Err(Error::Config(format!(
                "{} channels cannot be split into {} KAN groups",
                self.channels, self.kan_groups
            )));
        }
        if self.axis_mix && self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "depthwise kernel length must be odd, got {}",
                self.kernel
            )));
        }
        let n = self.tokens();
        if self.rank > n {
            return Err(Error::Config(format!("global rank r={} exceeds N={n}", self.rank)));
        }
        if self.rank > 0 && 2 * self.rank >= n {
            log::warn!("global rank r={} is not below N/2 for N={n}", self.rank);
        }
        self.basis.validate()
    }
}

/// Feature map regrouped as `[B, C, N/F, F]`, one flattened patch per row.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchView<T> {
    pub patches: Tensor<T>,
    pub height: usize,
    pub width: usize,
    pub patch: usize,
}

/// Splits `[B,C,H,W]` into non-overlapping `p×p` patches, row-major over
/// patches and row-major within a patch.
pub fn patchify<T: Scalar>(x: &Tensor<T>, p: usize) -> Result<PatchView<T>> {
    x.expect_rank(4, "patchify")?;
    let (b, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "cannot patchify H={h}, W={w} with p={p}"
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let plane = h * w;
    let src = x.data();
    let mut out = Vec::with_capacity(x.len());
    for bc in 0..b * c {
        let base = bc * plane;
        for pi in 0..ph {
            for pj in 0..pw {
                for u in 0..p {
                    let row = base + (pi * p + u) * w + pj * p;
                    out.extend_from_slice(&src[row..row + p]);
                }
            }
        }
    }
    Ok(PatchView {
        patches: Tensor::new(&[b, c, ph * pw, p * p], out)?,
        height: h,
        width: w,
        patch: p,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(view: &PatchView<T>) -> Result<Tensor<T>> {
    let s = view.patches.shape();
    let (b, c) = (s[0], s[1]);
    let (h, w, p) = (view.height, view.width, view.patch);
    if s[2] * s[3] != h * w || s[3] != p * p {
        return Err(Error::Shape(format!(
            "patch tensor {s:?} does not tile a {h}x{w} map with p={p}"
        )));
    }
    let (ph, pw) = (h / p, w / p);
    let plane = h * w;
    let src = view.patches.data();
    let mut out = vec![T::zero(); src.len()];
    let mut k = 0;
    for bc in 0..b * c {
        let base = bc * plane;
        for pi in 0..ph {
            for pj in 0..pw {
                for u in 0..p {
                    let row = base + (pi * p + u) * w + pj * p;
                    out[row..row + p].copy_from_slice(&src[k..k + p]);
                    k += p;
                }
            }
        }
    }
    Tensor::new(&[b, c, h, w], out)
}

/// Applies the KAN layers to every patch; channel `c` uses layer
/// `c / (C / groups)`.
pub fn patch_kan_forward<T: Scalar>(view: &PatchView<T>, layers: &[KanLayer<T>]) -> Result<PatchView<T>> {
    let s = view.patches.shape();
    let (b, c, f) = (s[0], s[1], s[3]);
    check_groups(c, f, layers)?;
    let per_group = c / layers.len();
    let chan = s[2] * f;
    let mut out = vec![T::zero(); view.patches.len()];
    for bi in 0..b {
        for ci in 0..c {
            let r = (bi * c + ci) * chan..(bi * c + ci + 1) * chan;
            layers[ci / per_group].forward_rows(&view.patches.data()[r.clone()], &mut out[r]);
        }
    }
    Ok(PatchView {
        patches: Tensor::new(s, out)?,
        ..*view
    })
}

fn check_groups<T: Scalar>(c: usize, f: usize, layers: &[KanLayer<T>]) -> Result<()> {
    if layers.is_empty() || c % layers.len() != 0 {
        return Err(Error::Dimension(format!(
            "{c} channels cannot be split across {} KAN layers",
            layers.len()
        )));
    }
    if let Some(l) = layers.iter().find(|l| l.dim() != f) {
        return Err(Error::Shape(format!(
            "patch dimension {f} does not match KAN width {}",
            l.dim()
        )));
    }
    Ok(())
}

/// Backward of [`patch_kan_forward`]; accumulates into `grads`.
pub fn patch_kan_backward<T: Scalar>(
    view: &PatchView<T>,
    layers: &[KanLayer<T>],
    dy: &PatchView<T>,
    grads: &mut [KanLayer<T>],
) -> Result<PatchView<T>> {
    let s = view.patches.shape();
    let (b, c, f) = (s[0], s[1], s[3]);
    check_groups(c, f, layers)?;
    if dy.patches.shape() != s {
        return Err(Error::Dimension(format!(
            "patch_kan_backward: gradient {:?} vs input {s:?}",
            dy.patches.shape()
        )));
    }
    let per_group = c / layers.len();
    let chan = s[2] * f;
    let mut dx = vec![T::zero(); view.patches.len()];
    for bi in 0..b {
        for ci in 0..c {
            let g = ci / per_group;
            let r = (bi * c + ci) * chan..(bi * c + ci + 1) * chan;
            layers[g].backward_rows(
                &view.patches.data()[r.clone()],
                &dy.patches.data()[r.clone()],
                &mut dx[r],
                &mut grads[g],
            );
        }
    }
    Ok(PatchView {
        patches: Tensor::new(s, dx)?,
        ..*view
    })
}

/// Direction-sensitive local mixing parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisMix<T> {
    pub kernel_h: Tensor<T>,
    pub kernel_v: Tensor<T>,
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

impl<T: Scalar> AxisMix<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, kernel: usize, hidden: usize, rng: &mut R) -> Self {
        let kb = 1.0 / (kernel as f64).sqrt();
        let b1 = 1.0 / (channels as f64).sqrt();
        let b2 = 1.0 / (hidden as f64).sqrt();
        AxisMix {
            kernel_h: Tensor::uniform(&[channels, kernel], -kb, kb, rng),
            kernel_v: Tensor::uniform(&[channels, kernel], -kb, kb, rng),
            fc1_w: Tensor::uniform(&[hidden, channels], -b1, b1, rng),
            fc1_b: Tensor::zeros(&[hidden]),
            fc2_w: Tensor::uniform(&[2, hidden], -b2, b2, rng),
            fc2_b: Tensor::zeros(&[2]),
        }
    }
}

/// Output, patch view and axis cache of one mixer pass.
type Forward<T> = (Tensor<T>, PatchView<T>, Option<AxisMixCache<T>>);

/// Saved activations of [`axis_mix_forward`].
#[derive(Clone, Debug)]
pub struct AxisMixCache<T> {
    input: Tensor<T>,
    zh: Tensor<T>,
    zv: Tensor<T>,
    pooled: Tensor<T>,
    pre: Tensor<T>,
    /// `[B, 2]` blend weights `(α_h, α_w)`.
    pub alpha: Tensor<T>,
}

/// `ŷ = α_h·DW_h(y) + α_w·DW_w(y)` with `[α_h, α_w] = softmax(MLP(GAP(y)))`
/// per image. Uses `α_w = 1 − α_h`, so the blend costs one multiply.
pub fn axis_mix_forward<T: Scalar>(y: &Tensor<T>, p: &AxisMix<T>) -> Result<(Tensor<T>, AxisMixCache<T>)> {
    let zh = tensor::depthwise_conv_axis(y, &p.kernel_h, Axis::Horizontal)?;
    let zv = tensor::depthwise_conv_axis(y, &p.kernel_v, Axis::Vertical)?;
    let pooled = tensor::global_avg_pool(y)?;
    let pre = tensor::linear(&pooled, &p.fc1_w, &p.fc1_b)?;
    let act = pre.map(tensor::relu);
    let logits = tensor::linear(&act, &p.fc2_w, &p.fc2_b)?;
    let b = y.shape()[0];
    let mut alpha = Vec::with_capacity(2 * b);
    for bi in 0..b {
        let l = &logits.data()[2 * bi..2 * bi + 2];
        if !l[0].is_finite() || !l[1].is_finite() {
            return Err(Error::Numerical(format!("axis-mix logits for item {bi} are not finite")));
        }
        alpha.extend(tensor::softmax_slice(l));
    }
    let per_item = y.len() / b;
    let mut out = Vec::with_capacity(y.len());
    for bi in 0..b {
        let ah = alpha[2 * bi];
        let r = bi * per_item..(bi + 1) * per_item;
        for (&h, &v) in zh.data()[r.clone()].iter().zip(&zv.data()[r]) {
            out.push(v + ah * (h - v));
        }
    }
    Ok((
        Tensor::new(y.shape(), out)?,
        AxisMixCache {
            input: y.clone(),
            zh,
            zv,
            pooled,
            pre,
            alpha: Tensor::new(&[b, 2], alpha)?,
        },
    ))
}

/// Backward of [`axis_mix_forward`]. Also returns the `[B,2]` gradient that
/// reached the reweighting logits.
pub fn axis_mix_backward<T: Scalar>(
    p: &AxisMix<T>,
    cache: &AxisMixCache<T>,
    dout: &Tensor<T>,
    grads: &mut AxisMix<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let y = &cache.input;
    if dout.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "axis_mix_backward: gradient {:?} vs output {:?}",
            dout.shape(),
            y.shape()
        )));
    }
    let b = y.shape()[0];
    let per_item = y.len() / b;
    let mut dzh = Vec::with_capacity(y.len());
    let mut dzv = Vec::with_capacity(y.len());
    let mut dlogits = Vec::with_capacity(2 * b);
    for bi in 0..b {
        let ah = cache.alpha.data()[2 * bi];
        let r = bi * per_item..(bi + 1) * per_item;
        let mut dah = T::zero();
        for ((&g, &h), &v) in dout.data()[r.clone()]
            .iter()
            .zip(&cache.zh.data()[r.clone()])
            .zip(&cache.zv.data()[r])
        {
            dah += g * (h - v);
            dzh.push(ah * g);
            dzv.push((T::one() - ah) * g);
        }
        let alpha = &cache.alpha.data()[2 * bi..2 * bi + 2];
        dlogits.extend(adj::softmax_backward(alpha, &[dah, T::zero()]));
    }
    let dzh = Tensor::new(y.shape(), dzh)?;
    let dzv = Tensor::new(y.shape(), dzv)?;
    let dlogits = Tensor::new(&[b, 2], dlogits)?;

    let act = cache.pre.map(tensor::relu);
    let (dact, dw2, db2) = adj::linear_backward(&act, &p.fc2_w, &dlogits)?;
    grads.fc2_w.add_assign(&dw2)?;
    grads.fc2_b.add_assign(&db2)?;
    let mut dpre = dact;
    for (g, &z) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        if !(z > T::zero()) {
            *g = T::zero();
        }
    }
    let (dpooled, dw1, db1) = adj::linear_backward(&cache.pooled, &p.fc1_w, &dpre)?;
    grads.fc1_w.add_assign(&dw1)?;
    grads.fc1_b.add_assign(&db1)?;

    let (mut dy, dkh) = adj::depthwise_conv_axis_backward(y, &p.kernel_h, Axis::Horizontal, &dzh)?;
    grads.kernel_h.add_assign(&dkh)?;
    let (dyv, dkv) = adj::depthwise_conv_axis_backward(y, &p.kernel_v, Axis::Vertical, &dzv)?;
    grads.kernel_v.add_assign(&dkv)?;
    dy.add_assign(&dyv)?;
    dy.add_assign(&adj::global_avg_pool_backward(y.shape(), &dpooled)?)?;
    Ok((dy, dlogits))
}

/// Rank-`r` spatial map shared by all channels.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank<T> {
    /// `[r, N]`
    pub p: Tensor<T>,
    /// `[N, r]`
    pub q: Tensor<T>,
}

impl<T: Scalar> LowRank<T> {
    /// `P ~ U(±1/√N)`, `Q ~ U(±1/√r)`.
    pub fn new<R: Rng + ?Sized>(tokens: usize, rank: usize, rng: &mut R) -> Self {
        let bp = 1.0 / (tokens as f64).sqrt();
        let bq = 1.0 / (rank as f64).sqrt();
        LowRank {
            p: Tensor::uniform(&[rank, tokens], -bp, bp, rng),
            q: Tensor::uniform(&[tokens, rank], -bq, bq, rng),
        }
    }

    pub fn rank(&self) -> usize {
        self.p.shape()[0]
    }
}

/// Maps every channel's token vector `v` to `Q(Pv)`.
pub fn lowrank_global_forward<T: Scalar>(y: &Tensor<T>, g: &LowRank<T>) -> Result<Tensor<T>> {
    y.expect_rank(4, "lowrank_global_forward")?;
    let (b, c) = (y.shape()[0], y.shape()[1]);
    let n = y.shape()[2] * y.shape()[3];
    let r = g.rank();
    if g.p.shape() != [r, n] || g.q.shape() != [n, r] {
        return Err(Error::Shape(format!(
            "low-rank factors P {:?}, Q {:?} do not match N = H·W = {n}",
            g.p.shape(),
            g.q.shape()
        )));
    }
    let pt = tensor::transpose(&g.p)?;
    let qt = tensor::transpose(&g.q)?;
    let mut out = vec![T::zero(); y.len()];
    let mut z = vec![T::zero(); c * r];
    for bi in 0..b {
        let span = bi * c * n..(bi + 1) * c * n;
        z.fill(T::zero());
        matmul_into(&y.data()[span.clone()], pt.data(), &mut z, c, n, r);
        matmul_into(&z, qt.data(), &mut out[span], c, r, n);
    }
    Tensor::new(y.shape(), out)
}

/// Backward of [`lowrank_global_forward`]; accumulates `dP`, `dQ`.
pub fn lowrank_global_backward<T: Scalar>(
    y: &Tensor<T>,
    g: &LowRank<T>,
    dout: &Tensor<T>,
    grads: &mut LowRank<T>,
) -> Result<Tensor<T>> {
    if dout.shape() != y.shape() {
        return Err(Error::Dimension(format!(
            "lowrank_global_backward: gradient {:?} vs output {:?}",
            dout.shape(),
            y.shape()
        )));
    }
    let (b, c) = (y.shape()[0], y.shape()[1]);
    let n = y.shape()[2] * y.shape()[3];
    let r = g.rank();
    let pt = tensor::transpose(&g.p)?;
    let mut dy = vec![T::zero(); y.len()];
    for bi in 0..b {
        let span = bi * c * n..(bi + 1) * c * n;
        let yb = Tensor::new(&[c, n], y.data()[span.clone()].to_vec())?;
        let gb = Tensor::new(&[c, n], dout.data()[span.clone()].to_vec())?;
        let mut z = vec![T::zero(); c * r];
        matmul_into(yb.data(), pt.data(), &mut z, c, n, r);
        let z = Tensor::new(&[c, r], z)?;
        let dz = tensor::matmul(&gb, &g.q)?;
        grads.q.add_assign(&tensor::matmul(&tensor::transpose(&gb)?, &z)?)?;
        grads.p.add_assign(&tensor::matmul(&tensor::transpose(&dz)?, &yb)?)?;
        matmul_into(dz.data(), g.p.data(), &mut dy[span], c, r, n);
    }
    Tensor::new(y.shape(), dy)
}

/// Full mixer parameter bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct Mixer<T> {
    config: MixerConfig,
    pub kan: Vec<KanLayer<T>>,
    pub axis: Option<AxisMix<T>>,
    pub global: Option<LowRank<T>>,
}

/// Saved activations of [`Mixer::forward_cached`].
#[derive(Clone, Debug)]
pub struct MixerCache<T> {
    input: Tensor<T>,
    patches: PatchView<T>,
    axis: Option<AxisMixCache<T>>,
}

impl<T> MixerCache<T> {
    pub fn alpha(&self) -> Option<&Tensor<T>> {
        self.axis.as_ref().map(|a| &a.alpha)
    }
}

impl<T: Scalar> Mixer<T> {
    pub fn new<R: Rng + ?Sized>(config: MixerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let kan = (0..config.kan_groups)
            .map(|_| KanLayer::new(config.patch_dim(), config.basis, rng))
            .collect::<Result<Vec<_>>>()?;
        let axis = config
            .axis_mix
            .then(|| AxisMix::new(config.channels, config.kernel, config.reweight_hidden(), rng));
        let global = (config.rank > 0).then(|| LowRank::new(config.tokens(), config.rank, rng));
        Ok(Mixer { config, kan, axis, global })
    }

    pub fn config(&self) -> &MixerConfig {
        &self.config
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, MixerCache<T>)> {
        let (out, patches, axis) = self.run(x)?;
        Ok((
            out,
            MixerCache {
                input: x.clone(),
                patches,
                axis,
            },
        ))
    }

    fn run(&self, x: &Tensor<T>) -> Result<Forward<T>> {
        x.expect_rank(4, "mixer input")?;
        let c = &self.config;
        if x.shape()[1..] != [c.channels, c.height, c.width] {
            return Err(Error::Shape(format!(
                "mixer configured for [B,{},{},{}] got {:?}",
                c.channels,
                c.height,
                c.width,
                x.shape()
            )));
        }
        let patches = patchify(x, c.patch)?;
        let y = unpatchify(&patch_kan_forward(&patches, &self.kan)?)?;
        let (mut out, axis) = match &self.axis {
            Some(a) => {
                let (o, cache) = axis_mix_forward(&y, a)?;
                (o, Some(cache))
            }
            None => (y, None),
        };
        if let Some(g) = &self.global {
            out.add_assign(&lowrank_global_forward(x, g)?)?;
        }
        Ok((out, patches, axis))
    }

    /// Returns the input gradient; parameter gradients accumulate into `grads`.
    pub fn backward(&self, cache: MixerCache<T>, dout: &Tensor<T>, grads: &mut Mixer<T>) -> Result<Tensor<T>> {
        let dy = match (&self.axis, cache.axis, &mut grads.axis) {
            (Some(a), Some(ac), Some(ga)) => axis_mix_backward(a, &ac, dout, ga)?.0,
            (None, None, None) => dout.clone(),
            _ => return Err(Error::Usage("mixer cache does not match the mixer structure".into())),
        };
        let dview = patchify(&dy, self.config.patch)?;
        let dpatch = patch_kan_backward(&cache.patches, &self.kan, &dview, &mut grads.kan)?;
        let mut dx = unpatchify(&dpatch)?;
        if let (Some(g), Some(gg)) = (&self.global, &mut grads.global) {
            dx.add_assign(&lowrank_global_backward(&cache.input, g, dout, gg)?)?;
        }
        Ok(dx)
    }
}

impl<T: Scalar> Parameterized<T> for Mixer<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        for (i, k) in self.kan.iter().enumerate() {
            k.collect(&crate::params::join(prefix, &format!("kan{i}")), out);
        }
        if let Some(a) = &self.axis {
            push_param!(out, prefix, "axis.kernel_h", &a.kernel_h, true);
            push_param!(out, prefix, "axis.kernel_v", &a.kernel_v, true);
            push_param!(out, prefix, "axis.fc1.weight", &a.fc1_w, true);
            push_param!(out, prefix, "axis.fc1.bias", &a.fc1_b, false);
            push_param!(out, prefix, "axis.fc2.weight", &a.fc2_w, true);
            push_param!(out, prefix, "axis.fc2.bias", &a.fc2_b, false);
        }
        if let Some(g) = &self.global {
            push_param!(out, prefix, "global.p", &g.p, true);
            push_param!(out, prefix, "global.q", &g.q, true);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        for (i, k) in self.kan.iter_mut().enumerate() {
            k.collect_mut(&crate::params::join(prefix, &format!("kan{i}")), out);
        }
        if let Some(a) = &mut self.axis {
            push_param_mut!(out, prefix, "axis.kernel_h", &mut a.kernel_h, true);
            push_param_mut!(out, prefix, "axis.kernel_v", &mut a.kernel_v, true);
            push_param_mut!(out, prefix, "axis.fc1.weight", &mut a.fc1_w, true);
            push_param_mut!(out, prefix, "axis.fc1.bias", &mut a.fc1_b, false);
            push_param_mut!(out, prefix, "axis.fc2.weight", &mut a.fc2_w, true);
            push_param_mut!(out, prefix, "axis.fc2.bias", &mut a.fc2_b, false);
        }
        if let Some(g) = &mut self.global {
            push_param_mut!(out, prefix, "global.p", &mut g.p, true);
            push_param_mut!(out, prefix, "global.q", &mut g.q, true);
        }
    }
}
