//! Four-stage hierarchical classifier: convolutional stem, stacks of
//! pre-norm blocks (mixer + channel MLP), strided-conv downsampling between
//! stages, then pooling, a final norm and a linear head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grad::ops::{global_avg_pool_backward, linear_backward, norm_backward, patch_conv_backward};
use crate::grad::{GradTape, OpId};
use crate::kan::{BasisKind, BasisSpec};
use crate::mixer::{Mixer, MixerCache, MixerConfig};
use crate::params::{join, push_param, push_param_mut, Param, ParamMut, Parameterized};
use crate::scalar::Scalar;
use crate::tensor::{
    ensure_finite, gelu, gelu_grad, global_avg_pool, linear, matmul_into, matmul_nt_into, matmul_tn_into,
    norm_kernel, patch_conv, NormLayout, NormStats, Tensor, LN_EPS,
};

pub const NUM_STAGES: usize = 4;

fn default_in_channels() -> usize {
    3
}
fn default_stem() -> usize {
    4
}
fn default_down() -> usize {
    2
}
fn default_basis() -> BasisKind {
    BasisKind::Rbf
}
fn default_basis_count() -> usize {
    8
}
fn default_kernel() -> usize {
    5
}
fn default_ratio() -> usize {
    4
}
fn default_true() -> bool {
    true
}
fn default_groups() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub depth: usize,
    pub channels: usize,
    pub patch: usize,
    #[serde(default = "default_basis")]
    pub basis: BasisKind,
    #[serde(default = "default_basis_count")]
    pub basis_count: usize,
    /// Rank of the global map; omitted means the largest `r ≤ 64` below N/2, zero disables it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rank: Option<usize>,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_true")]
    pub axis_mix: bool,
    #[serde(default = "default_groups")]
    pub kan_groups: usize,
}

/// Model description, read from and written to TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default)]
    pub name: String,
    pub num_classes: usize,
    /// Input `[H, W]`.
    pub resolution: [usize; 2],
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_stem")]
    pub stem_patch: usize,
    #[serde(default = "default_down")]
    pub down_patch: usize,
    #[serde(default)]
    pub seed: u64,
    pub stages: Vec<StageConfig>,
}

impl BackboneConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: BackboneConfig = toml::from_str(text).map_err(|e| Error::Config(format!("invalid model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Canonical TOML text; equal configs give equal text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_toml().as_bytes()).into()
    }

    /// Spatial size `(H_s, W_s)` of stage `s` (zero-based).
    pub fn stage_resolution(&self, s: usize) -> (usize, usize) {
        let f = self.stem_patch * self.down_patch.pow(s as u32);
        (self.resolution[0] / f, self.resolution[1] / f)
    }

    /// Explicit rank, or the largest `r ≤ 64` with `2r < N`. That is zero
    /// (no global path) on grids of one or two tokens.
    pub fn stage_rank(&self, s: usize) -> usize {
        let (h, w) = self.stage_resolution(s);
        self.stages[s].rank.unwrap_or_else(|| ((h * w).saturating_sub(1) / 2).min(64))
    }

    pub fn mixer_config(&self, s: usize) -> MixerConfig {
        let st = &self.stages[s];
        let (h, w) = self.stage_resolution(s);
        MixerConfig {
            channels: st.channels,
            height: h,
            width: w,
            patch: st.patch,
            basis: BasisSpec { kind: st.basis, count: st.basis_count },
            kernel: st.kernel,
            rank: self.stage_rank(s),
            axis_mix: st.axis_mix,
            kan_groups: st.kan_groups,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.stages.len() != NUM_STAGES {
            return bad(format!("expected exactly {NUM_STAGES} stages, found {}", self.stages.len()));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        if self.in_channels == 0 || self.stem_patch == 0 || self.down_patch < 2 {
            return bad("in_channels and stem_patch must be positive and down_patch at least 2".into());
        }
        let [h0, w0] = self.resolution;
        let total = self.stem_patch * self.down_patch.pow(NUM_STAGES as u32 - 1);
        if h0 == 0 || w0 == 0 || h0 % total != 0 || w0 % total != 0 {
            return bad(format!(
                "resolution {h0}x{w0} must be divisible by {total} (stem {} then three /{} downsamples)",
                self.stem_patch, self.down_patch
            ));
        }
        for (s, st) in self.stages.iter().enumerate() {
            if st.depth == 0 || st.channels == 0 || st.mlp_ratio == 0 {
                return bad(format!("stage {}: depth, channels and mlp_ratio must be positive", s + 1));
            }
            if s > 0 && st.channels < self.stages[s - 1].channels {
                return bad(format!("stage {}: channels must be non-decreasing", s + 1));
            }
            let (h, w) = self.stage_resolution(s);
            debug_assert_eq!(h * self.stem_patch * self.down_patch.pow(s as u32), h0);
            if st.patch == 0 || h % st.patch != 0 || w % st.patch != 0 {
                return bad(format!(
                    "stage {}: H={h}, W={w} not divisible by patch p={}",
                    s + 1,
                    st.patch
                ));
            }
            self.mixer_config(s)
                .validate()
                .map_err(|e| Error::Config(format!("stage {}: {e}", s + 1)))?;
        }
        Ok(())
    }

    /// Copy with a different input size (used by resolution sweeps).
    pub fn with_resolution(&self, h: usize, w: usize) -> Self {
        let mut c = self.clone();
        c.resolution = [h, w];
        c
    }

    /// Copy with the axis-mixing path and/or the global path removed everywhere.
    pub fn ablated(&self, drop_axis_mix: bool, drop_global: bool) -> Self {
        let mut c = self.clone();
        for st in &mut c.stages {
            if drop_axis_mix {
                st.axis_mix = false;
            }
            if drop_global {
                st.rank = Some(0);
            }
        }
        c
    }

    /// Order in which a forward pass records its operations.
    pub fn op_sequence(&self) -> Vec<OpId> {
        let mut ops = vec![OpId::Stem];
        for (s, st) in self.stages.iter().enumerate() {
            if s > 0 {
                ops.push(OpId::Downsample { stage: s });
            }
            ops.extend((0..st.depth).map(|index| OpId::Block { stage: s, index }));
        }
        ops.push(OpId::Head);
        ops
    }
}

fn uniform_init<T: Scalar, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Strided non-overlapping convolution followed by a channel layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvNorm<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ConvNormCache<T> {
    input: Tensor<T>,
    stats: NormStats<T>,
}

impl<T: Scalar> ConvNorm<T> {
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, stride: usize, rng: &mut R) -> Self {
        ConvNorm {
            weight: uniform_init(&[cout, cin, stride, stride], cin * stride * stride, rng),
            bias: Tensor::zeros(&[cout]),
            gamma: Tensor::full(&[cout], T::one()),
            beta: Tensor::zeros(&[cout]),
        }
    }

    pub fn stride(&self) -> usize {
        self.weight.shape()[2]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ConvNormCache<T>)> {
        let s = self.stride();
        if x.rank() == 4 && (x.shape()[2] % s != 0 || x.shape()[3] % s != 0) {
            return Err(Error::Shape(format!(
                "H={}, W={} not divisible by stride {s}",
                x.shape()[2],
                x.shape()[3]
            )));
        }
        let y = patch_conv(x, &self.weight, &self.bias)?;
        let layout = NormLayout::nchw(y.shape());
        let (out, stats) = norm_kernel(&y, &self.gamma, &self.beta, LN_EPS, layout)?;
        Ok((out, ConvNormCache { input: x.clone(), stats }))
    }

    pub fn backward(&self, cache: &ConvNormCache<T>, dout: &Tensor<T>, grads: &mut ConvNorm<T>) -> Result<Tensor<T>> {
        let (dy, dg, db) = norm_backward(&cache.stats, &self.gamma, dout, NormLayout::nchw(dout.shape()))?;
        grads.gamma.add_assign(&dg)?;
        grads.beta.add_assign(&db)?;
        let (dx, dw, dbias) = patch_conv_backward(&cache.input, &self.weight, &dy)?;
        grads.weight.add_assign(&dw)?;
        grads.bias.add_assign(&dbias)?;
        Ok(dx)
    }
}

impl<T: Scalar> Parameterized<T> for ConvNorm<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        push_param!(out, prefix, "conv.weight", &self.weight, true);
        push_param!(out, prefix, "conv.bias", &self.bias, false);
        push_param!(out, prefix, "norm.gamma", &self.gamma, false);
        push_param!(out, prefix, "norm.beta", &self.beta, false);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_param_mut!(out, prefix, "conv.weight", &mut self.weight, true);
        push_param_mut!(out, prefix, "conv.bias", &mut self.bias, false);
        push_param_mut!(out, prefix, "norm.gamma", &mut self.gamma, false);
        push_param_mut!(out, prefix, "norm.beta", &mut self.beta, false);
    }
}

/// Pre-norm block: `x1 = x + mixer(LN(x))`, `out = x1 + mlp(LN(x1))`.
#[derive(Clone, Debug, PartialEq)]
pub struct Block<T> {
    pub norm1_gamma: Tensor<T>,
    pub norm1_beta: Tensor<T>,
    pub mixer: Mixer<T>,
    pub norm2_gamma: Tensor<T>,
    pub norm2_beta: Tensor<T>,
    /// `[eC, C]`
    pub fc1_w: Tensor<T>,
    pub fc1_b: Tensor<T>,
    /// `[C, eC]`
    pub fc2_w: Tensor<T>,
    pub fc2_b: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct BlockCache<T> {
    stats1: NormStats<T>,
    mixer: MixerCache<T>,
    stats2: NormStats<T>,
    normed2: Tensor<T>,
    hidden_pre: Vec<T>,
}

impl<T> BlockCache<T> {
    pub fn mixer(&self) -> &MixerCache<T> {
        &self.mixer
    }
}

impl<T: Scalar> Block<T> {
    pub fn new<R: Rng + ?Sized>(mixer: MixerConfig, mlp_ratio: usize, rng: &mut R) -> Result<Self> {
        let c = mixer.channels;
        let hdim = c * mlp_ratio;
        Ok(Block {
            norm1_gamma: Tensor::full(&[c], T::one()),
            norm1_beta: Tensor::zeros(&[c]),
            mixer: Mixer::new(mixer, rng)?,
            norm2_gamma: Tensor::full(&[c], T::one()),
            norm2_beta: Tensor::zeros(&[c]),
            fc1_w: uniform_init(&[hdim, c], c, rng),
            fc1_b: Tensor::zeros(&[hdim]),
            fc2_w: uniform_init(&[c, hdim], hdim, rng),
            fc2_b: Tensor::zeros(&[c]),
        })
    }

    pub fn channels(&self) -> usize {
        self.fc1_w.shape()[1]
    }

    pub fn hidden(&self) -> usize {
        self.fc1_w.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BlockCache<T>)> {
        let layout = NormLayout::nchw(x.shape());
        let (n1, stats1) = norm_kernel(x, &self.norm1_gamma, &self.norm1_beta, LN_EPS, layout)?;
        let (m, mixer) = self.mixer.forward_cached(&n1)?;
        let x1 = x.add(&m)?;
        let (n2, stats2) = norm_kernel(&x1, &self.norm2_gamma, &self.norm2_beta, LN_EPS, layout)?;
        let (mlp, hidden_pre) = self.channel_mlp(&n2);
        let out = x1.add(&Tensor::new(x.shape(), mlp)?)?;
        Ok((out, BlockCache { stats1, mixer, stats2, normed2: n2, hidden_pre }))
    }

    /// Per-pixel `C → eC → C` with GELU; returns the output and the pre-activation.
    fn channel_mlp(&self, x: &Tensor<T>) -> (Vec<T>, Vec<T>) {
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let hw: usize = x.shape()[2..].iter().product();
        let hd = self.hidden();
        let mut pre = vec![T::zero(); b * hd * hw];
        let mut out = vec![T::zero(); b * c * hw];
        let mut act = vec![T::zero(); hd * hw];
        for bi in 0..b {
            let xb = &x.data()[bi * c * hw..(bi + 1) * c * hw];
            let pb = &mut pre[bi * hd * hw..(bi + 1) * hd * hw];
            for (row, &bias) in pb.chunks_mut(hw).zip(self.fc1_b.data()) {
                row.fill(bias);
            }
            matmul_into(self.fc1_w.data(), xb, pb, hd, c, hw);
            for (a, &p) in act.iter_mut().zip(pb.iter()) {
                *a = gelu(p);
            }
            let ob = &mut out[bi * c * hw..(bi + 1) * c * hw];
            for (row, &bias) in ob.chunks_mut(hw).zip(self.fc2_b.data()) {
                row.fill(bias);
            }
            matmul_into(self.fc2_w.data(), &act, ob, c, hd, hw);
        }
        (out, pre)
    }

    pub fn backward(&self, cache: BlockCache<T>, dout: &Tensor<T>, grads: &mut Block<T>) -> Result<Tensor<T>> {
        let shape = dout.shape().to_vec();
        let layout = NormLayout::nchw(&shape);
        let (b, c) = (shape[0], shape[1]);
        let hw: usize = shape[2..].iter().product();
        let hd = self.hidden();

        // channel MLP branch
        let mut dn2 = vec![T::zero(); b * c * hw];
        let mut act = vec![T::zero(); hd * hw];
        let mut dpre = vec![T::zero(); hd * hw];
        for bi in 0..b {
            let g = &dout.data()[bi * c * hw..(bi + 1) * c * hw];
            let pre = &cache.hidden_pre[bi * hd * hw..(bi + 1) * hd * hw];
            let xin = &cache.normed2.data()[bi * c * hw..(bi + 1) * c * hw];
            for (a, &p) in act.iter_mut().zip(pre) {
                *a = gelu(p);
            }
            for (db, row) in grads.fc2_b.data_mut().iter_mut().zip(g.chunks(hw)) {
                *db += row.iter().copied().sum::<T>();
            }
            matmul_nt_into(g, &act, grads.fc2_w.data_mut(), c, hw, hd);
            dpre.fill(T::zero());
            matmul_tn_into(self.fc2_w.data(), g, &mut dpre, hd, c, hw);
            for (d, &p) in dpre.iter_mut().zip(pre) {
                *d = *d * gelu_grad(p);
            }
            for (db, row) in grads.fc1_b.data_mut().iter_mut().zip(dpre.chunks(hw)) {
                *db += row.iter().copied().sum::<T>();
            }
            matmul_nt_into(&dpre, xin, grads.fc1_w.data_mut(), hd, hw, c);
            matmul_tn_into(self.fc1_w.data(), &dpre, &mut dn2[bi * c * hw..(bi + 1) * c * hw], c, hd, hw);
        }
        let (dx1_branch, dg, db) = norm_backward(&cache.stats2, &self.norm2_gamma, &Tensor::new(&shape, dn2)?, layout)?;
        grads.norm2_gamma.add_assign(&dg)?;
        grads.norm2_beta.add_assign(&db)?;
        let mut dx1 = dout.clone();
        dx1.add_assign(&dx1_branch)?;

        // mixer branch
        let dn1 = self.mixer.backward(cache.mixer, &dx1, &mut grads.mixer)?;
        let (dx_branch, dg, db) = norm_backward(&cache.stats1, &self.norm1_gamma, &dn1, layout)?;
        grads.norm1_gamma.add_assign(&dg)?;
        grads.norm1_beta.add_assign(&db)?;
        dx1.add_assign(&dx_branch)?;
        Ok(dx1)
    }
}

impl<T: Scalar> Parameterized<T> for Block<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        push_param!(out, prefix, "norm1.gamma", &self.norm1_gamma, false);
        push_param!(out, prefix, "norm1.beta", &self.norm1_beta, false);
        self.mixer.collect(&join(prefix, "mixer"), out);
        push_param!(out, prefix, "norm2.gamma", &self.norm2_gamma, false);
        push_param!(out, prefix, "norm2.beta", &self.norm2_beta, false);
        push_param!(out, prefix, "mlp.fc1.weight", &self.fc1_w, true);
        push_param!(out, prefix, "mlp.fc1.bias", &self.fc1_b, false);
        push_param!(out, prefix, "mlp.fc2.weight", &self.fc2_w, true);
        push_param!(out, prefix, "mlp.fc2.bias", &self.fc2_b, false);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_param_mut!(out, prefix, "norm1.gamma", &mut self.norm1_gamma, false);
        push_param_mut!(out, prefix, "norm1.beta", &mut self.norm1_beta, false);
        self.mixer.collect_mut(&join(prefix, "mixer"), out);
        push_param_mut!(out, prefix, "norm2.gamma", &mut self.norm2_gamma, false);
        push_param_mut!(out, prefix, "norm2.beta", &mut self.norm2_beta, false);
        push_param_mut!(out, prefix, "mlp.fc1.weight", &mut self.fc1_w, true);
        push_param_mut!(out, prefix, "mlp.fc1.bias", &mut self.fc1_b, false);
        push_param_mut!(out, prefix, "mlp.fc2.weight", &mut self.fc2_w, true);
        push_param_mut!(out, prefix, "mlp.fc2.bias", &mut self.fc2_b, false);
    }
}

/// Global average pool, layer norm, linear classifier.
#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub norm_gamma: Tensor<T>,
    pub norm_beta: Tensor<T>,
    /// `[K, C]`
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct HeadCache<T> {
    input_shape: Vec<usize>,
    stats: NormStats<T>,
    normed: Tensor<T>,
}

impl<T: Scalar> Head<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, classes: usize, rng: &mut R) -> Self {
        Head {
            norm_gamma: Tensor::full(&[channels], T::one()),
            norm_beta: Tensor::zeros(&[channels]),
            weight: uniform_init(&[classes, channels], channels, rng),
            bias: Tensor::zeros(&[classes]),
        }
    }

    pub fn forward_cached(&self, x: &Tensor<T>) -> Result<(Tensor<T>, HeadCache<T>)> {
        let pooled = global_avg_pool(x)?;
        let (normed, stats) = norm_kernel(&pooled, &self.norm_gamma, &self.norm_beta, LN_EPS, NormLayout::last(pooled.shape()))?;
        let logits = linear(&normed, &self.weight, &self.bias)?;
        Ok((logits, HeadCache { input_shape: x.shape().to_vec(), stats, normed }))
    }

    pub fn backward(&self, cache: &HeadCache<T>, dlogits: &Tensor<T>, grads: &mut Head<T>) -> Result<Tensor<T>> {
        let (dn, dw, db) = linear_backward(&cache.normed, &self.weight, dlogits)?;
        grads.weight.add_assign(&dw)?;
        grads.bias.add_assign(&db)?;
        let (dp, dg, dbeta) = norm_backward(&cache.stats, &self.norm_gamma, &dn, NormLayout::last(dn.shape()))?;
        grads.norm_gamma.add_assign(&dg)?;
        grads.norm_beta.add_assign(&dbeta)?;
        global_avg_pool_backward(&cache.input_shape, &dp)
    }
}

impl<T: Scalar> Parameterized<T> for Head<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        push_param!(out, prefix, "norm.gamma", &self.norm_gamma, false);
        push_param!(out, prefix, "norm.beta", &self.norm_beta, false);
        push_param!(out, prefix, "fc.weight", &self.weight, true);
        push_param!(out, prefix, "fc.bias", &self.bias, false);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        push_param_mut!(out, prefix, "norm.gamma", &mut self.norm_gamma, false);
        push_param_mut!(out, prefix, "norm.beta", &mut self.norm_beta, false);
        push_param_mut!(out, prefix, "fc.weight", &mut self.weight, true);
        push_param_mut!(out, prefix, "fc.bias", &mut self.bias, false);
    }
}

/// Activations saved by one recorded operation.
#[derive(Clone, Debug)]
pub enum Saved<T> {
    ConvNorm(ConvNormCache<T>),
    Block(Box<BlockCache<T>>),
    Head(HeadCache<T>),
}

pub type BackboneTape<T> = GradTape<Saved<T>>;

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T> {
    config: BackboneConfig,
    signature: u64,
    pub stem: ConvNorm<T>,
    /// `downsample[s - 1]` feeds stage `s`.
    pub downsample: Vec<ConvNorm<T>>,
    pub stages: Vec<Vec<Block<T>>>,
    pub head: Head<T>,
}

impl<T: Scalar> Backbone<T> {
    /// Builds a model with weights drawn from `config.seed`.
    pub fn from_config(config: &BackboneConfig) -> Result<Self> {
        Self::new(config, &mut ChaCha8Rng::seed_from_u64(config.seed))
    }

    pub fn new<R: Rng + ?Sized>(config: &BackboneConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let stem = ConvNorm::new(config.in_channels, config.stages[0].channels, config.stem_patch, rng);
        let mut downsample = Vec::new();
        let mut stages = Vec::new();
        for (s, st) in config.stages.iter().enumerate() {
            if s > 0 {
                downsample.push(ConvNorm::new(config.stages[s - 1].channels, st.channels, config.down_patch, rng));
            }
            let blocks = (0..st.depth)
                .map(|_| Block::new(config.mixer_config(s), st.mlp_ratio, rng))
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        let head = Head::new(config.stages[NUM_STAGES - 1].channels, config.num_classes, rng);
        let digest = config.digest();
        Ok(Backbone {
            config: config.clone(),
            signature: u64::from_le_bytes(digest[..8].try_into().unwrap()),
            stem,
            downsample,
            stages,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Same weights in another element type.
    pub fn cast<U: Scalar>(&self) -> Backbone<U> {
        let mut out = Backbone::<U>::new(&self.config, &mut ChaCha8Rng::seed_from_u64(0)).expect("config already validated");
        out.load_from(self).expect("identical structure");
        out
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let c = &self.config;
        let want = [c.in_channels, c.resolution[0], c.resolution[1]];
        if x.rank() != 4 || x.shape()[1..] != want {
            return Err(Error::Shape(format!(
                "model expects [B,{},{},{}] images, got {:?}",
                want[0],
                want[1],
                want[2],
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut h = self.stem.forward(x)?;
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                h = self.downsample[s - 1].forward(&h)?;
            }
            for b in blocks {
                h = b.forward(&h)?;
            }
        }
        let (logits, _) = self.head.forward_cached(&h)?;
        ensure_finite(&logits, "backbone forward")?;
        Ok(logits)
    }

    /// Forward pass that records everything the backward pass needs.
    pub fn forward_tape(&self, x: &Tensor<T>) -> Result<(Tensor<T>, BackboneTape<T>)> {
        self.check_input(x)?;
        let mut tape = GradTape::new(self.signature);
        let (mut h, c) = self.stem.forward_cached(x)?;
        tape.record(OpId::Stem, Saved::ConvNorm(c));
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                let (o, c) = self.downsample[s - 1].forward_cached(&h)?;
                tape.record(OpId::Downsample { stage: s }, Saved::ConvNorm(c));
                h = o;
            }
            for (index, b) in blocks.iter().enumerate() {
                let (o, c) = b.forward_cached(&h)?;
                tape.record(OpId::Block { stage: s, index }, Saved::Block(Box::new(c)));
                h = o;
            }
        }
        let (logits, c) = self.head.forward_cached(&h)?;
        tape.record(OpId::Head, Saved::Head(c));
        ensure_finite(&logits, "backbone forward")?;
        Ok((logits, tape))
    }

    /// Consumes a tape from [`Self::forward_tape`]; parameter gradients
    /// accumulate into `grads`, the image gradient is returned.
    pub fn backward(&self, tape: BackboneTape<T>, dlogits: &Tensor<T>, grads: &mut Backbone<T>) -> Result<Tensor<T>> {
        if grads.signature != self.signature {
            return Err(Error::Usage("gradient buffer belongs to a different model".into()));
        }
        let mut d = dlogits.clone();
        for (op, saved) in tape.unwind(self.signature, &self.config.op_sequence())? {
            d = match (op, saved) {
                (OpId::Head, Saved::Head(c)) => self.head.backward(&c, &d, &mut grads.head)?,
                (OpId::Block { stage, index }, Saved::Block(c)) => {
                    self.stages[stage][index].backward(*c, &d, &mut grads.stages[stage][index])?
                }
                (OpId::Downsample { stage }, Saved::ConvNorm(c)) => {
                    self.downsample[stage - 1].backward(&c, &d, &mut grads.downsample[stage - 1])?
                }
                (OpId::Stem, Saved::ConvNorm(c)) => self.stem.backward(&c, &d, &mut grads.stem)?,
                (op, _) => return Err(Error::Usage(format!("tape entry for {op} holds the wrong activations"))),
            };
        }
        Ok(d)
    }
}

impl<T: Scalar> Parameterized<T> for Backbone<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<Param<'a, T>>) {
        self.stem.collect(&join(prefix, "stem"), out);
        for (s, blocks) in self.stages.iter().enumerate() {
            if s > 0 {
                self.downsample[s - 1].collect(&join(prefix, &format!("downsample{}", s + 1)), out);
            }
            for (i, b) in blocks.iter().enumerate() {
                b.collect(&join(prefix, &format!("stage{}.block{i}", s + 1)), out);
            }
        }
        self.head.collect(&join(prefix, "head"), out);
    }
    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, T>>) {
        let Backbone { stem, downsample, stages, head, .. } = self;
        stem.collect_mut(&join(prefix, "stem"), out);
        let mut downs = downsample.iter_mut();
        for (s, blocks) in stages.iter_mut().enumerate() {
            if s > 0 {
                if let Some(d) = downs.next() {
                    d.collect_mut(&join(prefix, &format!("downsample{}", s + 1)), out);
                }
            }
            for (i, b) in blocks.iter_mut().enumerate() {
                b.collect_mut(&join(prefix, &format!("stage{}.block{i}", s + 1)), out);
            }
        }
        head.collect_mut(&join(prefix, "head"), out);
    }
}

/// Stage outputs of a forward pass, for layer-by-layer inspection.
pub fn stage_features<T: Scalar>(model: &Backbone<T>, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
    model.check_input(x)?;
    let mut feats = Vec::new();
    let mut h = model.stem.forward(x)?;
    for (s, blocks) in model.stages.iter().enumerate() {
        if s > 0 {
            h = model.downsample[s - 1].forward(&h)?;
        }
        for b in blocks {
            h = b.forward(&h)?;
        }
        feats.push(h.clone());
    }
    Ok(feats)
}
