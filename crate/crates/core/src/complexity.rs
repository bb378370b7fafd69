//! Exact multiply counts and parameter counts derived from shapes.
//!
//! Convention: one unit per multiply, divide or transcendental call
//! (exp, ln, sqrt, tanh); additions, subtractions and comparisons are free.
//! Quantities that depend only on parameters (`1/(2σ²)`, `1/C`) are hoisted
//! and not charged. Under this convention a multiply-add costs 1, so totals
//! are multiply-accumulate counts; "GFLOPs" below means 1e9 of these units.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig, NUM_STAGES};
use crate::error::{Error, Result};
use crate::kan;
use crate::mixer::{Mixer, MixerConfig};
use crate::scalar::Counted;
use crate::tensor::{Tensor, GELU_COST};

/// Human-readable statement of the counting constants.
pub const CONVENTION: &str = "units: 1 per multiply/divide/exp/ln/sqrt/tanh, adds free; \
RBF edge basis c1=4 (square, scale, exp, weight); wavelet 6; B-spline F*table+F^2*M; \
axis conv k per output per direction; blend 1 per element; reweight GAP C + MLP hid*C+2*hid + softmax 5; \
low-rank 2*N*C*r; layer norm 3C+4 per token; GELU 7; conv outputs*Cin*s^2";

/// Mixer cost split by component, for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixerFlops {
    pub patch_kan: u64,
    /// Both depthwise convolutions plus the blend: `2·N·C·k + N·C`.
    pub axis_mix: u64,
    /// Pooling, reweighting MLP and softmax; independent of `N`.
    pub reweight: u64,
    pub lowrank_global: u64,
}

impl MixerFlops {
    /// Components proportional to the token count.
    pub fn token_linear(&self) -> u64 {
        self.patch_kan + self.axis_mix + self.lowrank_global
    }

    pub fn total(&self) -> u64 {
        self.token_linear() + self.reweight
    }

    fn add(&mut self, o: &MixerFlops) {
        self.patch_kan += o.patch_kan;
        self.axis_mix += o.axis_mix;
        self.reweight += o.reweight;
        self.lowrank_global += o.lowrank_global;
    }
}

/// Per-image cost of one mixer at the resolution stored in `cfg`.
pub fn count_mixer_flops(cfg: &MixerConfig) -> MixerFlops {
    let c = cfg.channels as u64;
    let n = cfg.tokens() as u64;
    let f = cfg.patch_dim() as u64;
    let rows = c * n / f;
    let mut out = MixerFlops {
        patch_kan: rows * kan::row_cost(cfg.patch_dim(), cfg.basis),
        ..Default::default()
    };
    if cfg.axis_mix {
        let k = cfg.kernel as u64;
        let hid = cfg.reweight_hidden() as u64;
        out.axis_mix = 2 * n * c * k + n * c;
        out.reweight = c + hid * c + 2 * hid + 5;
    }
    out.lowrank_global = 2 * n * c * cfg.rank as u64;
    out
}

/// Trainable scalars of one mixer.
pub fn mixer_params(cfg: &MixerConfig) -> MixerParams {
    let c = cfg.channels;
    let mut p = MixerParams {
        patch_kan: cfg.kan_groups * kan::layer_param_count(cfg.patch_dim(), cfg.basis),
        ..Default::default()
    };
    if cfg.axis_mix {
        let hid = cfg.reweight_hidden();
        p.axis_mix = 2 * c * cfg.kernel + hid * c + hid + 2 * hid + 2;
    }
    p.lowrank_global = 2 * cfg.tokens() * cfg.rank;
    p
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixerParams {
    pub patch_kan: usize,
    pub axis_mix: usize,
    pub lowrank_global: usize,
}

impl MixerParams {
    pub fn total(&self) -> usize {
        self.patch_kan + self.axis_mix + self.lowrank_global
    }
}

/// Cost of one block for one image.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct BlockFlops {
    pub mixer: MixerFlops,
    pub channel_mlp: u64,
    pub norm: u64,
}

impl BlockFlops {
    pub fn total(&self) -> u64 {
        self.mixer.total() + self.channel_mlp + self.norm
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StageFlops {
    pub blocks: Vec<BlockFlops>,
    /// Downsampling conv + norm entering this stage (stem for the first).
    pub embed: u64,
}

impl StageFlops {
    pub fn total(&self) -> u64 {
        self.embed + self.blocks.iter().map(BlockFlops::total).sum::<u64>()
    }
}

/// Whole-model cost for one image, broken down by component.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlopReport {
    pub stages: Vec<StageFlops>,
    pub head: u64,
    pub params: ParamReport,
}

/// Totals per component type across the model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ComponentFlops {
    pub patch_kan: u64,
    pub axis_mix: u64,
    pub reweight: u64,
    pub lowrank_global: u64,
    pub channel_mlp: u64,
    pub norm: u64,
    pub embed: u64,
    pub head: u64,
}

impl ComponentFlops {
    pub fn total(&self) -> u64 {
        self.patch_kan
            + self.axis_mix
            + self.reweight
            + self.lowrank_global
            + self.channel_mlp
            + self.norm
            + self.embed
            + self.head
    }

    pub fn named(&self) -> [(&'static str, u64); 8] {
        [
            ("patch_kan", self.patch_kan),
            ("axis_mix", self.axis_mix),
            ("reweight", self.reweight),
            ("lowrank_global", self.lowrank_global),
            ("channel_mlp", self.channel_mlp),
            ("norm", self.norm),
            ("embed", self.embed),
            ("head", self.head),
        ]
    }
}

impl FlopReport {
    pub fn components(&self) -> ComponentFlops {
        let mut m = MixerFlops::default();
        let mut c = ComponentFlops { head: self.head, ..Default::default() };
        for s in &self.stages {
            c.embed += s.embed;
            for b in &s.blocks {
                m.add(&b.mixer);
                c.channel_mlp += b.channel_mlp;
                c.norm += b.norm;
            }
        }
        c.patch_kan = m.patch_kan;
        c.axis_mix = m.axis_mix;
        c.reweight = m.reweight;
        c.lowrank_global = m.lowrank_global;
        c
    }

    pub fn total(&self) -> u64 {
        self.stages.iter().map(StageFlops::total).sum::<u64>() + self.head
    }

    pub fn gflops(&self) -> f64 {
        self.total() as f64 / 1e9
    }

    /// CSV with one row per component plus the total.
    pub fn to_csv(&self) -> String {
        let comps = self.components();
        let mut s = String::from("component,flops,params\n");
        let p = &self.params;
        let params = [
            p.patch_kan,
            p.axis_mix,
            0,
            p.lowrank_global,
            p.channel_mlp,
            p.norm,
            p.embed,
            p.head,
        ];
        for ((name, v), q) in comps.named().iter().zip(params) {
            s.push_str(&format!("{name},{v},{q}\n"));
        }
        s.push_str(&format!("total,{},{}\n", self.total(), p.total()));
        s
    }
}

impl std::fmt::Display for FlopReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "# {CONVENTION}")?;
        writeln!(f, "{:<16} {:>16}", "component", "flops")?;
        for (name, v) in self.components().named() {
            writeln!(f, "{name:<16} {v:>16}")?;
        }
        for (i, s) in self.stages.iter().enumerate() {
            writeln!(f, "{:<16} {:>16}", format!("stage{}", i + 1), s.total())?;
        }
        writeln!(f, "{:<16} {:>16}", "total", self.total())?;
        write!(
            f,
            "{:<16} {:>16.4}\n{:<16} {:>16}",
            "gflops",
            self.gflops(),
            "params",
            self.params.total()
        )
    }
}

/// Trainable scalars per component.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ParamReport {
    pub patch_kan: usize,
    pub axis_mix: usize,
    pub lowrank_global: usize,
    pub channel_mlp: usize,
    pub norm: usize,
    pub embed: usize,
    pub head: usize,
}

impl ParamReport {
    pub fn total(&self) -> usize {
        self.patch_kan + self.axis_mix + self.lowrank_global + self.channel_mlp + self.norm + self.embed + self.head
    }
}

fn conv_norm_flops(cin: usize, cout: usize, s: usize, ho: usize, wo: usize) -> u64 {
    let tokens = (ho * wo) as u64;
    tokens * cout as u64 * (cin * s * s) as u64 + tokens * (3 * cout as u64 + 4)
}

/// Parameter count of a config without allocating it.
pub fn count_params(cfg: &BackboneConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let mut p = ParamReport::default();
    let c0 = cfg.stages[0].channels;
    p.embed += c0 * cfg.in_channels * cfg.stem_patch.pow(2) + 3 * c0;
    for (s, st) in cfg.stages.iter().enumerate() {
        let c = st.channels;
        if s > 0 {
            let cp = cfg.stages[s - 1].channels;
            p.embed += c * cp * cfg.down_patch.pow(2) + 3 * c;
        }
        let m = mixer_params(&cfg.mixer_config(s));
        let h = c * st.mlp_ratio;
        p.patch_kan += st.depth * m.patch_kan;
        p.axis_mix += st.depth * m.axis_mix;
        p.lowrank_global += st.depth * m.lowrank_global;
        p.channel_mlp += st.depth * (2 * c * h + h + c);
        p.norm += st.depth * 4 * c;
    }
    let cl = cfg.stages[NUM_STAGES - 1].channels;
    p.head = 2 * cl + cfg.num_classes * cl + cfg.num_classes;
    Ok(p)
}

/// Per-image cost of a full forward pass.
pub fn count_model_flops(cfg: &BackboneConfig) -> Result<FlopReport> {
    cfg.validate()?;
    let mut stages = Vec::with_capacity(NUM_STAGES);
    for (s, st) in cfg.stages.iter().enumerate() {
        let (h, w) = cfg.stage_resolution(s);
        let c = st.channels;
        let embed = if s == 0 {
            conv_norm_flops(cfg.in_channels, c, cfg.stem_patch, h, w)
        } else {
            conv_norm_flops(cfg.stages[s - 1].channels, c, cfg.down_patch, h, w)
        };
        let n = (h * w) as u64;
        let hid = (c * st.mlp_ratio) as u64;
        let c64 = c as u64;
        let block = BlockFlops {
            mixer: count_mixer_flops(&cfg.mixer_config(s)),
            channel_mlp: n * (2 * c64 * hid + GELU_COST * hid),
            norm: 2 * n * (3 * c64 + 4),
        };
        stages.push(StageFlops { blocks: vec![block; st.depth], embed });
    }
    let cl = cfg.stages[NUM_STAGES - 1].channels as u64;
    let head = cl + (3 * cl + 4) + cfg.num_classes as u64 * cl;
    Ok(FlopReport { stages, head, params: count_params(cfg)? })
}

/// One row of a resolution sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearityRow {
    pub side: usize,
    pub tokens: u64,
    /// N-proportional mixer components.
    pub mixer_flops: u64,
    /// N-independent reweighting cost, listed for completeness.
    pub reweight: u64,
    /// `N²·C`, the cost of forming one attention map.
    pub attention: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LinearityTable {
    pub rows: Vec<LinearityRow>,
}

impl LinearityTable {
    /// `mixer_flops / tokens` is the same rational on every row.
    pub fn is_exactly_linear(&self) -> bool {
        let r0 = &self.rows[0];
        self.rows
            .iter()
            .all(|r| r.mixer_flops as u128 * r0.tokens as u128 == r0.mixer_flops as u128 * r.tokens as u128)
    }

    pub fn to_csv(&self, attention: bool) -> String {
        let r0 = &self.rows[0];
        let mut s = String::from("resolution,tokens,mixer_flops,reweight_flops,token_ratio,flop_ratio");
        if attention {
            s.push_str(",attention_flops,attention_ratio");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}",
                r.side,
                r.tokens,
                r.mixer_flops,
                r.reweight,
                r.tokens as f64 / r0.tokens as f64,
                r.mixer_flops as f64 / r0.mixer_flops as f64
            ));
            if attention {
                s.push_str(&format!(",{},{}", r.attention, r.attention as f64 / r0.attention as f64));
            }
            s.push('\n');
        }
        s
    }
}

/// Mixer cost of `base` re-evaluated at square resolutions `side × side`,
/// keeping channels, basis, kernel and rank fixed.
pub fn linearity_probe(base: &MixerConfig, sides: &[usize]) -> Result<LinearityTable> {
    if sides.len() < 2 {
        return Err(Error::Config("a linearity probe needs at least two resolutions".into()));
    }
    let mut rows = Vec::new();
    for &side in sides {
        let cfg = MixerConfig { height: side, width: side, ..*base };
        cfg.validate()
            .map_err(|e| Error::Config(format!("resolution {side}: {e}")))?;
        let f = count_mixer_flops(&cfg);
        let n = (side * side) as u64;
        rows.push(LinearityRow {
            side,
            tokens: n,
            mixer_flops: f.token_linear(),
            reweight: f.reweight,
            attention: n * n * cfg.channels as u64,
        });
    }
    Ok(LinearityTable { rows })
}

/// The first stage's mixer of `cfg`, used as the default probe subject.
pub fn probe_mixer(cfg: &BackboneConfig) -> MixerConfig {
    cfg.mixer_config(0)
}

/// Parses a comma-separated list of square sides such as `"56,112,224"`.
pub fn parse_resolutions(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("invalid resolution '{t}'")))
        })
        .collect()
}

/// Multiplies actually executed by one forward pass of a randomly
/// initialized mixer on a single image, counted through [`Counted`].
pub fn instrumented_mixer_flops(cfg: &MixerConfig, seed: u64) -> Result<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mixer = Mixer::<Counted>::new(*cfg, &mut rng)?;
    let x = Tensor::<Counted>::uniform(&[1, cfg.channels, cfg.height, cfg.width], -2.0, 2.0, &mut rng);
    Counted::take_count();
    mixer.forward(&x)?;
    Ok(Counted::take_count())
}

/// Same as [`instrumented_mixer_flops`] for a whole backbone.
pub fn instrumented_model_flops(cfg: &BackboneConfig) -> Result<u64> {
    let model = Backbone::<f64>::from_config(cfg)?.cast::<Counted>();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [h, w] = cfg.resolution;
    let x = Tensor::<Counted>::uniform(&[1, cfg.in_channels, h, w], 0.0, 1.0, &mut rng);
    Counted::take_count();
    model.forward(&x)?;
    Ok(Counted::take_count())
}
