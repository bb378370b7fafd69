//! Whole-backbone gradient certification with optional layer scoping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::grad::check::{finite_diff_check_groups, GradCheckOptions, GradCheckReport};
use crate::grad::loss::softmax_cross_entropy;
use crate::params::Parameterized;
use crate::tensor::Tensor;

/// Layer kinds accepted by `--scope layer NAME`, with what they select.
pub const LAYER_SCOPES: [(&str, &str); 9] = [
    ("patch_kan", "KAN edge parameters of every mixer"),
    ("axis_mix", "axis kernels and reweighting MLP"),
    ("lowrank", "low-rank global maps"),
    ("norm", "every layer norm"),
    ("conv", "stem and downsampling convolutions"),
    ("mlp", "channel MLPs"),
    ("stem", "stem conv and its norm"),
    ("downsample", "downsampling layers"),
    ("head", "classifier norm and linear layer"),
];

fn layer_matches(layer: &str, name: &str) -> bool {
    match layer {
        "patch_kan" => name.contains(".mixer.kan"),
        "axis_mix" => name.contains(".mixer.axis."),
        "lowrank" => name.contains(".mixer.global."),
        "norm" => name.contains(".norm"),
        "conv" => name.contains(".conv."),
        "mlp" => name.contains(".mlp."),
        "stem" => name.starts_with("stem."),
        "downsample" => name.starts_with("downsample"),
        "head" => name.starts_with("head."),
        // otherwise a parameter-name prefix such as `stage2.block0.mixer`
        prefix => name == prefix || name.starts_with(&format!("{prefix}.")),
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum GradScope {
    All,
    Layer(String),
}

impl GradScope {
    pub fn selects(&self, name: &str) -> bool {
        match self {
            GradScope::All => true,
            GradScope::Layer(l) => layer_matches(l, name),
        }
    }
}

/// Settings of [`check_backbone`] beyond the finite-difference options.
#[derive(Clone, Debug)]
pub struct BackboneCheck {
    pub scope: GradScope,
    /// Seeds the weight perturbation, the inputs and the labels.
    pub seed: u64,
    pub batch: usize,
    /// Deliberately corrupts the analytic gradient of one layer kind, to
    /// prove that the checker catches a broken backward pass.
    pub inject_fault: Option<String>,
}

impl Default for BackboneCheck {
    fn default() -> Self {
        BackboneCheck {
            scope: GradScope::All,
            seed: 0,
            batch: 2,
            inject_fault: None,
        }
    }
}

fn unknown_layer(layer: &str, names: &[String]) -> Error {
    let kinds: Vec<&str> = LAYER_SCOPES.iter().map(|(k, _)| *k).collect();
    let first = names.first().map(String::as_str).unwrap_or("");
    Error::Config(format!(
        "layer '{layer}' matches no parameter; valid layers are {} or a parameter prefix such as '{first}'",
        kinds.join(", ")
    ))
}

/// Compares backprop through a 64-bit copy of the backbone with central
/// differences of the mean cross-entropy on a random batch. Weights are
/// moved off their initial values first so that no group is trivially zero.
pub fn check_backbone(cfg: &BackboneConfig, check: &BackboneCheck, opts: &GradCheckOptions) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(check.seed);
    let mut model = Backbone::<f64>::from_config(cfg)?;
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    let layers = [Some(check.scope.clone()), check.inject_fault.clone().map(GradScope::Layer)];
    for scope in layers.iter().flatten() {
        if let GradScope::Layer(l) = scope {
            if !names.iter().any(|n| scope.selects(n)) {
                return Err(unknown_layer(l, &names));
            }
        }
    }
    for p in model.params_mut() {
        let noise = Tensor::uniform(p.tensor.shape(), -0.2, 0.2, &mut rng);
        p.tensor.add_assign(&noise)?;
    }
    let b = check.batch.max(1);
    let [h, w] = cfg.resolution;
    let x = Tensor::<f64>::uniform(&[b, cfg.in_channels, h, w], 0.0, 1.0, &mut rng);
    let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..cfg.num_classes)).collect();

    let (logits, tape) = model.forward_tape(&x)?;
    let (_, dlogits) = softmax_cross_entropy(&logits, &labels)?;
    let mut grads = model.zeroed();
    model.backward(tape, &dlogits, &mut grads)?;
    if let Some(layer) = &check.inject_fault {
        let target = GradScope::Layer(layer.clone());
        for p in grads.params_mut() {
            if target.selects(&p.name) {
                for g in p.tensor.data_mut() {
                    *g = *g * 1.1 + 1e-3;
                }
            }
        }
    }
    let loss = |m: &Backbone<f64>| Ok(softmax_cross_entropy(&m.forward(&x)?, &labels)?.0);
    finite_diff_check_groups(&mut model, &grads, loss, opts, |n| check.scope.selects(n))
}
