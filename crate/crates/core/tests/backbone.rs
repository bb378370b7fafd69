use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vik_core::backbone::*;
use vik_core::grad::softmax_cross_entropy;
use vik_core::mixer::MixerConfig;
use vik_core::kan::{BasisKind, BasisSpec};
use vik_core::tensor::{gelu, norm_kernel, patch_conv, NormLayout, LN_EPS};
use vik_core::{Error, Parameterized, Tensor};

fn rng(s: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(s)
}

fn shipped(name: &str) -> BackboneConfig {
    BackboneConfig::load(format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (bn, ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, s) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (h / s, wd / s);
    let mut out = vec![0.0; bn * co * ho * wo];
    for n in 0..bn {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = b.data()[o];
                    for c in 0..ci {
                        for u in 0..s {
                            for v in 0..s {
                                acc += w.data()[((o * ci + c) * s + u) * s + v]
                                    * x.data()[((n * ci + c) * h + i * s + u) * wd + j * s + v];
                            }
                        }
                    }
                    out[((n * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

#[test]
fn zero_stem_maps_to_beta() {
    let mut stem = ConvNorm::<f64>::new(3, 4, 4, &mut rng(1));
    stem.weight.fill(0.0);
    stem.beta = Tensor::from_f64(&[4], &[0.5, -1.0, 2.0, 0.0]).unwrap();
    let x = Tensor::<f64>::uniform(&[1, 3, 8, 8], 0.0, 1.0, &mut rng(2));
    let y = stem.forward(&x).unwrap();
    for (c, plane) in y.data().chunks(4).enumerate() {
        assert!(plane.iter().all(|&v| v == stem.beta.data()[c]));
    }
}

#[test]
fn stem_and_downsamples_follow_the_hierarchy_at_224() {
    let cfg = shipped("vik_small.toml");
    assert_eq!(
        (0..4).map(|s| cfg.stage_resolution(s)).collect::<Vec<_>>(),
        vec![(56, 56), (28, 28), (14, 14), (7, 7)]
    );
    let stem = ConvNorm::<f32>::new(3, 8, 4, &mut rng(3));
    let x = Tensor::<f32>::uniform(&[1, 3, 224, 224], 0.0, 1.0, &mut rng(4));
    let mut h = stem.forward(&x).unwrap();
    assert_eq!(h.shape(), &[1, 8, 56, 56]);
    for side in [28, 14, 7] {
        h = ConvNorm::<f32>::new(8, 8, 2, &mut rng(side as u64)).forward(&h).unwrap();
        assert_eq!(h.shape(), &[1, 8, side, side]);
    }
    let odd = Tensor::<f32>::zeros(&[1, 8, 7, 7]);
    assert!(matches!(ConvNorm::<f32>::new(8, 8, 2, &mut rng(0)).forward(&odd), Err(Error::Shape(_))));
}

#[test]
fn strided_conv_matches_sliding_window_oracle() {
    for (ci, co, s, h) in [(3, 5, 4, 8), (4, 6, 2, 6)] {
        let w = Tensor::<f64>::uniform(&[co, ci, s, s], -1.0, 1.0, &mut rng(5));
        let b = Tensor::<f64>::uniform(&[co], -1.0, 1.0, &mut rng(6));
        let x = Tensor::<f64>::uniform(&[2, ci, h, h], -1.0, 1.0, &mut rng(7));
        let y = patch_conv(&x, &w, &b).unwrap();
        for (a, e) in y.data().iter().zip(naive_conv(&x, &w, &b)) {
            assert!((a - e).abs() < 1e-5);
        }
    }
}

#[test]
fn averaging_kernel_gives_scaled_block_means() {
    let w = Tensor::<f64>::full(&[1, 1, 2, 2], 0.3);
    let x = Tensor::<f64>::from_f64(&[1, 1, 2, 4], &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]).unwrap();
    let y = patch_conv(&x, &w, &Tensor::zeros(&[1])).unwrap();
    assert!((y.data()[0] - 2.5 * 4.0 * 0.3).abs() < 1e-12);
    assert!((y.data()[1] - 6.5 * 4.0 * 0.3).abs() < 1e-12);
}

fn mixer_cfg(c: usize, h: usize, w: usize, p: usize) -> MixerConfig {
    MixerConfig {
        channels: c,
        height: h,
        width: w,
        patch: p,
        basis: BasisSpec { kind: BasisKind::Rbf, count: 8 },
        kernel: 3,
        rank: ((h * w).saturating_sub(1) / 2).min(64),
        axis_mix: true,
        kan_groups: 1,
    }
}

#[test]
fn zero_branch_block_is_exact_identity() {
    let mut b = Block::<f32>::new(mixer_cfg(4, 4, 4, 2), 4, &mut rng(8)).unwrap();
    for p in b.params_mut() {
        let n = &p.name;
        if n.ends_with(".w") || n.starts_with("mixer.global") || n.contains("fc2") {
            p.tensor.fill(0.0);
        }
    }
    let x = Tensor::<f32>::uniform(&[2, 4, 4, 4], -3.0, 3.0, &mut rng(9));
    assert_eq!(b.forward(&x).unwrap(), x);
}

#[test]
fn block_preserves_shape_for_many_sizes() {
    for (i, (bs, c, h, w, p)) in [(1, 4, 4, 4, 2), (2, 8, 6, 6, 3), (3, 2, 8, 4, 2), (1, 6, 5, 5, 5), (2, 3, 2, 6, 1)]
        .into_iter()
        .enumerate()
    {
        let b = Block::<f32>::new(mixer_cfg(c, h, w, p), 2, &mut rng(i as u64)).unwrap();
        let x = Tensor::<f32>::uniform(&[bs, c, h, w], -1.0, 1.0, &mut rng(50 + i as u64));
        let y = b.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.all_finite());
    }
}

#[test]
fn block_matches_component_composition() {
    let b = Block::<f64>::new(mixer_cfg(4, 4, 4, 2), 3, &mut rng(10)).unwrap();
    let x = Tensor::<f64>::uniform(&[2, 4, 4, 4], -1.0, 1.0, &mut rng(11));
    let l = NormLayout::nchw(x.shape());
    let n1 = norm_kernel(&x, &b.norm1_gamma, &b.norm1_beta, LN_EPS, l).unwrap().0;
    let x1 = x.add(&b.mixer.forward(&n1).unwrap()).unwrap();
    let n2 = norm_kernel(&x1, &b.norm2_gamma, &b.norm2_beta, LN_EPS, l).unwrap().0;
    let mut expect = x1.clone();
    let (c, hd, hw) = (4, 12, 16);
    for bi in 0..2 {
        for pix in 0..hw {
            let v: Vec<f64> = (0..c).map(|ch| n2.data()[(bi * c + ch) * hw + pix]).collect();
            let h: Vec<f64> = (0..hd)
                .map(|j| gelu(b.fc1_b.data()[j] + (0..c).map(|k| b.fc1_w.data()[j * c + k] * v[k]).sum::<f64>()))
                .collect();
            for o in 0..c {
                let y = b.fc2_b.data()[o] + (0..hd).map(|j| b.fc2_w.data()[o * hd + j] * h[j]).sum::<f64>();
                expect.data_mut()[(bi * c + o) * hw + pix] += y;
            }
        }
    }
    assert!(b.forward(&x).unwrap().max_abs_diff(&expect) < 1e-5);
}

#[test]
fn zero_head_gives_uniform_prediction() {
    let cfg = shipped("vik_tiny.toml");
    let mut m = Backbone::<f32>::from_config(&cfg).unwrap();
    m.head.weight.fill(0.0);
    let x = Tensor::<f32>::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng(12));
    let logits = m.forward(&x).unwrap();
    assert!(logits.data().iter().all(|&v| v == 0.0));
    let (loss, _) = softmax_cross_entropy(&logits, &[0, 4, 9]).unwrap();
    assert!((loss - 10f32.ln()).abs() < 1e-6);
}

#[test]
fn small_model_produces_imagenet_logits() {
    let m = Backbone::<f32>::from_config(&shipped("vik_small.toml")).unwrap();
    let x = Tensor::<f32>::uniform(&[2, 3, 224, 224], 0.0, 1.0, &mut rng(13));
    let y = m.forward(&x).unwrap();
    assert_eq!(y.shape(), &[2, 1000]);
    assert!(y.all_finite());
}

#[test]
fn forward_matches_layer_by_layer_replay() {
    let cfg = shipped("vik_tiny.toml");
    let m = Backbone::<f64>::from_config(&cfg).unwrap();
    let x = Tensor::<f64>::uniform(&[2, 3, 32, 32], 0.0, 1.0, &mut rng(14));
    let mut h = m.stem.forward(&x).unwrap();
    for s in 0..4 {
        if s > 0 {
            h = m.downsample[s - 1].forward(&h).unwrap();
        }
        for b in &m.stages[s] {
            h = b.forward(&h).unwrap();
        }
    }
    let pooled = vik_core::tensor::global_avg_pool(&h).unwrap();
    let n = norm_kernel(&pooled, &m.head.norm_gamma, &m.head.norm_beta, LN_EPS, NormLayout::last(pooled.shape())).unwrap().0;
    let logits = vik_core::tensor::linear(&n, &m.head.weight, &m.head.bias).unwrap();
    assert!(m.forward(&x).unwrap().max_abs_diff(&logits) < 1e-4);
    assert!(m.forward_tape(&x).unwrap().0.max_abs_diff(&logits) == 0.0);
}

#[test]
fn permuting_the_batch_permutes_logits_bit_exactly() {
    let m = Backbone::<f32>::from_config(&shipped("vik_tiny.toml")).unwrap();
    let x = Tensor::<f32>::uniform(&[3, 3, 32, 32], 0.0, 1.0, &mut rng(15));
    let per = 3 * 32 * 32;
    let order = [2, 0, 1];
    let mut perm = Vec::new();
    for &i in &order {
        perm.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let xp = Tensor::new(x.shape(), perm).unwrap();
    let (a, b) = (m.forward(&x).unwrap(), m.forward(&xp).unwrap());
    for (row, &i) in order.iter().enumerate() {
        assert_eq!(&b.data()[row * 10..row * 10 + 10], &a.data()[i * 10..i * 10 + 10]);
    }
}

#[test]
fn tape_from_another_model_is_rejected() {
    let cfg = shipped("vik_tiny.toml");
    let a = Backbone::<f64>::from_config(&cfg).unwrap();
    let b = Backbone::<f64>::from_config(&cfg.ablated(true, false)).unwrap();
    let x = Tensor::<f64>::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut rng(16));
    let (logits, tape) = b.forward_tape(&x).unwrap();
    let mut g = a.zeroed();
    let err = a.backward(tape, &logits, &mut g).unwrap_err();
    assert!(matches!(err, Error::Usage(_)), "{err}");
}

#[test]
fn config_validation_errors() {
    let base = shipped("vik_tiny.toml");
    let mut c = base.clone();
    c.stages.pop();
    assert!(matches!(c.validate(), Err(Error::Config(_))));
    let mut c = base.clone();
    c.stages[1].channels = 4;
    assert!(c.validate().is_err());
    assert!(base.with_resolution(36, 36).validate().is_err());
    let mut c = base.clone();
    c.stages[3].patch = 2;
    assert!(c.validate().unwrap_err().to_string().contains("stage 4"));
    assert!(BackboneConfig::from_toml_str("num_classes = 10\nresolution=[32,32]\nstages=[]\nbogus=1").is_err());
    assert!(matches!(BackboneConfig::load("/nonexistent/cfg.toml"), Err(Error::Config(m)) if m.contains("/nonexistent/cfg.toml")));
    let text = base.to_toml();
    assert_eq!(BackboneConfig::from_toml_str(&text).unwrap(), base);
}
