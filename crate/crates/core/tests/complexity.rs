use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vik_core::backbone::{Backbone, BackboneConfig};
use vik_core::complexity::*;
use vik_core::kan::{BasisKind, BasisSpec};
use vik_core::mixer::{Mixer, MixerConfig};
use vik_core::{Counted, Parameterized, Tensor};

fn shipped(name: &str) -> BackboneConfig {
    BackboneConfig::load(format!("{}/../../configs/{name}", env!("CARGO_MANIFEST_DIR"))).unwrap()
}

fn random_mixer(rng: &mut ChaCha8Rng) -> MixerConfig {
    let kinds = [BasisKind::Rbf, BasisKind::Bspline, BasisKind::Wavelet, BasisKind::MlpReplace];
    let patch = rng.gen_range(1..=3);
    let side = patch * rng.gen_range(1..=3);
    let groups = [1, 2][rng.gen_range(0..2)];
    MixerConfig {
        channels: 2 * rng.gen_range(1..=3),
        height: side,
        width: side + patch,
        patch,
        basis: BasisSpec { kind: kinds[rng.gen_range(0..4)], count: rng.gen_range(4..=6) },
        kernel: [1, 3, 5][rng.gen_range(0..3)],
        rank: rng.gen_range(0..=3usize).min(side * (side + patch)),
        axis_mix: rng.gen_bool(0.7),
        kan_groups: groups,
    }
}

#[test]
fn instrumented_mixer_counts_equal_analytic_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0);
    for _ in 0..6 {
        let cfg = random_mixer(&mut rng);
        let m = Mixer::<Counted>::new(cfg, &mut rng).unwrap();
        let x = Tensor::<Counted>::uniform(&[1, cfg.channels, cfg.height, cfg.width], -2.0, 2.0, &mut rng);
        Counted::take_count();
        let _ = m.forward(&x).unwrap();
        assert_eq!(Counted::take_count(), count_mixer_flops(&cfg).total(), "{cfg:?}");
    }
}

#[test]
fn instrumented_model_count_equals_report_total() {
    let cfg = shipped("vik_tiny.toml");
    let model = Backbone::<f64>::from_config(&cfg).unwrap().cast::<Counted>();
    let x = Tensor::<Counted>::uniform(&[1, 3, 32, 32], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    Counted::take_count();
    let _ = model.forward(&x).unwrap();
    let report = count_model_flops(&cfg).unwrap();
    assert_eq!(Counted::take_count(), report.total());
    assert_eq!(report.total(), report.components().total());
}

#[test]
fn parameter_counts_equal_allocation_census() {
    for name in ["vik_tiny.toml", "vik_small.toml", "vik_base.toml"] {
        let cfg = shipped(name);
        let model = Backbone::<f32>::from_config(&cfg).unwrap();
        assert_eq!(count_params(&cfg).unwrap().total(), model.num_params(), "{name}");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..5 {
        let cfg = random_mixer(&mut rng);
        let m = Mixer::<f32>::new(cfg, &mut rng).unwrap();
        assert_eq!(mixer_params(&cfg).total(), m.num_params(), "{cfg:?}");
    }
}

#[test]
fn small_config_matches_the_published_budget() {
    let r = count_model_flops(&shipped("vik_small.toml")).unwrap();
    let params = r.params.total() as f64;
    assert!((params / 13.5e6 - 1.0).abs() <= 0.20, "params {params}");
    assert!((r.gflops() / 1.6 - 1.0).abs() <= 0.35, "gflops {}", r.gflops());
}

#[test]
fn report_csv_rows_sum_to_total() {
    let r = count_model_flops(&shipped("vik_tiny.toml")).unwrap();
    let csv = r.to_csv();
    let mut sum = 0u64;
    let mut total = 0u64;
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let v: u64 = cols[1].parse().unwrap();
        if cols[0] == "total" {
            total = v;
        } else {
            sum += v;
        }
    }
    assert_eq!(sum, total);
}
