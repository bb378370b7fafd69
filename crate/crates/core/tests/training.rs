use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::tempdir;
use vik_core::grad::softmax_cross_entropy;
use vik_core::training::checkpoint::{decode, encode};
use vik_core::training::data::{parse_cifar10, val_seed, CIFAR_RECORD};
use vik_core::training::train::{predict, thread_pool};
use vik_core::training::*;
use vik_core::{Backbone, BackboneConfig, Error, Parameterized, Tensor};

fn tiny() -> BackboneConfig {
    BackboneConfig::load(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/vik_tiny.toml")).unwrap()
}

fn synth(seed: u64, per_class: usize, split: Split) -> Dataset {
    synth_dataset(&SynthSpec::new(seed, per_class, 10, 32), split).unwrap()
}

// ---------------------------------------------------------------- AdamW

/// Plain AdamW written out scalar by scalar, used as the reference.
struct RefAdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl RefAdamW {
    fn step(&mut self, theta: &mut [f64], g: &[f64], lr: f64, wd: f64) {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        self.t += 1;
        for i in 0..theta.len() {
            theta[i] -= lr * wd * theta[i];
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g[i];
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - b1.powi(self.t));
            let vh = self.v[i] / (1.0 - b2.powi(self.t));
            theta[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}

/// Gradient of `0.5·(3x² + y²) + 0.8·x·y`.
fn quad_grad(p: &[f64]) -> Vec<f64> {
    vec![3.0 * p[0] + 0.8 * p[1], p[1] + 0.8 * p[0]]
}

fn trajectories(wd: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let cfg = AdamWConfig { weight_decay: wd, ..AdamWConfig::default() };
    let mut theta = Tensor::<f64>::from_f64(&[2], &[1.5, -2.0]).unwrap();
    let mut state = OptimState::new(&theta);
    let mut reference = vec![1.5, -2.0];
    let mut r = RefAdamW { m: vec![0.0; 2], v: vec![0.0; 2], t: 0 };
    let (mut ours, mut theirs) = (Vec::new(), Vec::new());
    for _ in 0..10 {
        let g = Tensor::from_f64(&[2], &quad_grad(theta.data())).unwrap();
        adamw_step(&mut theta, &g, &mut state, &cfg, 0.1).unwrap();
        let rg = quad_grad(&reference);
        r.step(&mut reference, &rg, 0.1, wd);
        ours.push(theta.data().to_vec());
        theirs.push(reference.clone());
    }
    (ours, theirs)
}

#[test]
fn adamw_matches_reference_on_quadratic() {
    let (ours, theirs) = trajectories(0.05);
    for (a, b) in ours.iter().zip(&theirs) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-8, "{a:?} vs {b:?}");
        }
    }
    assert_ne!(ours[0], ours[9]);
}

#[test]
fn zero_weight_decay_is_plain_adam() {
    let (ours, theirs) = trajectories(0.0);
    for (a, b) in ours.iter().zip(&theirs) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-8);
        }
    }
    // with decay the path differs
    let (decayed, _) = trajectories(0.05);
    assert_ne!(ours[9], decayed[9]);
}

#[test]
fn adamw_first_step_closed_form() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut theta = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
    let g = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
    let mut state = OptimState::new(&theta);
    adamw_step(&mut theta, &g, &mut state, &cfg, 0.1).unwrap();
    assert!((theta.data()[0] - 0.9).abs() < 1e-8);
    assert_eq!(state.step, 1);
}

#[test]
fn zero_gradient_without_decay_changes_nothing() {
    let cfg = AdamWConfig { weight_decay: 0.0, ..AdamWConfig::default() };
    let mut theta = Tensor::<f64>::from_f64(&[3], &[0.5, -1.0, 2.0]).unwrap();
    let before = theta.clone();
    let mut state = OptimState::new(&theta);
    for _ in 0..3 {
        adamw_step(&mut theta, &Tensor::zeros(&[3]), &mut state, &cfg, 0.1).unwrap();
    }
    assert_eq!(theta, before);
    assert_eq!(state.step, 3);
}

#[test]
fn nan_gradient_names_the_group() {
    let mut model = Backbone::<f32>::from_config(&tiny()).unwrap();
    let mut grads = model.zeroed();
    {
        let mut ps = grads.params_mut();
        let p = ps.iter_mut().find(|p| p.name == "head.fc.weight").unwrap();
        p.tensor.data_mut()[0] = f32::NAN;
    }
    let mut state = OptimState::new(&model);
    let err = adamw_step(&mut model, &grads, &mut state, &AdamWConfig::default(), 1e-3).unwrap_err();
    match err {
        Error::Numerical(m) => assert!(m.contains("head.fc.weight"), "{m}"),
        other => panic!("{other}"),
    }
    assert_eq!(state.step, 0);
}

#[test]
fn biases_and_norms_skip_decay() {
    let mut model = Backbone::<f32>::from_config(&tiny()).unwrap();
    let before = model.clone();
    let grads = model.zeroed();
    let mut state = OptimState::new(&model);
    let cfg = AdamWConfig { weight_decay: 0.5, ..AdamWConfig::default() };
    adamw_step(&mut model, &grads, &mut state, &cfg, 0.1).unwrap();
    for (p, q) in model.params().iter().zip(before.params()) {
        if p.decay {
            let expect = q.tensor.scale(0.95);
            assert!(p.tensor.max_abs_diff(&expect) < 1e-6, "{}", p.name);
        } else {
            assert_eq!(p.tensor, q.tensor, "{}", p.name);
        }
    }
}

#[test]
fn schedule_warms_up_then_decays_to_floor() {
    let s = LrSchedule::new(1e-3, 1000);
    assert_eq!(s.warmup_steps, 50);
    assert!(s.lr(0) < s.lr(10));
    assert!((s.lr(49) - 1e-3).abs() < 1e-15);
    let mut prev = s.lr(50);
    for t in 51..1000 {
        let l = s.lr(t);
        assert!(l <= prev + 1e-18);
        prev = l;
    }
    assert!((s.lr(999) - 1e-5).abs() < 1e-9);
    assert!((s.lr(5000) - 1e-5).abs() < 1e-12);
    // the floor never exceeds the peak
    let low = LrSchedule::new(1e-6, 100);
    assert!((low.lr(99) - 1e-6).abs() < 1e-15);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = Tensor::<f64>::from_f64(&[2], &[30.0, 40.0]).unwrap();
    let n = clip_grad_norm(&mut g, 5.0);
    assert_eq!(n, 50.0);
    assert!((g.data()[0] - 3.0).abs() < 1e-12 && (g.data()[1] - 4.0).abs() < 1e-12);
    let mut small = Tensor::<f64>::from_f64(&[2], &[0.3, 0.4]).unwrap();
    clip_grad_norm(&mut small, 5.0);
    assert_eq!(small.data(), &[0.3, 0.4]);
}

// -------------------------------------------------------- cross entropy

#[test]
fn uniform_logits_give_log_k() {
    let logits = Tensor::<f64>::zeros(&[3, 7]);
    let (loss, _) = softmax_cross_entropy(&logits, &[0, 3, 6]).unwrap();
    assert!((loss - 7f64.ln()).abs() < 1e-12);
}

#[test]
fn confident_correct_logit_gives_zero_loss() {
    let logits = Tensor::<f64>::from_f64(&[1, 3], &[1000.0, 0.0, -5.0]).unwrap();
    let (loss, grad) = softmax_cross_entropy(&logits, &[0]).unwrap();
    assert!(loss.abs() < 1e-12);
    assert!(grad.data().iter().all(|g| g.abs() < 1e-12));
}

#[test]
fn cross_entropy_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = Tensor::<f64>::uniform(&[4, 6], -3.0, 3.0, &mut rng);
    let labels = [1, 5, 0, 3];
    let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
    for i in 0..logits.len() {
        let h = 1e-5;
        let mut up = logits.clone();
        up.data_mut()[i] += h;
        let mut dn = logits.clone();
        dn.data_mut()[i] -= h;
        let num = (softmax_cross_entropy(&up, &labels).unwrap().0 - softmax_cross_entropy(&dn, &labels).unwrap().0) / (2.0 * h);
        assert!((num - grad.data()[i]).abs() < 1e-8, "coord {i}: {num} vs {}", grad.data()[i]);
    }
}

#[test]
fn out_of_range_label_is_a_data_error() {
    let logits = Tensor::<f64>::zeros(&[2, 3]);
    match softmax_cross_entropy(&logits, &[0, 3]).unwrap_err() {
        Error::Data(m) => assert!(m.contains("index 1"), "{m}"),
        other => panic!("{other}"),
    }
}

// ------------------------------------------------------------- datasets

fn fixture() -> Vec<u8> {
    let mut bytes = Vec::new();
    for (label, base) in [(3u8, 0usize), (9u8, 7usize)] {
        bytes.push(label);
        bytes.extend((0..CIFAR_RECORD - 1).map(|i| ((i * 31 + base) % 256) as u8));
    }
    bytes
}

#[test]
fn cifar_fixture_decodes_exactly() {
    let d = parse_cifar10(&fixture(), Split::Train).unwrap();
    assert_eq!(d.len(), 2);
    assert_eq!(d.labels, vec![3, 9]);
    assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
    for (rec, base) in [(0usize, 0usize), (1, 7)] {
        let img = d.image(rec);
        for i in 0..3072 {
            assert_eq!(img[i], ((i * 31 + base) % 256) as u8 as f32 / 255.0);
        }
    }
    // channel-planar: green starts 1024 bytes into the pixel block
    assert_eq!(d.image(0)[1024], ((1024 * 31) % 256) as f32 / 255.0);
}

#[test]
fn cifar_files_load_from_a_directory() {
    let dir = tempdir().unwrap();
    let bytes = fixture();
    for k in 1..=5 {
        std::fs::write(dir.path().join(format!("data_batch_{k}.bin")), &bytes).unwrap();
    }
    std::fs::write(dir.path().join("test_batch.bin"), &bytes[..CIFAR_RECORD]).unwrap();
    let train = DataSource::Cifar10(dir.path().to_path_buf()).load(Split::Train, 10, 32).unwrap();
    assert_eq!(train.len(), 10);
    let val = DataSource::Cifar10(dir.path().to_path_buf()).load(Split::Val, 10, 32).unwrap();
    assert_eq!(val.labels, vec![3]);
}

#[test]
fn truncated_cifar_file_names_sizes() {
    let bytes = fixture();
    let err = parse_cifar10(&bytes[..bytes.len() - 100], Split::Train).unwrap_err();
    match err {
        Error::Format(m) => {
            assert!(m.contains(&(2 * CIFAR_RECORD - 100).to_string()), "{m}");
            assert!(m.contains(&(2 * CIFAR_RECORD).to_string()), "{m}");
        }
        other => panic!("{other}"),
    }
}

#[test]
fn bad_cifar_label_names_the_record() {
    let mut bytes = fixture();
    bytes[CIFAR_RECORD] = 10;
    match parse_cifar10(&bytes, Split::Train).unwrap_err() {
        Error::Data(m) => assert!(m.contains("record 1"), "{m}"),
        other => panic!("{other}"),
    }
}

#[test]
fn missing_cifar_directory_is_a_data_error() {
    let err = DataSource::Cifar10("/nonexistent/cifar".into()).load(Split::Train, 10, 32).unwrap_err();
    assert!(matches!(err, Error::Data(_)), "{err}");
}

#[test]
fn real_cifar_mean_pixel_is_plausible() {
    let Ok(dir) = std::env::var("VIK_CIFAR10") else {
        eprintln!("VIK_CIFAR10 not set; skipping");
        return;
    };
    let d = data::load_cifar10_file(&std::path::Path::new(&dir).join("data_batch_1.bin"), Split::Train).unwrap();
    assert_eq!(d.len(), 10000);
    let m = d.mean_pixel();
    assert!((0.4..=0.5).contains(&m), "{m}");
}

#[test]
fn synthetic_data_is_seeded() {
    let a = synth(3, 4, Split::Train);
    let b = synth(3, 4, Split::Train);
    assert_eq!(a.images, b.images);
    assert_eq!(a.labels, b.labels);
    assert_ne!(a.images, synth(4, 4, Split::Train).images);
    assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    assert_ne!(val_seed(3), 3);
}

#[test]
fn noiseless_synthetic_classes_are_constant() {
    let spec = SynthSpec { noise: 0.0, ..SynthSpec::new(1, 3, 4, 16) };
    let d = synth_dataset(&spec, Split::Train).unwrap();
    for c in 0..4 {
        let first = d.image(c).to_vec();
        for k in 1..3 {
            assert_eq!(d.image(c + 4 * k), &first[..]);
        }
    }
    assert_ne!(d.image(0), d.image(1));
}

/// Least squares on one-hot targets from per-channel means plus a bias.
#[test]
fn linear_probe_on_pooled_pixels_is_weak() {
    let feats = |d: &Dataset| -> nalgebra::DMatrix<f64> {
        let plane = 32 * 32;
        nalgebra::DMatrix::from_fn(d.len(), 4, |i, j| {
            if j == 3 {
                1.0
            } else {
                d.image(i)[j * plane..(j + 1) * plane].iter().map(|&v| v as f64).sum::<f64>() / plane as f64
            }
        })
    };
    let train = synth(0, 100, Split::Train);
    let val = synth(val_seed(0), 40, Split::Val);
    let x = feats(&train);
    let y = nalgebra::DMatrix::from_fn(train.len(), 10, |i, j| (train.labels[i] == j) as u8 as f64);
    let w = x.clone().svd(true, true).solve(&y, 1e-12).unwrap();
    let scores = feats(&val) * w;
    let correct = (0..val.len())
        .filter(|&i| scores.row(i).transpose().argmax().0 == val.labels[i])
        .count();
    let acc = correct as f64 / val.len() as f64;
    assert!(acc < 0.6, "linear probe reached {acc}");
}

// ------------------------------------------------------------- training

fn quick(epochs: usize, lr: f64, batch: usize) -> TrainOptions {
    TrainOptions { epochs, lr, batch_size: batch, seed: 11, threads: Some(2), ..TrainOptions::default() }
}

#[test]
fn overfits_one_batch() {
    let data = synth(2, 4, Split::Train).truncated(32);
    let out = train_loop(&tiny(), &data, None, &quick(200, 1e-2, 32)).unwrap();
    let loss: Vec<f64> = out.history.iter().map(|m| m.train_loss).collect();
    assert!(loss[199] < 0.05 * loss[0], "{} -> {}", loss[0], loss[199]);
    let down = loss[20..].windows(2).filter(|w| w[1] <= w[0]).count();
    assert!(down as f64 >= 0.9 * (loss.len() - 21) as f64, "{down} monotone steps");
    assert_eq!(out.checkpoint.step, 200);
}

#[test]
fn zero_learning_rate_freezes_the_model() {
    let data = synth(2, 2, Split::Train);
    let cfg = tiny();
    let start = Backbone::<f32>::from_config(&cfg).unwrap();
    let out = train_loop(&cfg, &data, None, &quick(3, 0.0, 8)).unwrap();
    for (p, q) in out.checkpoint.model.params().iter().zip(start.params()) {
        assert_eq!(p.tensor, q.tensor, "{}", p.name);
    }
    let l0 = out.history[0].train_loss;
    assert!(out.history.iter().all(|m| (m.train_loss - l0).abs() < 1e-6));
}

#[test]
fn training_is_bit_deterministic_across_thread_counts() {
    let data = synth(5, 3, Split::Train);
    let val = synth(val_seed(5), 1, Split::Val);
    let a = train_loop(&tiny(), &data, Some(&val), &quick(2, 1e-3, 16)).unwrap();
    let b = train_loop(&tiny(), &data, Some(&val), &TrainOptions { threads: Some(1), ..quick(2, 1e-3, 16) }).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(encode(&a.checkpoint), encode(&b.checkpoint));
    let c = train_loop(&tiny(), &data, Some(&val), &TrainOptions { seed: 12, ..quick(2, 1e-3, 16) }).unwrap();
    assert_ne!(a.history, c.history);
}

#[test]
fn training_writes_metrics_and_checkpoints() {
    let dir = tempdir().unwrap();
    let data = synth(5, 2, Split::Train);
    let val = synth(val_seed(5), 1, Split::Val);
    let opts = TrainOptions { out_dir: Some(dir.path().to_path_buf()), ..quick(2, 1e-3, 8) };
    let out = train_loop(&tiny(), &data, Some(&val), &opts).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,step,train_loss,train_acc,val_acc,lr");
    assert_eq!(lines.len(), 3);
    for f in ["last.vikc", "best.vikc", "final.vikc"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    // a reloaded checkpoint reproduces the logged train accuracy exactly
    let ck = load_checkpoint(&dir.path().join("final.vikc"), &LoadOptions::default()).unwrap();
    let acc = evaluate(&ck.model, &data, &thread_pool(Some(3)).unwrap()).unwrap();
    assert_eq!(acc, out.history[1].train_acc);
}

#[test]
fn untrained_model_is_near_chance() {
    let data = synth(9, 20, Split::Val);
    let model = Backbone::<f32>::from_config(&tiny()).unwrap();
    let pred = predict(&model, &data, &thread_pool(Some(2)).unwrap()).unwrap();
    let acc = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count() as f64 / data.len() as f64;
    assert!((0.0..=0.3).contains(&acc), "{acc}");
}

#[test]
fn mismatched_data_is_rejected() {
    let data = synth_dataset(&SynthSpec::new(0, 2, 10, 16), Split::Train).unwrap();
    let err = train_loop(&tiny(), &data, None, &quick(1, 1e-3, 8)).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err}");
}

// ---------------------------------------------------------- checkpoints

fn random_checkpoint(seed: u64) -> Checkpoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Backbone::<f32>::from_config(&tiny()).unwrap();
    for p in model.params_mut() {
        for v in p.tensor.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let mut optim = OptimState::new(&model);
    optim.step = 7;
    for t in optim.m.iter_mut().chain(optim.v.iter_mut()) {
        for v in t.data_mut() {
            *v = rng.gen();
        }
    }
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 1);
    let _: u64 = r.gen();
    Checkpoint { model, optim: Some(optim), rng: Some(r), epoch: 3, step: 7 }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("a.vikc");
    let ck = random_checkpoint(1);
    save_checkpoint(&ck, &path).unwrap();
    let back = load_checkpoint(&path, &LoadOptions { expected: Some(tiny()), allow_mismatch: false }).unwrap();
    for (p, q) in back.model.params().iter().zip(ck.model.params()) {
        assert_eq!(p.name, q.name);
        let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(p.tensor), bits(q.tensor), "{}", p.name);
    }
    assert_eq!(back.optim, ck.optim);
    let (mut r1, mut r2) = (back.rng.clone().unwrap(), ck.rng.clone().unwrap());
    assert_eq!(r1.gen::<u64>(), r2.gen::<u64>());
    assert_eq!((back.epoch, back.step), (3, 7));

    let path2 = dir.path().join("b.vikc");
    save_checkpoint(&back, &path2).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
}

#[test]
fn checkpoint_without_optional_sections() {
    let ck = Checkpoint { optim: None, rng: None, ..random_checkpoint(2) };
    let back = decode(&encode(&ck), &LoadOptions::default()).unwrap();
    assert!(back.optim.is_none() && back.rng.is_none());
    assert_eq!(encode(&back), encode(&ck));
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let bytes = encode(&random_checkpoint(3));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(decode(&bad, &LoadOptions::default()), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 99;
    assert!(matches!(decode(&bad, &LoadOptions::default()), Err(Error::Format(_))));
    assert!(matches!(decode(&bytes[..bytes.len() - 3], &LoadOptions::default()), Err(Error::Format(_))));
    let mut long = bytes.clone();
    long.push(0);
    assert!(matches!(decode(&long, &LoadOptions::default()), Err(Error::Format(_))));
}

#[test]
fn config_digest_mismatch_needs_override() {
    let bytes = encode(&random_checkpoint(4));
    let mut other = tiny();
    other.seed = 99;
    let strict = LoadOptions { expected: Some(other.clone()), allow_mismatch: false };
    assert!(matches!(decode(&bytes, &strict), Err(Error::Config(_))));
    let lenient = LoadOptions { expected: Some(other), allow_mismatch: true };
    assert!(decode(&bytes, &lenient).is_ok());
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let err = load_checkpoint(std::path::Path::new("/nonexistent/x.vikc"), &LoadOptions::default()).unwrap_err();
    assert!(err.to_string().contains("/nonexistent/x.vikc"));
}
