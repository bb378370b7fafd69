//! Datasets: a seeded synthetic grating generator and the CIFAR-10 binary
//! format.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
        })
    }
}

/// Images `[n,C,H,W]` with values in `[0,1]` and integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        if images.rank() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(i) = labels.iter().position(|&l| l >= num_classes) {
            return Err(Error::Data(format!("label {} at index {i} is out of range for {num_classes} classes", labels[i])));
        }
        Ok(Dataset { images, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[C, H, W]`
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    fn per_image(&self) -> usize {
        self.image_shape().iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.per_image();
        &self.images.data()[i * n..(i + 1) * n]
    }

    /// Copies the listed images into a batch, mirroring those with `flip[k]` set.
    pub fn gather(&self, idx: &[usize], flip: Option<&[bool]>) -> Tensor<f32> {
        let [c, h, w] = self.image_shape();
        let mut out = Vec::with_capacity(idx.len() * c * h * w);
        for (k, &i) in idx.iter().enumerate() {
            let img = self.image(i);
            if flip.is_some_and(|f| f[k]) {
                for row in img.chunks(w) {
                    out.extend(row.iter().rev());
                }
            } else {
                out.extend_from_slice(img);
            }
        }
        Tensor::new(&[idx.len(), c, h, w], out).expect("consistent batch shape")
    }

    /// First `n` items.
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        let per = self.per_image();
        let [c, h, w] = self.image_shape();
        Dataset {
            images: Tensor::new(&[n, c, h, w], self.images.data()[..n * per].to_vec()).unwrap_or_else(|_| self.images.clone()),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn mean_pixel(&self) -> f64 {
        self.images.data().iter().map(|&v| v as f64).sum::<f64>() / self.images.len() as f64
    }
}

/// Parameters of the synthetic grating task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub seed: u64,
    pub per_class: usize,
    pub classes: usize,
    pub resolution: usize,
    pub noise: f64,
}

impl SynthSpec {
    pub fn new(seed: u64, per_class: usize, classes: usize, resolution: usize) -> Self {
        SynthSpec { seed, per_class, classes, resolution, noise: 0.1 }
    }
}

/// Seed used for the held-out split of a synthetic run.
pub fn val_seed(seed: u64) -> u64 {
    seed ^ 0x5EED_0F_7A11_DA7A
}

/// Class `c` of `K` is a sinusoidal grating at orientation `πc/K` with
/// `c + 1` cycles across the image, random phase, and Gaussian pixel noise.
/// Items are interleaved by class.
pub fn synth_dataset(spec: &SynthSpec, split: Split) -> Result<Dataset> {
    let SynthSpec { seed, per_class, classes, resolution: r, noise } = *spec;
    if classes < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {classes}")));
    }
    if per_class == 0 || r == 0 {
        return Err(Error::Config("synthetic data needs a positive size and resolution".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gauss = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let n = per_class * classes;
    let mut data = Vec::with_capacity(n * 3 * r * r);
    let mut labels = Vec::with_capacity(n);
    let mut plane = vec![0f64; r * r];
    for k in 0..n {
        let c = k % classes;
        let theta = std::f64::consts::PI * c as f64 / classes as f64;
        let freq = (c + 1) as f64;
        let phase = if noise > 0.0 { rng.gen_range(0.0..std::f64::consts::TAU) } else { 0.0 };
        let (ct, st) = (theta.cos(), theta.sin());
        for i in 0..r {
            for j in 0..r {
                let u = (j as f64 * ct + i as f64 * st) / r as f64;
                plane[i * r + j] = 0.5 + 0.4 * (std::f64::consts::TAU * freq * u + phase).sin();
            }
        }
        for _ in 0..3 {
            for &v in &plane {
                let e = if noise > 0.0 { gauss.sample(&mut rng) } else { 0.0 };
                data.push((v + e).clamp(0.0, 1.0) as f32);
            }
        }
        labels.push(c);
    }
    Dataset::new(Tensor::new(&[n, 3, r, r], data)?, labels, classes, split)
}

pub const CIFAR_RECORD: usize = 3073;
const CIFAR_SIDE: usize = 32;

/// Parses one CIFAR-10 binary batch file.
pub fn load_cifar10_file(path: &Path, split: Split) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes, split).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Records are one label byte then 3072 pixel bytes, channel-planar R, G, B,
/// each a row-major 32×32 plane.
pub fn parse_cifar10(bytes: &[u8], split: Split) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        let n = bytes.len().div_ceil(CIFAR_RECORD).max(1);
        return Err(Error::Format(format!(
            "size {} bytes is not a multiple of the {CIFAR_RECORD}-byte record (expected {} for {n} records)",
            bytes.len(),
            n * CIFAR_RECORD
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut data = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] > 9 {
            return Err(Error::Data(format!("record {i} has label byte {} (expected 0-9)", rec[0])));
        }
        labels.push(rec[0] as usize);
        data.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new(Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], data)?, labels, 10, split)
}

/// Files making up a split of the standard `cifar-10-batches-bin` layout.
pub fn cifar10_files(dir: &Path, split: Split) -> Vec<PathBuf> {
    match split {
        Split::Train => (1..=5).map(|k| dir.join(format!("data_batch_{k}.bin"))).collect(),
        Split::Val => vec![dir.join("test_batch.bin")],
    }
}

/// Loads and concatenates every batch file of a split.
pub fn load_cifar10_binary(dir: &Path, split: Split) -> Result<Dataset> {
    let files = cifar10_files(dir, split);
    if let Some(missing) = files.iter().find(|f| !f.is_file()) {
        return Err(Error::Data(format!("CIFAR-10 file {} not found", missing.display())));
    }
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        let d = load_cifar10_file(f, split)?;
        labels.extend(d.labels);
        images.extend(d.images.into_data());
    }
    let n = labels.len();
    Dataset::new(Tensor::new(&[n, 3, CIFAR_SIDE, CIFAR_SIDE], images)?, labels, 10, split)
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synth { seed: u64, per_class: usize },
    Cifar10(PathBuf),
}

impl DataSource {
    /// Parses `synth` or `cifar10:DIR`.
    pub fn parse(text: &str, synth_seed: u64, per_class: usize) -> Result<Self> {
        if text == "synth" {
            Ok(DataSource::Synth { seed: synth_seed, per_class })
        } else if let Some(dir) = text.strip_prefix("cifar10:") {
            Ok(DataSource::Cifar10(PathBuf::from(dir)))
        } else {
            Err(Error::Usage(format!("unknown data source '{text}' (expected synth or cifar10:DIR)")))
        }
    }

    /// Loads one split; synthetic held-out data uses a derived seed and a
    /// fifth of the training size.
    pub fn load(&self, split: Split, classes: usize, resolution: usize) -> Result<Dataset> {
        match self {
            DataSource::Synth { seed, per_class } => {
                let (s, n) = match split {
                    Split::Train => (*seed, *per_class),
                    Split::Val => (val_seed(*seed), (*per_class / 5).max(1)),
                };
                synth_dataset(&SynthSpec::new(s, n, classes, resolution), split)
            }
            DataSource::Cifar10(dir) => load_cifar10_binary(dir, split),
        }
    }

    /// Whether random horizontal flips are used while training.
    pub fn augments(&self) -> bool {
        matches!(self, DataSource::Cifar10(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn handcrafted_cifar_records() {
        let mut bytes = vec![3u8];
        bytes.extend((0..3072).map(|i| (i % 256) as u8));
        bytes.push(9);
        bytes.extend(std::iter::repeat_n(255u8, 3072));
        let d = parse_cifar10(&bytes, Split::Train).unwrap();
        assert_eq!(d.labels, vec![3, 9]);
        assert_eq!(d.images.shape(), &[2, 3, 32, 32]);
        assert_eq!(d.image(0)[1], 1.0 / 255.0);
        assert_eq!(d.image(0)[1024], 0.0);
        assert_eq!(d.image(0)[1025], 1.0 / 255.0);
        assert!(d.image(1).iter().all(|&v| v == 1.0));
    }

    #[test]
    fn truncated_file_is_a_format_error() {
        let err = parse_cifar10(&vec![0u8; 3000], Split::Train).unwrap_err();
        assert!(matches!(&err, Error::Format(m) if m.contains("3000") && m.contains("3073")), "{err}");
    }

    #[test]
    fn bad_label_names_the_record() {
        let mut bytes = vec![0u8; 2 * CIFAR_RECORD];
        bytes[CIFAR_RECORD] = 10;
        let err = parse_cifar10(&bytes, Split::Train).unwrap_err();
        assert!(matches!(&err, Error::Data(m) if m.contains("record 1")), "{err}");
    }

    #[test]
    fn synthetic_data_is_deterministic() {
        let s = SynthSpec::new(7, 3, 4, 16);
        assert_eq!(synth_dataset(&s, Split::Train).unwrap(), synth_dataset(&s, Split::Train).unwrap());
        let d = synth_dataset(&s, Split::Train).unwrap();
        assert_eq!(d.labels, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1, 2, 3]);
        assert!(d.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn noiseless_classes_are_constant() {
        let s = SynthSpec { noise: 0.0, ..SynthSpec::new(1, 3, 5, 8) };
        let d = synth_dataset(&s, Split::Train).unwrap();
        for c in 0..5 {
            assert_eq!(d.image(c), d.image(c + 5));
            assert_eq!(d.image(c), d.image(c + 10));
        }
        assert!(synth_dataset(&SynthSpec::new(1, 3, 1, 8), Split::Train).is_err());
    }

    #[test]
    fn flip_mirrors_rows() {
        let imgs = Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let d = Dataset::new(imgs, vec![0], 2, Split::Train).unwrap();
        assert_eq!(d.gather(&[0], Some(&[true])).data(), &[3.0, 2.0, 1.0, 6.0, 5.0, 4.0]);
    }
}
