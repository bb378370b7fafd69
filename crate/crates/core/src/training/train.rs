//! Mini-batch training with AdamW, warmup + cosine schedule and gradient
//! clipping.
//!
//! Each batch is cut into fixed-size chunks that may run on different
//! threads; chunk gradients are summed in chunk order, so results do not
//! depend on the number of threads.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::grad::{argmax_rows, softmax_cross_entropy};
use crate::params::Parameterized;
use crate::tensor::Tensor;
use crate::training::checkpoint::{save_checkpoint, Checkpoint};
use crate::training::data::Dataset;
use crate::training::optim::{adamw_step, clip_grad_norm, AdamWConfig, LrSchedule, OptimState};

/// Images per work item; fixed so that reduction order never changes.
pub const CHUNK: usize = 8;
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate.
    pub lr: f64,
    pub adamw: AdamWConfig,
    pub clip_norm: f64,
    /// Seeds shuffling and augmentation.
    pub seed: u64,
    /// Random horizontal flips.
    pub augment: bool,
    /// Worker threads; `None` uses the machine's parallelism.
    pub threads: Option<usize>,
    /// Where metrics and checkpoints go; nothing is written when `None`.
    pub out_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 30,
            batch_size: 64,
            lr: 1e-3,
            adamw: AdamWConfig::default(),
            clip_norm: 5.0,
            seed: 0,
            augment: false,
            threads: None,
            out_dir: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub train_loss: f64,
    /// Accuracy of the end-of-epoch weights on the (unaugmented) train split.
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    /// Rate used by the last step of the epoch.
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "epoch,step,train_loss,train_acc,val_acc,lr";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.8},{:.6},{},{:.6e}",
            self.epoch,
            self.step,
            self.train_loss,
            self.train_acc,
            self.val_acc.map(|v| format!("{v:.6}")).unwrap_or_default(),
            self.lr
        )
    }
}

pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for m in history {
        s.push_str(&m.csv_row());
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochMetrics>,
    pub checkpoint: Checkpoint,
}

pub fn thread_pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("cannot start worker threads: {e}")))
}

/// Reads `VIK_THREADS`; unset or invalid means machine parallelism.
pub fn threads_from_env() -> Option<usize> {
    std::env::var("VIK_THREADS").ok().and_then(|v| v.trim().parse().ok()).filter(|&n| n > 0)
}

fn check_data(config: &BackboneConfig, data: &Dataset) -> Result<()> {
    let want = [config.in_channels, config.resolution[0], config.resolution[1]];
    if data.image_shape() != want || data.num_classes > config.num_classes {
        return Err(Error::Config(format!(
            "{} data has images {:?} and {} classes; the model expects {:?} and {} classes",
            data.split,
            data.image_shape(),
            data.num_classes,
            want,
            config.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Data(format!("{} split is empty", data.split)));
    }
    Ok(())
}

/// Top-1 predictions over a whole dataset.
pub fn predict(model: &Backbone<f32>, data: &Dataset, pool: &rayon::ThreadPool) -> Result<Vec<usize>> {
    check_data(model.config(), data)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let parts: Vec<Result<Vec<usize>>> = pool.install(|| {
        idx.par_chunks(EVAL_CHUNK)
            .map(|c| Ok(argmax_rows(&model.forward(&data.gather(c, None))?)))
            .collect()
    });
    let mut out = Vec::with_capacity(data.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Fraction of correctly classified items.
pub fn evaluate(model: &Backbone<f32>, data: &Dataset, pool: &rayon::ThreadPool) -> Result<f64> {
    let pred = predict(model, data, pool)?;
    let correct = pred.iter().zip(&data.labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / data.len() as f64)
}

/// Loss and gradient of one chunk, with the loss already weighted by the
/// chunk's share of the batch.
fn chunk_grad(model: &Backbone<f32>, x: &Tensor<f32>, labels: &[usize], batch: usize) -> Result<(f64, Backbone<f32>)> {
    let (logits, tape) = model.forward_tape(x)?;
    let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
    let w = labels.len() as f32 / batch as f32;
    let mut grads = model.zeroed();
    model.backward(tape, &dlogits.scale(w), &mut grads)?;
    Ok((loss as f64 * w as f64, grads))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a fresh model built from `config` (weights seeded by `config.seed`).
pub fn train_loop(config: &BackboneConfig, train: &Dataset, val: Option<&Dataset>, opts: &TrainOptions) -> Result<TrainOutcome> {
    let model = Backbone::<f32>::from_config(config)?;
    train_from(model, train, val, opts)
}

/// Trains an existing model.
pub fn train_from(mut model: Backbone<f32>, train: &Dataset, val: Option<&Dataset>, opts: &TrainOptions) -> Result<TrainOutcome> {
    check_data(model.config(), train)?;
    if let Some(v) = val {
        check_data(model.config(), v)?;
    }
    if opts.batch_size == 0 || opts.epochs == 0 {
        return Err(Error::Config("epochs and batch size must be positive".into()));
    }
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let pool = thread_pool(opts.threads)?;
    let steps_per_epoch = train.len().div_ceil(opts.batch_size) as u64;
    let schedule = LrSchedule::new(opts.lr, steps_per_epoch * opts.epochs as u64);
    let mut state = OptimState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let mut best_val = f64::NEG_INFINITY;
    let mut lr = 0.0;

    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(opts.batch_size) {
            let flips: Vec<bool> = batch.iter().map(|_| opts.augment && rng.gen_bool(0.5)).collect();
            let x = train.gather(batch, Some(&flips));
            let per = x.len() / batch.len();
            let parts: Vec<Result<(f64, Backbone<f32>)>> = pool.install(|| {
                (0..batch.len().div_ceil(CHUNK))
                    .into_par_iter()
                    .map(|k| {
                        let lo = k * CHUNK;
                        let hi = (lo + CHUNK).min(batch.len());
                        let shape = [hi - lo, x.shape()[1], x.shape()[2], x.shape()[3]];
                        let xc = Tensor::new(&shape, x.data()[lo * per..hi * per].to_vec())?;
                        let labels: Vec<usize> = batch[lo..hi].iter().map(|&i| train.labels[i]).collect();
                        chunk_grad(&model, &xc, &labels, batch.len())
                    })
                    .collect()
            });
            let mut batch_loss = 0.0;
            let mut grads: Option<Backbone<f32>> = None;
            for part in parts {
                let (l, g) = part?;
                batch_loss += l;
                match &mut grads {
                    Some(acc) => acc.accumulate(&g)?,
                    None => grads = Some(g),
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite training loss at epoch {epoch}, step {}",
                    state.step + 1
                )));
            }
            let mut grads = grads.expect("non-empty batch");
            clip_grad_norm(&mut grads, opts.clip_norm);
            lr = schedule.lr(state.step);
            adamw_step(&mut model, &grads, &mut state, &opts.adamw, lr)?;
            loss_sum += batch_loss * batch.len() as f64;
        }
        let train_acc = evaluate(&model, train, &pool)?;
        let val_acc = val.map(|v| evaluate(&model, v, &pool)).transpose()?;
        let m = EpochMetrics {
            epoch,
            step: state.step,
            train_loss: loss_sum / train.len() as f64,
            train_acc,
            val_acc,
            lr,
        };
        log::info!("{}", m.csv_row());
        history.push(m);

        if let Some(dir) = &opts.out_dir {
            let ck = Checkpoint {
                model: model.clone(),
                optim: Some(state.clone()),
                rng: Some(rng.clone()),
                epoch: epoch as u64,
                step: state.step,
            };
            write_text(&dir.join("metrics.csv"), &metrics_csv(&history))?;
            save_checkpoint(&ck, &dir.join("last.vikc"))?;
            if let Some(v) = val_acc {
                if v > best_val {
                    best_val = v;
                    save_checkpoint(&ck, &dir.join("best.vikc"))?;
                }
            }
        }
    }
    let checkpoint = Checkpoint {
        model,
        optim: Some(state.clone()),
        rng: Some(rng),
        epoch: opts.epochs as u64,
        step: state.step,
    };
    if let Some(dir) = &opts.out_dir {
        save_checkpoint(&checkpoint, &dir.join("final.vikc"))?;
    }
    Ok(TrainOutcome { history, checkpoint })
}
