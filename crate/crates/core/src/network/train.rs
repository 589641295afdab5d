use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, TrainingState};
use super::layers::Activations;
use super::model::{cross_entropy_loss, l2_penalty, Mode, Network};
use super::optim::{lookahead, nesterov_step};
use super::{ArchitectureConfig, OptimizerConfig, Real};
use crate::dataset::{batches, Batch, DatasetManifest, ImageLoader, Split};
use crate::error::{Error, Result};
use crate::raster::write_atomic;
use crate::seed;

pub const CHECKPOINT_FILE: &str = "checkpoint.utnc";
pub const METRICS_FILE: &str = "metrics.csv";
/// Epoch window and top-1 spread used for the plateau flag.
const PLATEAU_WINDOW: usize = 5;
const PLATEAU_SPREAD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
    pub lr: f64,
    /// Wall time of the epoch, rounded to milliseconds.
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub top1: f64,
    pub top5: f64,
    pub evaluated: usize,
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    pub seed: u64,
    /// Directory receiving the checkpoint and metrics after every epoch.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<EpochMetrics>,
    /// Val top-1 moved less than 0.01 over the last five epochs.
    pub plateaued: bool,
}

/// Class indices of the `k` highest probabilities, ties to the lower index.
pub fn top_k<T: Real>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| {
        row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Top-1 and top-min(5, C) accuracy of probability rows.
pub fn accuracy<T: Real>(probs: &[T], num_classes: usize, labels: &[usize]) -> Result<EvalResult> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let k5 = num_classes.min(5);
    let (mut h1, mut h5) = (0usize, 0usize);
    for (i, &l) in labels.iter().enumerate() {
        let top = top_k(&probs[i * num_classes..(i + 1) * num_classes], k5);
        h1 += usize::from(top[0] == l);
        h5 += usize::from(top.contains(&l));
    }
    let n = labels.len() as f64;
    Ok(EvalResult { top1: h1 as f64 / n, top5: h5 as f64 / n, evaluated: labels.len() })
}

fn batch_activations(b: &Batch) -> Activations<f32> {
    let [n, h, w, c] = b.inputs.shape;
    Activations::from_nhwc(n, h, w, c, &b.inputs.data)
}

pub fn evaluate<L: ImageLoader + ?Sized>(
    net: &Network<f32>,
    manifest: &DatasetManifest,
    split: Split,
    loader: &L,
    batch_size: usize,
) -> Result<EvalResult> {
    let crop = net.arch.input_size as u32;
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for b in batches(manifest, split, batch_size, 0, 0, crop, loader)? {
        let b = b?;
        probs.extend(net.predict(&batch_activations(&b))?);
        labels.extend_from_slice(&b.labels);
    }
    accuracy(&probs, net.num_classes(), &labels)
}

pub fn write_metrics(path: &Path, metrics: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for m in metrics {
        w.serialize(m)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Trains from scratch for `opt.epochs` epochs.
pub fn train<L: ImageLoader + ?Sized>(
    manifest: &DatasetManifest,
    loader: &L,
    arch: &ArchitectureConfig,
    opt: &OptimizerConfig,
    options: &TrainOptions,
) -> Result<TrainOutcome> {
    opt.validate()?;
    manifest.validate()?;
    if arch.num_classes != manifest.num_classes() {
        return Err(Error::invalid(format!(
            "architecture has {} classes, manifest has {}",
            arch.num_classes,
            manifest.num_classes()
        )));
    }
    if manifest.rows_in(Split::Train).is_empty() {
        return Err(Error::invalid("manifest has no training rows"));
    }
    let has_val = !manifest.rows_in(Split::Val).is_empty();
    let seed = options.seed;
    let mut net: Network<f32> = Network::new(arch.clone(), seed)?;
    let mut vel = net.params.zeros_like();
    let mu = opt.momentum as f32;
    let l2 = opt.l2 as f32;
    let crop = arch.input_size as u32;
    let mut metrics = Vec::new();
    let mut checkpoint = None;

    for epoch in 0..opt.epochs {
        let started = Instant::now();
        let lr = opt.lr_at(epoch);
        let (mut loss_sum, mut seen) = (0.0f64, 0usize);
        for (bi, b) in batches(manifest, Split::Train, opt.batch_size, seed, epoch, crop, loader)?.enumerate() {
            let b = b?;
            let x = batch_activations(&b);
            let look = lookahead(&net.params, &vel, mu);
            let dropout_seed = seed::subseed(seed, "dropout", &[&(epoch as u64).to_le_bytes(), &(bi as u64).to_le_bytes()]);
            let fwd = net.forward_with(&look, &x, Mode::Train { dropout_seed })?;
            let loss = cross_entropy_loss(&fwd.probs, &b.labels, fwd.num_classes) + l2_penalty(&look, l2);
            if !loss.is_finite() {
                return Err(Error::DivergedTraining { epoch: epoch + 1, batch: bi + 1, loss: loss as f64 });
            }
            let grads = net.backward(&look, &fwd, &b.labels, l2)?;
            nesterov_step(&mut net.params, &mut vel, &grads, lr as f32, mu);
            net.update_running_stats(&fwd)?;
            loss_sum += loss as f64 * b.labels.len() as f64;
            seen += b.labels.len();
        }
        let val = if has_val { Some(evaluate(&net, manifest, Split::Val, loader, opt.batch_size)?) } else { None };
        let m = EpochMetrics {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_top1: val.map(|v| v.top1),
            val_top5: val.map(|v| v.top5),
            lr,
            seconds: (started.elapsed().as_secs_f64() * 1000.0).round() / 1000.0,
        };
        log::info!(
            "epoch {} loss {:.4} val top-1 {} lr {:.5}",
            m.epoch,
            m.train_loss,
            m.val_top1.map_or("-".into(), |v| format!("{v:.3}")),
            lr
        );
        metrics.push(m);
        let state = TrainingState { epoch: epoch + 1, seed, optimizer: opt.clone(), classes: manifest.classes() };
        let ck = Checkpoint::from_network(&net, state, Some(vel.clone()));
        if let Some(dir) = &options.out_dir {
            ck.save(&dir.join(CHECKPOINT_FILE))?;
            write_metrics(&dir.join(METRICS_FILE), &metrics)?;
        }
        checkpoint = Some(ck);
    }

    let tail: Vec<f64> = metrics.iter().rev().take(PLATEAU_WINDOW).filter_map(|m| m.val_top1).collect();
    let plateaued = tail.len() == PLATEAU_WINDOW && {
        let (lo, hi) = tail.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        hi - lo < PLATEAU_SPREAD
    };
    log::info!("val top-1 plateaued over last {PLATEAU_WINDOW} epochs: {plateaued}");
    Ok(TrainOutcome { checkpoint: checkpoint.expect("at least one epoch"), metrics, plateaued })
}
