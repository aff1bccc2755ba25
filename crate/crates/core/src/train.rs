//! Mini-batch training and evaluation of a [`Network`] on labeled cubes.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::{log_metrics, EpochRecord};
use crate::network::{Layer, LayerExtra, Network, Trace};
use crate::nn;
use crate::optim::{nesterov_step, OptimizerState, DEFAULT_LR, DEFAULT_MOMENTUM};
use crate::preprocess::CubeSample;
use crate::rng::{indexed_substream, substream, Stream};
use crate::tensor::Tensor;

pub const BEST_CHECKPOINT: &str = "best.ckpt";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub lr: f64,
    pub momentum: f64,
    /// Scans per split; a dataset with a different scan count is divided in
    /// the same proportions.
    pub train_scans: usize,
    pub val_scans: usize,
    pub test_scans: usize,
    pub checkpoint_dir: Option<PathBuf>,
    pub metrics_path: Option<PathBuf>,
    /// When false the metrics log records 0 elapsed seconds, so that
    /// identical runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 2,
            epochs: 10,
            seed: 0,
            lr: DEFAULT_LR,
            momentum: DEFAULT_MOMENTUM,
            train_scans: 720,
            val_scans: 80,
            test_scans: 88,
            checkpoint_dir: None,
            metrics_path: None,
            record_wall_time: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.train_scans + self.val_scans + self.test_scans == 0 {
            return Err(Error::Config("split counts are all zero".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "lr must be >= 0 and momentum in [0, 1), got {} and {}",
                self.lr, self.momentum
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
}

/// Stacks cubes into a `(batch, e, e, e, 1)` tensor plus 0/1 targets.
pub fn make_batch(samples: &[&CubeSample], edge: usize) -> Result<(Tensor<f32>, Vec<f32>)> {
    let cube = edge * edge * edge;
    let mut data = Vec::with_capacity(samples.len() * cube);
    for s in samples {
        if s.edge != edge || s.data.len() != cube {
            return Err(Error::ShapeMismatch(format!(
                "cube from {} has edge {}, network expects {edge}",
                s.source_series, s.edge
            )));
        }
        data.extend_from_slice(&s.data);
    }
    let x = Tensor::from_vec(&[samples.len(), edge, edge, edge, 1], data)?;
    Ok((x, samples.iter().map(|s| s.label as f32).collect()))
}

fn is_correct(p: f32, label: f32) -> bool {
    (p >= 0.5) == (label >= 0.5)
}

/// One pass over `samples` in epoch-seeded random order, one optimizer step
/// per batch (the last batch may be short; see [`batch_bounds`]). Reports mean loss and accuracy
/// of the pre-update predictions.
pub fn train_epoch(
    net: &mut Network<f32>,
    samples: &[CubeSample],
    config: &TrainConfig,
    state: &mut OptimizerState<f32>,
    epoch: usize,
) -> Result<EvalMetrics> {
    train_epoch_with(net, samples, config, state, epoch, |_| {})
}

/// [`train_epoch`] that reports each batch size after its optimizer step.
pub fn train_epoch_with(
    net: &mut Network<f32>,
    samples: &[CubeSample],
    config: &TrainConfig,
    state: &mut OptimizerState<f32>,
    epoch: usize,
    mut on_batch: impl FnMut(usize),
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut indexed_substream(
        config.seed,
        Stream::Shuffle,
        epoch as u64,
    ));

    let edge = net.input_edge();
    let bounds = batch_bounds(samples.len(), config.batch_size, net.spec().batchnorm);
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for w in bounds.windows(2) {
        let batch: Vec<&CubeSample> = order[w[0]..w[1]].iter().map(|&i| &samples[i]).collect();
        let (x, targets) = make_batch(&batch, edge)?;
        let (logits, trace) = net.forward_train(x)?;
        let (loss, grad) = nn::bce_with_logits(logits.data(), &targets)?;
        loss_sum += loss as f64 * batch.len() as f64;
        correct += logits
            .data()
            .iter()
            .zip(&targets)
            .filter(|(&z, &y)| is_correct(nn::sigmoid(z), y))
            .count();

        let grads = net.backward(&trace, Tensor::from_vec(&[batch.len(), 1], grad)?)?;
        net.update_running_stats(&trace);
        drop(trace);
        nesterov_step(&mut net.params_mut(), &grads, state)?;
        on_batch(batch.len());
    }
    Ok(EvalMetrics {
        loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

/// Batch start offsets plus `n`. With `fold_singleton`, a trailing batch of
/// one joins the previous batch (batchnorm needs two values per channel).
pub fn batch_bounds(n: usize, batch_size: usize, fold_singleton: bool) -> Vec<usize> {
    let mut bounds: Vec<usize> = (0..n).step_by(batch_size.max(1)).collect();
    if fold_singleton && bounds.len() > 1 && n - bounds[bounds.len() - 1] == 1 {
        bounds.pop();
    }
    bounds.push(n);
    bounds
}

/// Replaces the batchnorm inference moments with population moments of
/// `samples`, pooled over training-mode passes in fixed order. Each layer sees
/// the same batch-normalized inputs it sees during training. A trailing batch
/// of one is folded into the previous batch. No-op without batchnorm.
pub fn recalibrate_batchnorm(
    net: &mut Network<f32>,
    samples: &[CubeSample],
    batch_size: usize,
) -> Result<()> {
    if !net.spec().batchnorm {
        return Ok(());
    }
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let edge = net.input_edge();
    let bounds = batch_bounds(samples.len(), batch_size, true);

    // per batchnorm layer: (sum of value-weighted means, of second moments, value count)
    let mut acc: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    for w in bounds.windows(2) {
        let batch: Vec<&CubeSample> = samples[w[0]..w[1]].iter().collect();
        let (x, _) = make_batch(&batch, edge)?;
        let (_, trace) = net.forward_train(x)?;
        let caches = trace.extras.iter().filter_map(|e| match e {
            LayerExtra::BatchNorm(c) => Some(c),
            _ => None,
        });
        for (k, (cache, act)) in caches.zip(bn_inputs(&trace)).enumerate() {
            if acc.len() == k {
                let c = cache.batch_mean.len();
                acc.push((vec![0.0; c], vec![0.0; c], 0.0));
            }
            let n = (act / cache.batch_mean.len()) as f64;
            let (m1, m2, count) = &mut acc[k];
            for (j, (&m, &v)) in cache.batch_mean.iter().zip(&cache.batch_var).enumerate() {
                let (m, v) = (m as f64, v as f64);
                m1[j] += n * m;
                m2[j] += n * (v + m * m);
            }
            *count += n;
        }
    }
    let bns = net.layers_mut().iter_mut().filter_map(|l| match l {
        Layer::Conv { bn: Some(bn), .. } => Some(bn),
        _ => None,
    });
    for (bn, (m1, m2, count)) in bns.zip(&acc) {
        for j in 0..m1.len() {
            let mean = m1[j] / count;
            bn.running_mean.data_mut()[j] = mean as f32;
            bn.running_var.data_mut()[j] = (m2[j] / count - mean * mean).max(0.0) as f32;
        }
    }
    Ok(())
}

/// Element counts of the tensors entering each batchnorm, in layer order.
fn bn_inputs(trace: &Trace<f32>) -> impl Iterator<Item = usize> + '_ {
    trace
        .extras
        .iter()
        .zip(&trace.activations[1..])
        .filter(|(e, _)| matches!(e, LayerExtra::BatchNorm(_)))
        .map(|(_, a)| a.len())
}

/// Mean BCE and accuracy at threshold 0.5, inference mode, no mutation.
pub fn evaluate(
    net: &Network<f32>,
    samples: &[CubeSample],
    batch_size: usize,
) -> Result<EvalMetrics> {
    if samples.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let edge = net.input_edge();
    let mut loss_sum = 0.0f64;
    let mut correct = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let batch: Vec<&CubeSample> = chunk.iter().collect();
        let (x, targets) = make_batch(&batch, edge)?;
        let logits = net.forward(&x)?;
        let (loss, _) = nn::bce_with_logits(logits.data(), &targets)?;
        loss_sum += loss as f64 * batch.len() as f64;
        correct += logits
            .data()
            .iter()
            .zip(&targets)
            .filter(|(&z, &y)| is_correct(nn::sigmoid(z), y))
            .count();
    }
    Ok(EvalMetrics {
        loss: loss_sum / samples.len() as f64,
        accuracy: correct as f64 / samples.len() as f64,
    })
}

/// Series ids assigned to each split; no id appears twice.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SeriesSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Shuffles the distinct series ids (seeded) and deals them out in the
/// configured proportions.
pub fn split_series<'a>(
    series: impl IntoIterator<Item = &'a str>,
    config: &TrainConfig,
) -> SeriesSplit {
    let unique: BTreeSet<&str> = series.into_iter().collect();
    let mut ids: Vec<String> = unique.into_iter().map(str::to_string).collect();
    ids.shuffle(&mut substream(config.seed, Stream::Split));

    let n = ids.len();
    let total = config.train_scans + config.val_scans + config.test_scans;
    let (n_val, n_test) = if n == total {
        (config.val_scans, config.test_scans)
    } else {
        let share = |k: usize| ((n * k) as f64 / total as f64).round() as usize;
        let v = share(config.val_scans).min(n);
        (v, share(config.test_scans).min(n - v))
    };
    let n_train = n - n_val - n_test;
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    SeriesSplit {
        train: ids,
        val,
        test,
    }
}

/// Partitions samples by the series split.
pub fn partition(
    samples: Vec<CubeSample>,
    split: &SeriesSplit,
) -> (Vec<CubeSample>, Vec<CubeSample>, Vec<CubeSample>) {
    let val: BTreeSet<&str> = split.val.iter().map(String::as_str).collect();
    let test: BTreeSet<&str> = split.test.iter().map(String::as_str).collect();
    let (mut tr, mut va, mut te) = (Vec::new(), Vec::new(), Vec::new());
    for s in samples {
        if val.contains(s.source_series.as_str()) {
            va.push(s);
        } else if test.contains(s.source_series.as_str()) {
            te.push(s);
        } else {
            tr.push(s);
        }
    }
    (tr, va, te)
}

#[derive(Clone, Debug, Default)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    /// Epoch whose weights were retained (0 = initial weights).
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
}

/// Runs `config.epochs` epochs, logging each one and keeping the checkpoint
/// with the lowest validation loss (training loss when `val` is empty).
/// Batchnorm inference moments are recalibrated on `train` after every epoch. The
/// initial weights are always written, so zero epochs still yields a
/// checkpoint.
pub fn fit(
    net: &mut Network<f32>,
    state: &mut OptimizerState<f32>,
    train: &[CubeSample],
    val: &[CubeSample],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitReport> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let best_path = config
        .checkpoint_dir
        .as_ref()
        .map(|d| d.join(BEST_CHECKPOINT));
    if let Some(dir) = &config.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
    }
    if let Some(p) = &best_path {
        checkpoint::save_checkpoint(net, state, p)?;
    }
    if let Some(p) = &config.metrics_path {
        crate::metrics::ensure_header(p)?;
    }

    let mut report = FitReport::default();
    let mut best = f64::INFINITY;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let tr = train_epoch(net, train, config, state, epoch)?;
        recalibrate_batchnorm(net, train, config.batch_size)?;
        let va = if val.is_empty() {
            None
        } else {
            Some(evaluate(net, val, config.batch_size)?)
        };
        let record = EpochRecord {
            epoch,
            train_loss: tr.loss,
            train_acc: tr.accuracy,
            val_loss: va.map_or(f64::NAN, |m| m.loss),
            val_acc: va.map_or(f64::NAN, |m| m.accuracy),
            wall_seconds: if config.record_wall_time {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
        };
        if let Some(p) = &config.metrics_path {
            log_metrics(&record, p)?;
        }
        let score = va.map_or(tr.loss, |m| m.loss);
        if score < best {
            best = score;
            report.best_epoch = epoch;
            report.best_val_loss = va.map(|m| m.loss);
            if let Some(p) = &best_path {
                checkpoint::save_checkpoint(net, state, p)?;
            }
        }
        on_epoch(&record);
        report.history.push(record);
    }
    Ok(report)
}
