//! Mini-batch SGD with momentum, the training loop, and evaluation.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::{cross_entropy, LayerGrad, Network};

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e4;

const EVAL_CHUNK: usize = 1000;

/// `v ← momentum·v − lr·g`, then `p ← p + v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(Error::Shape(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    update_velocity(velocity, grads, lr, momentum);
    for (p, v) in params.iter_mut().zip(velocity.iter()) {
        *p += v;
    }
    Ok(())
}

fn update_velocity(velocity: &mut [f64], grads: &[f64], lr: f64, momentum: f64) {
    for (v, g) in velocity.iter_mut().zip(grads) {
        *v = momentum * *v - lr * g;
    }
}

/// Momentum SGD over every trainable layer of a network.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(net: &Network, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        let velocity = (0..net.stages().len())
            .map(|i| vec![0.0; net.params(i).len()])
            .collect();
        Sgd {
            learning_rate,
            momentum,
            weight_decay,
            velocity,
        }
    }

    pub fn step(&mut self, net: &mut Network, grads: &[LayerGrad]) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} layers",
                grads.len(),
                self.velocity.len()
            )));
        }
        for (i, grad) in grads.iter().enumerate() {
            let Some(g) = grad.as_slice() else { continue };
            if g.len() != self.velocity[i].len() {
                return Err(Error::Shape(format!("gradient size mismatch at layer {i}")));
            }
            if self.weight_decay != 0.0 {
                let decayed: Vec<f64> = g
                    .iter()
                    .zip(net.params(i))
                    .map(|(g, p)| g + self.weight_decay * p)
                    .collect();
                update_velocity(
                    &mut self.velocity[i],
                    &decayed,
                    self.learning_rate,
                    self.momentum,
                );
            } else {
                update_velocity(&mut self.velocity[i], g, self.learning_rate, self.momentum);
            }
            net.apply_update(i, &self.velocity[i])?;
        }
        Ok(())
    }
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRun {
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiplier applied to the learning rate on a plateau.
    pub lr_decay: f64,
    /// Epochs without validation-loss improvement before decaying.
    pub patience: usize,
    pub seed: u64,
    /// Coupled L2 penalty on all trainable parameters.
    pub weight_decay: f64,
    /// Fraction of the training set to use, taken as a prefix of one seeded permutation.
    pub train_fraction: f64,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 128,
            epochs: 10,
            lr_decay: 0.1,
            patience: 3,
            seed: 0,
            weight_decay: 0.0,
            train_fraction: 1.0,
        }
    }
}

impl TrainRun {
    pub fn validate(&self, n_train: usize) -> Result<()> {
        let bad = |msg: String| Err(Error::Argument(msg));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be positive".into());
        }
        if self.batch_size > n_train {
            return bad(format!(
                "batch_size {} exceeds the {n_train} training samples",
                self.batch_size
            ));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction <= 1.0) {
            return bad(format!(
                "train_fraction must be in (0, 1], got {}",
                self.train_fraction
            ));
        }
        Ok(())
    }
}

/// The first `round(n·fraction)` (at least one) entries of a seeded
/// permutation of `0..n`. Smaller fractions give prefixes of larger ones.
pub fn subset_indices(n: usize, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Argument(format!(
            "fraction must be in (0, 1], got {fraction}"
        )));
    }
    if n == 0 {
        return Err(Error::Argument("dataset is empty".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    order.shuffle(&mut rng);
    let m = ((n as f64 * fraction).round() as usize).clamp(1, n);
    order.truncate(m);
    Ok(order)
}

#[derive(Debug, Clone, Copy)]
pub struct TrainData<'a> {
    pub train: &'a Dataset,
    pub val: Option<&'a Dataset>,
    pub test: Option<&'a Dataset>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    /// Sample-weighted mean training loss over the epoch.
    pub loss: f64,
    /// Misclassification rate of the training batches as they were seen.
    pub train_err: f64,
    pub val_loss: Option<f64>,
    pub val_err: Option<f64>,
    /// Learning rate in effect for the next epoch.
    pub lr: f64,
}

impl fmt::Display for EpochReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {} loss {:.6} train_err {:.6} val_err {:.6} lr {}",
            self.epoch,
            self.loss,
            self.train_err,
            self.val_err.unwrap_or(f64::NAN),
            self.lr
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub test_error: Option<f64>,
    pub loss_curve: Vec<f64>,
    pub epochs: Vec<EpochReport>,
    pub n_train: usize,
    pub steps: usize,
    pub final_learning_rate: f64,
    /// Seconds spent in the training loop.
    pub wall_time: f64,
}

/// Trains `net` in place. `on_epoch` sees each epoch's report as it completes.
pub fn train(
    net: &mut Network,
    data: TrainData<'_>,
    cfg: &TrainRun,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<Metrics> {
    let full = data.train;
    if full.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    for ds in [Some(full), data.val, data.test].into_iter().flatten() {
        check_compatible(net, ds)?;
    }
    let subset = subset_indices(full.len(), cfg.train_fraction, cfg.seed)?;
    cfg.validate(subset.len())?;

    let start = Instant::now();
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);
    let mut sgd = Sgd::new(net, cfg.learning_rate, cfg.momentum, cfg.weight_decay);
    let mut best = f64::INFINITY;
    let mut stale_epochs = 0;
    let mut steps = 0;
    let mut reports = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let mut order = subset.clone();
        order.shuffle(&mut shuffle_rng);
        let mut loss_sum = 0.0;
        let mut mistakes = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = full.features().select_rows(chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| full.labels()[i]).collect();
            let pass = net.forward(&x, Some(&labels))?;
            let loss = pass.loss.expect("labels were supplied");
            if !loss.is_finite() || loss > DIVERGENCE_LIMIT {
                return Err(Error::Diverged {
                    epoch,
                    step: steps,
                    loss,
                });
            }
            loss_sum += loss * chunk.len() as f64;
            mistakes += argmax_rows(&pass.probs)
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p != l)
                .count();
            let grads = net.backward(&pass, false)?;
            sgd.step(net, &grads.layers)?;
            steps += 1;
        }
        let loss = loss_sum / order.len() as f64;

        let val = data.val.map(|v| loss_and_error(net, v)).transpose()?;
        let monitored = val.map_or(loss, |(l, _)| l);
        if monitored < best {
            best = monitored;
            stale_epochs = 0;
        } else {
            stale_epochs += 1;
            if stale_epochs >= cfg.patience.max(1) {
                sgd.learning_rate *= cfg.lr_decay;
                stale_epochs = 0;
            }
        }

        let report = EpochReport {
            epoch,
            loss,
            train_err: mistakes as f64 / order.len() as f64,
            val_loss: val.map(|v| v.0),
            val_err: val.map(|v| v.1),
            lr: sgd.learning_rate,
        };
        on_epoch(&report);
        reports.push(report);
    }
    let wall_time = start.elapsed().as_secs_f64();

    let train_error = evaluate(net, &full.subset(&subset))?;
    Ok(Metrics {
        train_error,
        val_error: reports.last().and_then(|r| r.val_err),
        test_error: data.test.map(|t| evaluate(net, t)).transpose()?,
        loss_curve: reports.iter().map(|r| r.loss).collect(),
        epochs: reports,
        n_train: subset.len(),
        steps,
        final_learning_rate: sgd.learning_rate,
        wall_time,
    })
}

fn check_compatible(net: &Network, ds: &Dataset) -> Result<()> {
    if ds.dim() != net.input_dim() {
        return Err(Error::Shape(format!(
            "data has {} features, network expects {}",
            ds.dim(),
            net.input_dim()
        )));
    }
    if ds.classes() > net.classes() {
        return Err(Error::Shape(format!(
            "data has {} classes, network outputs {}",
            ds.classes(),
            net.classes()
        )));
    }
    Ok(())
}

/// Index of the largest entry per row; the lowest index wins ties.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Predicted classes, computed in chunks and spread over `threads` workers.
/// Rows are independent, so the result does not depend on the thread count.
pub fn predict(net: &Network, x: &Matrix, threads: usize) -> Result<Vec<usize>> {
    let starts: Vec<usize> = (0..x.rows()).step_by(EVAL_CHUNK).collect();
    let run = |s: usize| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (s..(s + EVAL_CHUNK).min(x.rows())).collect();
        Ok(argmax_rows(&net.logits(&x.select_rows(&idx))?))
    };
    let threads = threads.max(1).min(starts.len().max(1));
    let parts: Vec<Result<Vec<usize>>> = if threads == 1 {
        starts.iter().map(|&s| run(s)).collect()
    } else {
        std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|t| {
                    let mine: Vec<usize> =
                        starts.iter().copied().skip(t).step_by(threads).collect();
                    scope.spawn(move || mine.into_iter().map(|s| (s, run(s))).collect::<Vec<_>>())
                })
                .collect();
            let mut all: Vec<(usize, Result<Vec<usize>>)> = handles
                .into_iter()
                .flat_map(|h| h.join().expect("prediction worker panicked"))
                .collect();
            all.sort_by_key(|(s, _)| *s);
            all.into_iter().map(|(_, r)| r).collect()
        })
    };
    let mut out = Vec::with_capacity(x.rows());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

pub fn error_rate(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    wrong as f64 / labels.len() as f64
}

/// Misclassified fraction under argmax with lowest-index tie-breaking.
pub fn evaluate(net: &Network, ds: &Dataset) -> Result<f64> {
    evaluate_with_threads(net, ds, 1)
}

pub fn evaluate_with_threads(net: &Network, ds: &Dataset, threads: usize) -> Result<f64> {
    check_compatible(net, ds)?;
    Ok(error_rate(
        &predict(net, ds.features(), threads)?,
        ds.labels(),
    ))
}

/// `counts[true][predicted]`, sized by the network's class count.
pub fn confusion_matrix(net: &Network, ds: &Dataset, threads: usize) -> Result<Vec<Vec<usize>>> {
    check_compatible(net, ds)?;
    let c = net.classes();
    let mut counts = vec![vec![0; c]; c];
    for (p, &l) in predict(net, ds.features(), threads)?
        .iter()
        .zip(ds.labels())
    {
        counts[l][*p] += 1;
    }
    Ok(counts)
}

fn loss_and_error(net: &Network, ds: &Dataset) -> Result<(f64, f64)> {
    let mut loss_sum = 0.0;
    let mut wrong = 0;
    for start in (0..ds.len()).step_by(EVAL_CHUNK) {
        let idx: Vec<usize> = (start..(start + EVAL_CHUNK).min(ds.len())).collect();
        let logits = net.logits(&ds.features().select_rows(&idx))?;
        let labels: Vec<usize> = idx.iter().map(|&i| ds.labels()[i]).collect();
        loss_sum += cross_entropy(&logits, &labels) * idx.len() as f64;
        wrong += argmax_rows(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok((loss_sum / ds.len() as f64, wrong as f64 / ds.len() as f64))
}
