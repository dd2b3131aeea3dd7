use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::optim::{apply_step, cosine_lr, AdamHyper, OptimizerState};
use crate::autodiff::{binary_cross_entropy, Tape};
use crate::data::{stratified_split, WindowSet};
use crate::error::{Error, Result};
use crate::evaluation::{confusion, precision_recall_f1, DEFAULT_THRESHOLD};
use crate::model::ModelParams;

/// Windows per forward pass when scoring the validation set.
const SCORE_BATCH: usize = 16;
/// Windows per forward/backward pass; larger minibatches are accumulated
/// from pieces this size, which is faster than one large pass.
const MICRO_BATCH: usize = 16;
const VAL_STREAM: u64 = 0x0076_616c;
const SUBSET_STREAM: u64 = 0x7375_6273;

/// Metrics of one completed epoch (numbered from 1).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_f1: f64,
    pub lr: f64,
    pub elapsed_secs: f64,
}

impl PartialEq for EpochRecord {
    /// Wall-clock time is ignored.
    fn eq(&self, o: &Self) -> bool {
        (
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.val_f1,
            self.lr,
        ) == (o.epoch, o.train_loss, o.val_loss, o.val_f1, o.lr)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    /// Epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_f1,lr";

    /// Per-epoch CSV without timings, so reruns produce identical bytes.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                e.epoch, e.train_loss, e.val_loss, e.val_f1, e.lr
            );
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn train_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.train_loss).collect()
    }
}

/// Patience-based stopping on a loss that should decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopper {
    patience: usize,
    min_delta: f64,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            patience,
            min_delta,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Records a loss; returns `(improved, stop)`.
    pub fn observe(&mut self, loss: f64) -> (bool, bool) {
        if loss <= self.best - self.min_delta {
            self.best = loss;
            self.stale = 0;
            (true, false)
        } else {
            self.stale += 1;
            (false, self.stale >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

fn require_both_classes(w: &WindowSet, what: &str) -> Result<()> {
    if w.positives() == 0 || w.negatives() == 0 {
        return Err(Error::Config(format!(
            "{what} needs both classes ({} positive, {} negative windows)",
            w.positives(),
            w.negatives()
        )));
    }
    Ok(())
}

/// Carves the validation windows out of `data` and trains on the rest.
pub fn train(
    params: &ModelParams,
    data: &WindowSet,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    require_both_classes(data, "training data")?;
    let (mut fit, mut val) =
        stratified_split(data, 1.0 - config.val_fraction, config.seed ^ VAL_STREAM)?;
    if let Some(cap) = config.max_val_windows {
        if val.len() > cap {
            val = stratified_split(
                &val,
                cap as f64 / val.len() as f64,
                config.seed ^ VAL_STREAM,
            )?
            .0;
        }
    }
    if let Some(cap) = config.max_train_windows {
        if fit.len() > cap {
            fit = stratified_split(
                &fit,
                cap as f64 / fit.len() as f64,
                config.seed ^ SUBSET_STREAM,
            )?
            .0;
        }
    }
    train_with_validation(params, &fit, &val, config)
}

/// Mean BCE and F1 at the default threshold.
pub fn validation_metrics(params: &ModelParams, val: &WindowSet) -> Result<(f64, f64)> {
    let scores = params.score_windows(&val.data, SCORE_BATCH)?;
    let loss = binary_cross_entropy(&scores, &val.labels_f64());
    let (_, _, f1) = precision_recall_f1(&confusion(&scores, &val.labels, DEFAULT_THRESHOLD)?);
    Ok((loss, f1))
}

/// Mean BCE over the minibatch `idx` and its gradient for every parameter.
fn batch_gradient(
    params: &ModelParams,
    fit: &WindowSet,
    idx: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut total = 0.0;
    let mut acc: Vec<Vec<f64>> = params
        .tensors()
        .iter()
        .map(|t| vec![0.0; t.numel()])
        .collect();
    for piece in idx.chunks(MICRO_BATCH) {
        let weight = piece.len() as f64 / idx.len() as f64;
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape);
        let x = tape.constant(fit.batch(piece));
        let labels: Vec<f64> = piece.iter().map(|&i| fit.labels[i] as f64).collect();
        let pass = params.forward_batch(&mut tape, &vars, x, Some(&mut *rng))?;
        let loss = tape.bce_loss(pass.scores, &labels)?;
        total += weight * tape.value(loss).item();
        let grads = tape.backward(loss)?;
        for (a, &v) in acc.iter_mut().zip(&vars) {
            if let Some(g) = grads.get(v) {
                a.iter_mut().zip(g).for_each(|(a, g)| *a += weight * g);
            }
        }
    }
    Ok((total, acc))
}

/// Minibatch training with a cosine schedule and early stopping on the
/// validation loss. Returns the best-validation parameters.
pub fn train_with_validation(
    params: &ModelParams,
    fit: &WindowSet,
    val: &WindowSet,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    require_both_classes(fit, "training data")?;
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    let cfg = params.config();
    if fit.window_len != cfg.window_len || fit.feature_dim != cfg.feature_dim {
        return Err(Error::shape(
            "train",
            &[fit.window_len, fit.feature_dim],
            &[cfg.window_len, cfg.feature_dim],
        ));
    }

    let hyper = AdamHyper::from(config);
    let mut current = params.clone();
    let mut state = OptimizerState::new(current.tensors());
    let mut best = current.clone();
    let mut stopper = EarlyStopper::new(config.patience, config.min_delta);
    let mut log = TrainLog {
        epochs: Vec::new(),
        stop_reason: StopReason::MaxEpochs,
        best_epoch: 0,
    };
    let start = Instant::now();
    let mut order: Vec<usize> = (0..fit.len()).collect();

    for epoch in 0..config.max_epochs {
        let lr = cosine_lr(epoch, config.max_epochs, config.initial_lr, config.lr_min);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        order.sort_unstable();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.batch_size).collect();
        if let Some(cap) = config.max_batches_per_epoch {
            batches.truncate(cap);
        }

        let (mut loss_sum, mut seen) = (0.0, 0usize);
        for (b, idx) in batches.iter().enumerate() {
            let (value, g) = batch_gradient(&current, fit, idx, &mut rng)?;
            if !value.is_finite() {
                return Err(Error::Numeric {
                    stage: format!("training loss (epoch {}, batch {})", epoch + 1, b + 1),
                });
            }
            apply_step(
                config.optimizer,
                current.tensors_mut(),
                &g,
                &mut state,
                lr,
                &hyper,
            )?;
            if !current.all_finite() {
                return Err(Error::Numeric {
                    stage: format!(
                        "{} update (epoch {}, batch {})",
                        config.optimizer,
                        epoch + 1,
                        b + 1
                    ),
                });
            }
            loss_sum += value * idx.len() as f64;
            seen += idx.len();
        }

        let (val_loss, val_f1) = validation_metrics(&current, val)?;
        if !val_loss.is_finite() {
            return Err(Error::Numeric {
                stage: format!("validation loss (epoch {})", epoch + 1),
            });
        }
        let record = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / seen as f64,
            val_loss,
            val_f1,
            lr,
            elapsed_secs: start.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {:>3}  train {:.5}  val {:.5}  f1 {:.4}  lr {:.2e}",
            record.epoch,
            record.train_loss,
            record.val_loss,
            record.val_f1,
            record.lr
        );
        log.epochs.push(record);

        let (improved, stop) = stopper.observe(val_loss);
        if improved {
            best = current.clone();
            log.best_epoch = epoch + 1;
        }
        if stop {
            log.stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    Ok((best, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_rule() {
        let mut s = EarlyStopper::new(1, 1e-5);
        assert_eq!(s.observe(0.7), (true, false));
        assert_eq!(s.observe(0.7), (false, true));

        let mut s = EarlyStopper::new(3, 1e-5);
        let mut stopped_at = None;
        for (e, l) in [0.9, 0.8, 0.799_995, 0.81, 0.80, 0.5].iter().enumerate() {
            if s.observe(*l).1 {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(5));
        assert_eq!(s.best(), 0.8);
    }

    #[test]
    fn log_equality_ignores_time() {
        let rec = |t| EpochRecord {
            epoch: 1,
            train_loss: 0.5,
            val_loss: 0.4,
            val_f1: 0.3,
            lr: 1e-4,
            elapsed_secs: t,
        };
        assert_eq!(rec(1.0), rec(2.0));
        let log = TrainLog {
            epochs: vec![rec(0.1)],
            stop_reason: StopReason::MaxEpochs,
            best_epoch: 1,
        };
        assert_eq!(
            log.to_csv(),
            "epoch,train_loss,val_loss,val_f1,lr\n1,0.5,0.4,0.3,0.0001\n"
        );
    }
}
