//! Plain SGD with a single step-down learning-rate schedule.

mod checkpoint;
mod metrics;

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, OptimizerState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use metrics::{clip_votes, confusion_matrix, evaluate_predictions, per_class_f1, Evaluation};

use crate::datapipe::{worker_pool, Split, WindowedExample};
use crate::error::{Error, Result};
use crate::model::{Model, ParamSet};
use crate::rng::{rng_from_seed, Rng};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub drop_epoch: usize,
    pub drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.001,
            epochs: 150,
            drop_epoch: 50,
            drop_factor: 10.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return fail(format!(
                "lr0 must be finite and non-negative, got {}",
                self.lr0
            ));
        }
        if self.epochs == 0 {
            return fail("epochs must be positive".into());
        }
        if self.drop_epoch == 0 {
            return fail("drop_epoch must be positive".into());
        }
        if self.drop_factor.is_nan() || self.drop_factor <= 1.0 {
            return fail(format!(
                "drop_factor must exceed 1, got {}",
                self.drop_factor
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        Ok(())
    }
}

/// `lr0` before `drop_epoch` (0-based epochs), `lr0 / drop_factor` from
/// then on.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.drop_epoch {
        cfg.lr0
    } else {
        cfg.lr0 / cfg.drop_factor
    }
}

/// `w ← w − lr·g` for every parameter.
pub fn sgd_step<T: Scalar>(
    params: &mut ParamSet<T>,
    grads: &BTreeMap<String, Tensor<T>>,
    lr: T,
) -> Result<()> {
    for (name, p) in params.params.iter_mut() {
        let g = grads
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no gradient for parameter {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::Contract(format!(
                "gradient for {name} has shape {:?}, parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *w -= lr * d;
        }
    }
    Ok(())
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(rename = "val_acc")]
    pub val_accuracy: f64,
    #[serde(rename = "val_f1")]
    pub val_macro_f1: f64,
    #[serde(rename = "seconds")]
    pub wall_seconds: f64,
}

impl EpochMetrics {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}

/// Stacks windows into a `(B, 1, l)` batch.
pub fn batch_tensor<T: Scalar>(windows: &[&WindowedExample]) -> Result<Tensor<T>> {
    let len = windows.first().map_or(0, |w| w.window.len());
    let mut data = Vec::with_capacity(windows.len() * len);
    for w in windows {
        if w.window.len() != len {
            return Err(Error::Data("windows of unequal length in one batch".into()));
        }
        data.extend(w.window.iter().map(|&v| T::lit(v as f64)));
    }
    Tensor::new(vec![windows.len(), 1, len], data)
}

pub fn windows_in(data: &[WindowedExample], split: Split) -> Vec<&WindowedExample> {
    data.iter().filter(|w| w.split == split).collect()
}

const EVAL_BATCH: usize = 64;

/// Eval-mode predictions for every window, in input order.
pub fn predict_windows<T: Scalar>(
    model: &Model<T>,
    windows: &[&WindowedExample],
) -> Result<Vec<usize>> {
    let per_batch: Vec<Result<Vec<usize>>> = worker_pool()?.install(|| {
        windows
            .par_chunks(EVAL_BATCH)
            .map(|chunk| model.predict(&batch_tensor(chunk)?))
            .collect()
    });
    let mut out = Vec::with_capacity(windows.len());
    for p in per_batch {
        out.extend(p?);
    }
    Ok(out)
}

/// Window-level accuracy, macro F1 and confusion matrix.
pub fn evaluate<T: Scalar>(model: &Model<T>, windows: &[&WindowedExample]) -> Result<Evaluation> {
    if windows.is_empty() {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let predicted = predict_windows(model, windows)?;
    let truth: Vec<usize> = windows.iter().map(|w| w.label).collect();
    Ok(evaluate_predictions(
        &truth,
        &predicted,
        model.config().num_classes,
    ))
}

/// Training state across epochs.
pub struct Trainer<T> {
    model: Model<T>,
    cfg: TrainConfig,
    rng: Rng,
    next_epoch: usize,
    history: Vec<EpochMetrics>,
    best: Option<(f64, Checkpoint)>,
    wall_clock: bool,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let rng = rng_from_seed(cfg.seed);
        Ok(Self {
            model,
            cfg,
            rng,
            next_epoch: 0,
            history: Vec::new(),
            best: None,
            wall_clock: false,
        })
    }

    /// Continues from a checkpoint's parameters, generator and epoch.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.train.validate()?;
        Ok(Self {
            model: ckpt.to_model()?,
            cfg: ckpt.train.clone(),
            rng: ckpt.rng.clone(),
            next_epoch: ckpt.optimizer.epoch,
            history: ckpt.metrics.clone(),
            best: None,
            wall_clock: false,
        })
    }

    /// Records measured epoch durations in the metrics. Off by default so
    /// that metrics depend only on seed, data and configuration.
    pub fn record_wall_clock(&mut self, on: bool) {
        self.wall_clock = on;
    }

    pub fn model(&self) -> &Model<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn history(&self) -> &[EpochMetrics] {
        &self.history
    }

    pub fn next_epoch(&self) -> usize {
        self.next_epoch
    }

    /// Shuffled mini-batch SGD over `train`, then an eval pass over `val`.
    pub fn run_epoch(
        &mut self,
        train: &[&WindowedExample],
        val: &[&WindowedExample],
    ) -> Result<EpochMetrics> {
        if train.is_empty() || val.is_empty() {
            return Err(Error::Data(
                "training needs non-empty train and val splits".into(),
            ));
        }
        let started = Instant::now();
        let epoch = self.next_epoch;
        let lr = lr_at_epoch(epoch, &self.cfg);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let windows: Vec<&WindowedExample> = chunk.iter().map(|&i| train[i]).collect();
            let x = batch_tensor::<T>(&windows)?;
            let targets: Vec<usize> = windows.iter().map(|w| w.label).collect();
            let step = self.model.train_step(&x, &targets, &mut self.rng)?;
            sgd_step(self.model.params_mut(), &step.grads, T::lit(lr))?;
            loss_sum += step.loss.to_f64_lossy();
            batches += 1;
        }
        let eval = evaluate(&self.model, val)?;
        let seconds = started.elapsed().as_secs_f64();
        log::info!(
            "epoch {epoch} lr {lr} loss {:.5} val_acc {:.4} val_f1 {:.4} ({seconds:.1}s)",
            loss_sum / batches as f64,
            eval.accuracy,
            eval.macro_f1
        );
        let metrics = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / batches as f64,
            val_accuracy: eval.accuracy,
            val_macro_f1: eval.macro_f1,
            wall_seconds: if self.wall_clock { seconds } else { 0.0 },
        };
        self.next_epoch += 1;
        self.history.push(metrics.clone());
        if self
            .best
            .as_ref()
            .is_none_or(|(acc, _)| eval.accuracy > *acc)
        {
            self.best = Some((eval.accuracy, self.checkpoint()));
        }
        Ok(metrics)
    }

    /// Runs the remaining epochs. `on_epoch` sees each epoch's metrics and
    /// may end the run early by returning `Break`.
    pub fn fit(
        &mut self,
        data: &[WindowedExample],
        mut on_epoch: impl FnMut(&EpochMetrics) -> ControlFlow<()>,
    ) -> Result<()> {
        let train = windows_in(data, Split::Train);
        let val = windows_in(data, Split::Val);
        while self.next_epoch < self.cfg.epochs {
            let m = self.run_epoch(&train, &val)?;
            if on_epoch(&m).is_break() {
                break;
            }
        }
        Ok(())
    }

    /// Current state, parameters rounded to `f32`.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            model: self.model.config().clone(),
            train: self.cfg.clone(),
            params: self.model.params().cast(),
            optimizer: OptimizerState {
                epoch: self.next_epoch,
                lr: lr_at_epoch(
                    self.next_epoch.min(self.cfg.epochs.saturating_sub(1)),
                    &self.cfg,
                ),
            },
            rng: self.rng.clone(),
            metrics: self.history.clone(),
        }
    }

    /// Checkpoint taken after the epoch with the highest validation accuracy.
    pub fn best_checkpoint(&self) -> Option<&Checkpoint> {
        self.best.as_ref().map(|(_, c)| c)
    }
}

/// Final and best-validation checkpoints of a completed run.
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub history: Vec<EpochMetrics>,
}

/// Trains `model` on the train split of `data`, validating on its val
/// split after every epoch.
pub fn train<T: Scalar>(
    model: Model<T>,
    data: &[WindowedExample],
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    trainer.fit(data, on_epoch)?;
    let last = trainer.checkpoint();
    let best = trainer
        .best_checkpoint()
        .cloned()
        .unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        last,
        best,
        history: trainer.history,
    })
}
