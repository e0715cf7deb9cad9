//! Training loop, optimiser, early stopping and evaluation.

mod early_stop;
mod metrics;
mod optim;

use std::io::Write;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::bayes::{Noise, PROB_FLOOR};
use crate::data::{one_hot, LabeledImageSet};
use crate::error::{invalid, shape_err, Error, Result};
use crate::models::{Model, ParamStore, RunOptions};
use crate::resample::csv_err;
use crate::rng::SeededRng;
use crate::tensor::{Graph, Tensor};

pub use early_stop::{early_stopping, Decision, EarlyStopping, StopPoint};
pub use metrics::{confusion_matrix, per_class_scores, roc_auc, EvaluationReport};
pub use optim::{adam_step, reduce_on_plateau, Adam, AdamConfig, AdamState, PlateauConfig, ReduceOnPlateau};

/// Weight of the KL term in a minibatch loss.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlWeight {
    /// `1 / number of minibatches`, so an epoch sums to one full KL.
    PerBatch,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub restore_best: bool,
    pub kl_weight: KlWeight,
    /// Weight samples per training step (Bayesian models).
    pub train_samples: usize,
    pub scheduler: Option<PlateauConfig>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 100,
            patience: 10,
            restore_best: true,
            kl_weight: KlWeight::PerBatch,
            train_samples: 1,
            scheduler: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(invalid!("learning rate must be finite and >= 0"));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 || self.train_samples == 0 {
            return Err(invalid!("batch size, epochs, patience and samples must be positive"));
        }
        if let KlWeight::Fixed(w) = self.kl_weight {
            if !(w >= 0.0) {
                return Err(invalid!("KL weight must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Mean negative log-probability of the true class, with probabilities
/// floored before the log.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rank() != 2 || probs.shape()[0] != labels.len() || labels.is_empty() {
        return Err(shape_err!(
            "probabilities {:?} vs {} labels",
            probs.shape(),
            labels.len()
        ));
    }
    let k = probs.shape()[1];
    let mut total = 0.0;
    for (row, &l) in probs.rows().zip(labels) {
        if l >= k {
            return Err(Error::Data(format!("label {l} out of range for {k} classes")));
        }
        total -= row[l].max(PROB_FLOOR).ln();
    }
    Ok(total / labels.len() as f64)
}

fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = probs.argmax_rows().iter().zip(labels).filter(|(p, t)| p == t).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Result of one optimisation step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// The minimised loss.
    pub loss: f64,
    /// Correct training-mode predictions in the batch.
    pub correct: usize,
}

/// Optimiser state plus the noise stream used by dropout and weight sampling.
pub struct Trainer {
    pub config: TrainConfig,
    pub adam: Adam,
    rng: SeededRng,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            adam: Adam::new(config.learning_rate),
            rng: SeededRng::new(config.seed).fork("noise"),
            config,
        })
    }

    /// One gradient step on a batch. Deterministic models minimise the mean
    /// cross-entropy; Bayesian models minimise the summed negative
    /// log-likelihood plus `kl_weight` times the KL, averaged over
    /// `train_samples` weight draws.
    pub fn step(&mut self, model: &mut Model, xb: &Tensor, yb: &[usize], kl_weight: f64) -> Result<StepOutcome> {
        let targets = one_hot(yb, model.n_classes())?;
        let bayesian = model.is_bayesian();
        let draws = if bayesian { self.config.train_samples } else { 1 };
        let mut g = Graph::new();
        let x = g.constant(xb.clone());
        let mut loss = None;
        let mut correct = 0;
        let mut params = IndexMap::new();
        let mut stats = Vec::new();
        for m in 0..draws {
            let f = model.forward(&mut g, x, RunOptions::train(), &mut self.rng)?;
            if m == 0 {
                let probs = g.value(f.probs);
                correct = probs.argmax_rows().iter().zip(yb).filter(|(p, t)| p == t).count();
                let clamped = probs.rows().zip(yb).filter(|(r, &t)| r[t] < PROB_FLOOR).count();
                if clamped > 0 {
                    log::warn!("{clamped} true-class probabilities clamped at {PROB_FLOOR}");
                }
                params = f.params.clone();
                stats = f.batch_stats.clone();
            }
            let term = if bayesian {
                let nll = g.cross_entropy(f.probs, &targets, PROB_FLOOR, 1.0)?;
                let kl = f.kl.ok_or_else(|| invalid!("Bayesian forward pass produced no KL"))?;
                let kl = g.scale(kl, kl_weight);
                g.add(nll, kl)?
            } else {
                g.cross_entropy(f.probs, &targets, PROB_FLOOR, 1.0 / yb.len() as f64)?
            };
            loss = Some(match loss {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        let mut loss = loss.expect("at least one draw");
        if draws > 1 {
            loss = g.scale(loss, 1.0 / draws as f64);
        }
        let value = g.value(loss).item()?;
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let mut grads = g.backward(loss)?;
        let mut named = IndexMap::with_capacity(params.len());
        for (name, var) in params {
            if let Some(t) = grads.take(var) {
                named.insert(name, t);
            }
        }
        self.adam.step(&mut model.params, &named)?;
        model.apply_batch_stats(&stats);
        Ok(StepOutcome { loss: value, correct })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }

    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        wr.write_record(["epoch", "train_loss", "val_loss", "train_acc", "val_acc", "lr"])
            .map_err(csv_err)?;
        for e in &self.epochs {
            wr.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.train_acc.to_string(),
                e.val_acc.to_string(),
                e.lr.to_string(),
            ])
            .map_err(csv_err)?;
        }
        wr.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub history: History,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    /// Set when training hit a non-finite value; the model then holds the
    /// last weights that produced finite losses.
    pub diverged: Option<String>,
}

/// Validation loss and accuracy. Bayesian models are scored with their
/// posterior means so the value is deterministic.
pub fn validation_scores(model: &Model, val: &LabeledImageSet, batch_size: usize) -> Result<(f64, f64)> {
    let probs = model.predict_proba(&val.images, batch_size, 1, Noise::Mean, 0)?;
    Ok((cross_entropy(&probs, &val.labels)?, accuracy(&probs, &val.labels)))
}

/// Fit `model` on `train`, monitoring `val` for early stopping.
pub fn train(
    model: &mut Model,
    train: &LabeledImageSet,
    val: &LabeledImageSet,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(invalid!("training and validation sets must be non-empty"));
    }
    let mut trainer = Trainer::new(config.clone())?;
    let mut scheduler = config.scheduler.map(ReduceOnPlateau::new).transpose()?;
    let mut stopper = EarlyStopping::new(config.patience);
    let n = train.len();
    let num_batches = n.div_ceil(config.batch_size);
    let kl_weight = match config.kl_weight {
        KlWeight::PerBatch => 1.0 / num_batches as f64,
        KlWeight::Fixed(w) => w,
    };
    let root = SeededRng::new(config.seed);
    let mut history = History::default();
    let mut best: ParamStore = model.params.clone();
    let mut last_good: ParamStore = model.params.clone();
    let mut stopped_early = false;
    let mut diverged = None;

    for epoch in 1..=config.max_epochs {
        let mut order: Vec<usize> = (0..n).collect();
        root.fork(&format!("epoch/{epoch}")).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        let mut failure = None;
        for chunk in order.chunks(config.batch_size) {
            let xb = train.images.select_outer(chunk)?;
            let yb: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            match trainer.step(model, &xb, &yb, kl_weight) {
                Ok(s) => {
                    loss_sum += if model.is_bayesian() {
                        s.loss
                    } else {
                        s.loss * yb.len() as f64
                    };
                    correct += s.correct;
                }
                Err(Error::NonFinite(what)) => {
                    failure = Some(what);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        let (val_loss, val_acc) = match failure {
            Some(_) => (f64::NAN, f64::NAN),
            None => validation_scores(model, val, config.batch_size)?,
        };
        if failure.is_none() && !val_loss.is_finite() {
            failure = Some("validation loss".into());
        }
        if let Some(what) = failure {
            log::error!("epoch {epoch}: non-finite {what}; keeping the last finite weights");
            model.params = last_good.clone();
            diverged = Some(format!("non-finite {what} in epoch {epoch}"));
            break;
        }
        last_good = model.params.clone();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            train_acc: correct as f64 / n as f64,
            val_acc,
            lr: trainer.adam.lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} train_acc {:.3} val_acc {:.3} lr {:.2e}",
            record.train_loss,
            val_loss,
            record.train_acc,
            val_acc,
            record.lr
        );
        history.epochs.push(record);
        let decision = stopper.observe(epoch, val_loss);
        if decision == Decision::Improved {
            best = model.params.clone();
        }
        if let Some(s) = scheduler.as_mut() {
            trainer.adam.lr = s.step(val_loss, trainer.adam.lr);
        }
        if decision == Decision::Stop {
            stopped_early = true;
            break;
        }
    }
    if config.restore_best && stopper.best_epoch().is_some() {
        model.params = best;
    }
    Ok(TrainOutcome {
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        best_val_loss: stopper.best_loss(),
        stopped_early,
        diverged,
    })
}

/// Score `model` on a held-out set. Bayesian models average `samples`
/// stochastic forward passes.
pub fn evaluate(
    model: &Model,
    test: &LabeledImageSet,
    batch_size: usize,
    samples: usize,
    seed: u64,
) -> Result<EvaluationReport> {
    if test.is_empty() {
        return Err(invalid!("cannot evaluate on an empty set"));
    }
    let probs = model.predict_proba(&test.images, batch_size, samples, Noise::Sample, seed)?;
    EvaluationReport::from_probs(&test.labels, &probs, &test.class_names)
}
