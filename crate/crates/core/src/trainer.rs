//! Negative-sampling BCE training with Adam and early stopping on validation NDCG.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::dataset::{make_training_example, Dataset, EvalMode, NegativeMode};
use crate::encoder::Candidates;
use crate::error::{Error, Result};
use crate::evaluator::{csv_error, evaluate, EvalSettings};
use crate::model::Model;
use crate::numerics::{threads, Adam, Gradients, Graph, PeakProbe, Tensor};
use crate::rng::{self, Stream};

/// Optimization and early-stopping settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Non-improving validation checks tolerated before stopping.
    pub patience: usize,
    /// Negatives per training example.
    pub n_train: usize,
    /// Negatives per user for validation.
    pub n_val: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 1e-4,
            weight_decay: 0.1,
            max_epochs: 1000,
            patience: 50,
            n_train: 100,
            n_val: 100,
            seed: 42,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.n_train == 0 || self.n_val == 0 {
            return Err(Error::Config("n_train and n_val must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay {} must be non-negative", self.weight_decay)));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> Adam {
        Adam {
            lr: self.learning_rate,
            weight_decay: self.weight_decay,
            ..Adam::default()
        }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_hr10: f64,
    pub val_ndcg10: f64,
    pub seconds: f64,
    pub peak_bytes: u64,
}

/// Progress of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub epoch: usize,
    pub best_epoch: usize,
    pub best_ndcg: f64,
    best_values: Option<Vec<Tensor>>,
    pub checks_since_improvement: usize,
}

impl TrainState {
    pub fn new() -> Self {
        TrainState {
            epoch: 0,
            best_epoch: 0,
            best_ndcg: f64::NEG_INFINITY,
            best_values: None,
            checks_since_improvement: 0,
        }
    }

    /// Records a validation result; returns `true` once patience is exhausted.
    pub fn observe(&mut self, model: &Model, ndcg: f64, patience: usize) -> bool {
        if ndcg > self.best_ndcg {
            self.best_ndcg = ndcg;
            self.best_epoch = self.epoch;
            self.best_values = Some(model.store.iter().map(|p| p.value.clone()).collect());
            self.checks_since_improvement = 0;
            false
        } else {
            self.checks_since_improvement += 1;
            self.checks_since_improvement > patience
        }
    }

    /// Copies the best parameters seen so far into `model`.
    pub fn restore_best(&self, model: &mut Model) {
        if let Some(values) = &self.best_values {
            for (p, v) in model.store.iter_mut().zip(values) {
                p.value.data_mut().copy_from_slice(v.data());
            }
        }
    }
}

impl Default for TrainState {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_ndcg10: f64,
    pub stopped_early: bool,
}

fn example_gradients(model: &Model, ds: &Dataset, user: usize, epoch: usize, seed: u64, n_train: usize) -> Result<Option<(f64, Gradients)>> {
    let mut rng = rng::stream(seed, Stream::Training, ((epoch as u64) << 32) | user as u64);
    let Some(ex) = make_training_example(ds, user, model.config.seq_len, n_train, &mut rng) else {
        return Ok(None);
    };
    let candidates = Candidates::from_example(ds, &ex);
    let mut g = Graph::new(&model.store);
    let loss = model.example_loss(&mut g, &ex, &candidates, true, &mut rng)?;
    let value = g.scalar(loss);
    if !value.is_finite() {
        return Err(Error::Numeric(format!(
            "loss {value} for user '{}' at epoch {epoch}",
            ds.user(user).key
        )));
    }
    Ok(Some((value, g.backward(loss)?)))
}

/// Per-example losses and gradients of a batch, in batch order.
fn batch_gradients(model: &Model, ds: &Dataset, users: &[usize], epoch: usize, cfg: &TrainConfig) -> Vec<Result<Option<(f64, Gradients)>>> {
    let workers = threads().min(users.len()).max(1);
    if workers == 1 {
        return users
            .iter()
            .map(|&u| example_gradients(model, ds, u, epoch, cfg.seed, cfg.n_train))
            .collect();
    }
    std::thread::scope(|scope| {
        let handles: Vec<_> = users
            .chunks(users.len().div_ceil(workers))
            .map(|chunk| {
                scope.spawn(move || {
                    chunk
                        .iter()
                        .map(|&u| example_gradients(model, ds, u, epoch, cfg.seed, cfg.n_train))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("training worker panicked"))
            .collect()
    })
}

/// Users with at least two training events, in epoch order.
pub fn epoch_order(ds: &Dataset, epoch: usize, seed: u64) -> Vec<usize> {
    let mut users: Vec<usize> = (0..ds.users().len()).filter(|&u| ds.training_len(u) >= 2).collect();
    users.shuffle(&mut rng::stream(seed, Stream::Shuffle, epoch as u64));
    users
}

/// One pass over all trainable users, one sampled example each. Returns the
/// mean per-example loss.
pub fn train_epoch(model: &mut Model, ds: &Dataset, cfg: &TrainConfig, epoch: usize) -> Result<f64> {
    let users = epoch_order(ds, epoch, cfg.seed);
    if users.is_empty() {
        return Err(Error::InsufficientData("no user has two training events".into()));
    }
    let adam = cfg.optimizer();
    // Waves bound how many per-example gradients are alive at once.
    let wave = threads().max(1);
    let mut total = 0.0;
    let mut count = 0usize;
    for (b, batch) in users.chunks(cfg.batch_size).enumerate() {
        model.store.zero_grad();
        let scale = 1.0 / batch.len() as f64;
        for chunk in batch.chunks(wave) {
            for result in batch_gradients(model, ds, chunk, epoch, cfg) {
                let Some((loss, grads)) = result.map_err(|e| match e {
                    Error::Numeric(m) => Error::Numeric(format!("{m} (batch {b})")),
                    other => other,
                })?
                else {
                    continue;
                };
                total += loss;
                count += 1;
                model.store.accumulate(&grads, scale);
            }
        }
        adam.step(&mut model.store)?;
    }
    Ok(total / count.max(1) as f64)
}

/// Validation HR@10 and NDCG@10 with fixed per-user negatives.
pub fn validate(model: &Model, ds: &Dataset, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let settings = EvalSettings {
        mode: EvalMode::Validation,
        negatives: NegativeMode::Sampled(cfg.n_val),
        k: 10,
        seq_len: model.config.seq_len,
        seed: cfg.seed,
    };
    let r = evaluate(model, ds, &settings)?;
    Ok((r.hr_at_k, r.ndcg_at_k))
}

/// Trains until patience runs out or `max_epochs` is reached and leaves the
/// parameters with the best validation NDCG@10 in `model`. Without any
/// evaluable user the final parameters are kept.
pub fn fit(
    model: &mut Model,
    ds: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let can_validate = ds.evaluable_users().next().is_some();
    let mut state = TrainState::new();
    let mut log = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=cfg.max_epochs {
        state.epoch = epoch;
        let started = Instant::now();
        let probe = PeakProbe::start();
        let mean_loss = train_epoch(model, ds, cfg, epoch)?;
        let peak_bytes = probe.peak_above_baseline();
        let seconds = started.elapsed().as_secs_f64();
        let (hr, ndcg) = if can_validate {
            validate(model, ds, cfg)?
        } else {
            (f64::NAN, f64::NAN)
        };
        let record = EpochRecord {
            epoch,
            mean_loss,
            val_hr10: hr,
            val_ndcg10: ndcg,
            seconds,
            peak_bytes,
        };
        log::info!(
            "epoch {epoch}: loss {mean_loss:.5}, val HR@10 {hr:.4}, NDCG@10 {ndcg:.4}, {seconds:.2}s"
        );
        on_epoch(&record);
        log.push(record);
        if can_validate && state.observe(model, ndcg, cfg.patience) {
            stopped_early = true;
            break;
        }
    }
    state.restore_best(model);
    Ok(TrainOutcome {
        log,
        best_epoch: state.best_epoch,
        best_val_ndcg10: state.best_ndcg,
        stopped_early,
    })
}

/// Writes the log with columns `epoch,mean_loss,val_hr10,val_ndcg10,seconds,peak_bytes`.
pub fn write_log(log: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["epoch", "mean_loss", "val_hr10", "val_ndcg10", "seconds", "peak_bytes"])
        .map_err(|e| csv_error(path, e))?;
    for r in log {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.10}", r.mean_loss),
            format!("{:.6}", r.val_hr10),
            format!("{:.6}", r.val_ndcg10),
            format!("{:.3}", r.seconds),
            r.peak_bytes.to_string(),
        ])
        .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}
