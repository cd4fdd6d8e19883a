//! Mini-batch training with Adam and early stopping on validation loss.

use std::time::Instant;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, Adam, AdamState};
use super::loss::mse_loss;
use super::network::Network;
use super::{shape_err, Batch, Mode, NnError, Result};
use crate::datagen::Dataset;
use crate::preprocess::{assemble_batch, InputConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Improvement smaller than this does not reset patience.
    pub min_delta: f64,
    pub patience: usize,
    /// Reload the weights of the best validation epoch when training ends.
    pub restore_best: bool,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 200,
            min_delta: 1e-12,
            patience: 15,
            restore_best: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(NnError::InvalidConfig("batch size must be at least 2".into()));
        }
        if self.max_epochs == 0 || self.patience == 0 {
            return Err(NnError::InvalidConfig("max epochs and patience must be positive".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) || self.min_delta < 0.0 {
            return Err(NnError::InvalidConfig("learning rate and min delta must be non-negative".into()));
        }
        Ok(())
    }

    fn adam(&self) -> Adam {
        Adam { learning_rate: self.learning_rate, beta1: self.beta1, beta2: self.beta2, epsilon: self.epsilon }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.val_loss).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub history: History,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Batch index lists for one epoch. A trailing batch of one sample is folded
/// into the previous batch, since batch statistics need two samples.
fn epoch_batches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().map(Vec::len) == Some(1) {
        let last = batches.pop().unwrap();
        batches.last_mut().unwrap().extend(last);
    }
    batches
}

/// Mean per-sample loss of the network in inference mode.
pub fn evaluate_loss(net: &Network, x: &Batch, y: &Array2<f64>) -> Result<f64> {
    const EVAL_BATCH: usize = 256;
    let n = x.dim().0;
    let mut total = 0.0;
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let pred = net.predict(&x.slice(s![start..end, .., .., ..]).to_owned())?;
        let target = y.slice(s![start..end, ..]).to_owned();
        let (loss, _) = mse_loss(pred.as_slice().expect("standard layout"), target.as_slice().expect("standard layout"))?;
        total += loss * (end - start) as f64;
    }
    Ok(total / n as f64)
}

/// Trains `net` in place. Validation loss drives early stopping; a non-finite
/// loss ends training with [`NnError::Divergence`].
pub fn train(
    net: &mut Network,
    train_x: &Batch,
    train_y: &Array2<f64>,
    val_x: &Batch,
    val_y: &Array2<f64>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let n = train_x.dim().0;
    if n < 2 || train_y.nrows() != n {
        return Err(shape_err(format!("{n} training inputs with {} targets", train_y.nrows())));
    }
    if val_x.dim().0 == 0 || val_y.nrows() != val_x.dim().0 {
        return Err(shape_err(format!("{} validation inputs with {} targets", val_x.dim().0, val_y.nrows())));
    }
    if train_y.ncols() != net.output_dim() || val_y.ncols() != net.output_dim() {
        return Err(shape_err(format!("targets have {} columns, network outputs {}", train_y.ncols(), net.output_dim())));
    }

    let adam = cfg.adam();
    let mut states: Vec<AdamState> = net.params_and_grads().iter().map(|(p, _)| AdamState::new(p.len())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let mut best = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_weights: Option<Vec<Vec<f64>>> = None;
    let mut wait = 0;
    let mut updates = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let mut loss_sum = 0.0;
        for idx in epoch_batches(n, cfg.batch_size, &mut rng) {
            let xb = train_x.select(Axis(0), &idx);
            let yb = train_y.select(Axis(0), &idx);
            let out = net.forward(&xb, Mode::Train)?;
            let k = out.dim().1;
            let (loss, grad) = mse_loss(
                out.as_standard_layout().as_slice().expect("standard layout"),
                yb.as_slice().expect("standard layout"),
            )?;
            loss_sum += loss * idx.len() as f64;
            let grad = Batch::from_shape_vec((idx.len(), k, 1, 1), grad).map_err(|e| shape_err(e.to_string()))?;
            net.backward(&grad)?;
            updates += 1;
            for ((p, g), state) in net.params_and_grads().into_iter().zip(states.iter_mut()) {
                adam_step(p, g, state, updates, &adam);
            }
            net.advance_step();
        }
        net.clear_caches();
        let train_loss = loss_sum / n as f64;
        let val_loss = evaluate_loss(net, val_x, val_y)?;
        history.epochs.push(EpochRecord { epoch, train_loss, val_loss, seconds: t0.elapsed().as_secs_f64() });
        log::info!("epoch {epoch}: train {train_loss:.6e} val {val_loss:.6e}");
        if !train_loss.is_finite() || !val_loss.is_finite() {
            return Err(NnError::Divergence { epoch, history });
        }
        if val_loss < best - cfg.min_delta {
            best = val_loss;
            best_epoch = epoch;
            wait = 0;
            if cfg.restore_best {
                best_weights = Some(net.snapshot());
            }
        } else {
            wait += 1;
            if wait >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    if let Some(w) = best_weights {
        net.restore(&w);
    }
    Ok(TrainOutcome { history, best_epoch, best_val_loss: best, stopped_early })
}

/// Trains on labelled datasets, assembling inputs with `input`.
pub fn train_datasets(
    net: &mut Network,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
    input: &InputConfig,
) -> Result<TrainOutcome> {
    if train_set.metabolites != val_set.metabolites {
        return Err(NnError::InvalidConfig("training and validation metabolites differ".into()));
    }
    let labels = |d: &Dataset| {
        Array2::from_shape_vec((d.len(), d.metabolites.len()), d.labels().concat()).map_err(|e| shape_err(e.to_string()))
    };
    let tx = assemble_batch(&train_set.samples, input)?;
    let vx = assemble_batch(&val_set.samples, input)?;
    train(net, &tx, &labels(train_set)?, &vx, &labels(val_set)?, cfg)
}
