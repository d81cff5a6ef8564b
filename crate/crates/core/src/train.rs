//! The regression training loop shared by the flow model and the score
//! baseline.
//!
//! Both objectives reduce to "feed a noisy channel and a scalar condition,
//! regress onto a target tensor". The loss of one sample is the squared
//! Frobenius norm over its `2 x M x N` entries; a batch loss is the mean over
//! samples (not over entries).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowPathConfig;
use crate::nn::{AdamWConfig, AdamWState, Grads, UNet};
use crate::nn::checkpoint::save_checkpoint;
use crate::tensor::{ComplexMatrix, RealTensor, Rng};

/// Derivation tags for the training streams.
const EPOCH_TAG: u64 = 0x7472_6169_6e00_0000;
const VAL_TAG: u64 = 0x7661_6c00;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Path parameters; ignored by the score baseline.
    pub flow: FlowPathConfig,
    pub optimizer: AdamWConfig,
    /// Write the best model so far every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
    pub checkpoint_path: Option<PathBuf>,
    /// Wall-clock budget in seconds; training stops at the first batch
    /// boundary past it and still validates that partial epoch.
    pub time_budget_s: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            flow: FlowPathConfig::default(),
            optimizer: AdamWConfig::default(),
            checkpoint_every: 0,
            checkpoint_path: None,
            time_budget_s: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// 100 epochs, batch 128, AdamW with lr 1e-5 and weight decay 1e-2.
    pub fn full_scale() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            optimizer: AdamWConfig::full_scale(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(format!(
                "epochs and batch_size must be at least 1, got {} and {}",
                self.epochs, self.batch_size
            )));
        }
        if !(self.optimizer.lr > 0.0) || !(self.optimizer.weight_decay >= 0.0) {
            return Err(Error::InvalidParameter(format!(
                "invalid optimizer settings {:?}",
                self.optimizer
            )));
        }
        if let Some(b) = self.time_budget_s {
            if !(b > 0.0) {
                return Err(Error::InvalidParameter(format!("time budget must be positive, got {b}")));
            }
        }
        self.flow.validate()
    }
}

/// One row of the training log. Epoch 0 is the untrained model and has no
/// training loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// The model with the lowest validation loss, epoch 0 included.
    pub model: UNet,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub steps: usize,
    /// True when the time budget cut training short.
    pub truncated: bool,
}

impl TrainOutcome {
    pub fn best_val_loss(&self) -> f64 {
        self.history[self.best_epoch].val_loss
    }
}

pub fn write_training_log(path: impl AsRef<Path>, history: &[EpochRecord]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for rec in history {
        w.serialize(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_training_log(path: impl AsRef<Path>) -> Result<Vec<EpochRecord>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// Network inputs, per-sample conditions and regression targets.
#[derive(Debug, Clone)]
pub struct RegressionBatch {
    pub input: RealTensor,
    pub cond: Vec<f64>,
    pub target: RealTensor,
}

/// Stacks `[2, M, N]` tensors into `[B, 2, M, N]`.
pub(crate) fn stack(items: &[RealTensor]) -> Result<RealTensor> {
    let first = items
        .first()
        .ok_or_else(|| Error::InvalidInput("empty batch".into()))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(items.len() * first.len());
    for x in items {
        if x.shape() != first.shape() {
            return Err(Error::Dimension(format!(
                "batch mixes shapes {:?} and {:?}",
                first.shape(),
                x.shape()
            )));
        }
        data.extend_from_slice(x.data());
    }
    RealTensor::new(shape, data)
}

/// Turns clean channels into one regression batch.
pub(crate) trait Objective {
    fn assemble(&self, clean: &[&ComplexMatrix], rng: &mut Rng) -> Result<RegressionBatch>;
    fn magic(&self) -> &'static [u8; 8];
    fn meta(&self) -> serde_json::Value;
}

fn per_sample_sq(out: &RealTensor, target: &RealTensor) -> Vec<f64> {
    let b = out.shape()[0];
    let per = out.len() / b;
    out.data()
        .chunks(per)
        .zip(target.data().chunks(per))
        .map(|(o, t)| o.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect()
}

/// Batch loss and its parameter gradients.
pub fn regression_loss(net: &UNet, batch: &RegressionBatch) -> Result<(f64, Grads)> {
    let (out, tape) = net.forward_tape(&batch.input, &batch.cond)?;
    if out.shape() != batch.target.shape() {
        return Err(Error::Dimension(format!(
            "network output {:?} against target {:?}",
            out.shape(),
            batch.target.shape()
        )));
    }
    let b = out.shape()[0] as f64;
    let loss = per_sample_sq(&out, &batch.target).iter().sum::<f64>() / b;
    let dy: Vec<f64> = out
        .data()
        .iter()
        .zip(batch.target.data())
        .map(|(o, t)| 2.0 * (o - t) / b)
        .collect();
    // non-finite values pass through so the caller can report the step
    let dy = RealTensor::from_parts(out.shape().to_vec(), dy);
    let (grads, _) = net.backward_tape(&tape, &dy)?;
    Ok((loss, grads))
}

/// Forward-only batch loss.
pub fn regression_value(net: &UNet, batch: &RegressionBatch) -> Result<f64> {
    let out = net.forward_batch(&batch.input, &batch.cond)?;
    let b = out.shape()[0] as f64;
    Ok(per_sample_sq(&out, &batch.target).iter().sum::<f64>() / b)
}

/// Validation loss with noise fixed by `seed`, so epochs are comparable.
/// Sample `i` always sees the stream derived from `i`, whatever the batching.
pub(crate) fn validation_loss(
    net: &UNet,
    objective: &dyn Objective,
    val: &[ComplexMatrix],
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let root = Rng::new(seed).derive(VAL_TAG);
    let mut total = 0.0;
    for (c, chunk) in val.chunks(batch_size).enumerate() {
        let mut parts = Vec::with_capacity(chunk.len());
        for (j, h) in chunk.iter().enumerate() {
            let mut rng = root.derive((c * batch_size + j) as u64);
            parts.push(objective.assemble(&[h], &mut rng)?);
        }
        let batch = RegressionBatch {
            input: stack(&parts.iter().map(|p| unstack_one(&p.input)).collect::<Vec<_>>())?,
            cond: parts.iter().map(|p| p.cond[0]).collect(),
            target: stack(&parts.iter().map(|p| unstack_one(&p.target)).collect::<Vec<_>>())?,
        };
        total += regression_value(net, &batch)? * chunk.len() as f64;
    }
    Ok(total / val.len() as f64)
}

fn unstack_one(x: &RealTensor) -> RealTensor {
    RealTensor::from_parts(x.shape()[1..].to_vec(), x.data().to_vec())
}

pub(crate) fn run(
    mut net: UNet,
    train: &[ComplexMatrix],
    val: &[ComplexMatrix],
    cfg: &TrainConfig,
    objective: &dyn Objective,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::InvalidInput(
            "training needs non-empty training and validation splits".into(),
        ));
    }
    let start = Instant::now();
    let save = |model: &UNet| -> Result<()> {
        match &cfg.checkpoint_path {
            Some(p) => save_checkpoint(p, objective.magic(), model, &objective.meta()),
            None => Ok(()),
        }
    };

    let val0 = validation_loss(&net, objective, val, cfg.batch_size, cfg.seed)?;
    if !val0.is_finite() {
        return Err(Error::Training { step: 0, loss: val0 });
    }
    let mut history = vec![EpochRecord {
        epoch: 0,
        train_loss: None,
        val_loss: val0,
        wall_seconds: start.elapsed().as_secs_f64(),
    }];
    let mut best = (0, val0, net.clone());
    let mut opt = AdamWState::new(cfg.optimizer, net.param_count());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let root = Rng::new(cfg.seed).derive(EPOCH_TAG);
    let mut steps = 0usize;
    let mut truncated = false;

    for epoch in 1..=cfg.epochs {
        let mut rng = root.derive(epoch as u64);
        rng.shuffle(&mut order);
        let mut sum = 0.0;
        let mut seen = 0usize;
        for idx in order.chunks(cfg.batch_size) {
            if let Some(budget) = cfg.time_budget_s {
                if seen > 0 && start.elapsed().as_secs_f64() > budget {
                    truncated = true;
                    break;
                }
            }
            let clean: Vec<&ComplexMatrix> = idx.iter().map(|&i| &train[i]).collect();
            let batch = objective.assemble(&clean, &mut rng)?;
            let (loss, grads) = regression_loss(&net, &batch)?;
            steps += 1;
            if !loss.is_finite() || !grads.norm_sq().is_finite() {
                return Err(Error::Training { step: steps, loss });
            }
            opt.step(net.params_mut().flat_mut(), grads.flat())?;
            sum += loss * idx.len() as f64;
            seen += idx.len();
        }
        let val_loss = validation_loss(&net, objective, val, cfg.batch_size, cfg.seed)?;
        if !val_loss.is_finite() {
            return Err(Error::Training { step: steps, loss: val_loss });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: Some(sum / seen.max(1) as f64),
            val_loss,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
        if val_loss < best.1 {
            best = (epoch, val_loss, net.clone());
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            save(&best.2)?;
        }
        if truncated {
            break;
        }
        if let Some(budget) = cfg.time_budget_s {
            if start.elapsed().as_secs_f64() > budget {
                truncated = epoch < cfg.epochs;
                break;
            }
        }
    }
    save(&best.2)?;
    Ok(TrainOutcome {
        model: best.2,
        history,
        best_epoch: best.0,
        steps,
        truncated,
    })
}
