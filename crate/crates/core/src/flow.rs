//! Conditional flow matching between noisy and clean channels.
//!
//! The source sample is a corrupted channel `H0 = H1 + E`, `E ~ CN(0, s^2)`
//! per entry, and the path between the pair is the straight line
//!
//! ```text
//! H_t = t H1 + (1 - (1 - sigma_min) t) H0,      dH_t/dt = H1 - (1 - sigma_min) H0
//! ```
//!
//! The network `u(H_t, t)` regresses onto that constant conditional velocity.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelDataset;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, FM_MAGIC};
use crate::nn::{Grads, NetworkConfig, UNet};
use crate::tensor::{complex_to_tensor, randn_complex, ComplexMatrix, RealTensor, Rng};
use crate::train::{self, stack, Objective, RegressionBatch, TrainConfig, TrainOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlowPathConfig {
    pub sigma_min: f64,
    /// Per-entry standard deviation of the training corruption.
    pub sigma_tilde: f64,
}

impl Default for FlowPathConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.0,
            sigma_tilde: 0.1,
        }
    }
}

impl FlowPathConfig {
    pub fn new(sigma_tilde: f64) -> Self {
        Self {
            sigma_tilde,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.sigma_min) {
            return Err(Error::InvalidParameter(format!(
                "sigma_min must lie in [0, 1), got {}",
                self.sigma_min
            )));
        }
        if !(self.sigma_tilde > 0.0) || !self.sigma_tilde.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "sigma_tilde must be positive, got {}",
                self.sigma_tilde
            )));
        }
        Ok(())
    }
}

/// A time-dependent vector field over stacked `[B, 2, M, N]` channels.
pub trait VelocityField {
    fn velocity_batch(&self, x: &RealTensor, t: &[f64]) -> Result<RealTensor>;
}

impl VelocityField for UNet {
    fn velocity_batch(&self, x: &RealTensor, t: &[f64]) -> Result<RealTensor> {
        self.forward_batch(x, t)
    }
}

/// Draws `E` and returns `(H1 + E, E)`.
pub fn corrupt(h1: &ComplexMatrix, sigma_tilde: f64, rng: &mut Rng) -> Result<(ComplexMatrix, ComplexMatrix)> {
    if !(sigma_tilde > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "sigma_tilde must be positive, got {sigma_tilde}"
        )));
    }
    let e = randn_complex(rng, h1.rows(), h1.cols(), sigma_tilde)?;
    Ok((h1.add(&e)?, e))
}

/// Point of the conditional path at time `t`.
pub fn flow_point(h0: &ComplexMatrix, h1: &ComplexMatrix, t: f64, sigma_min: f64) -> Result<ComplexMatrix> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidParameter(format!("t must lie in [0, 1], got {t}")));
    }
    let mut out = h1.scale(t);
    out.axpy(1.0 - (1.0 - sigma_min) * t, h0)?;
    Ok(out)
}

/// Constant velocity of the conditional path.
pub fn target_velocity(h0: &ComplexMatrix, h1: &ComplexMatrix, sigma_min: f64) -> Result<ComplexMatrix> {
    let mut out = h1.clone();
    out.axpy(-(1.0 - sigma_min), h0)?;
    Ok(out)
}

fn pair_batch(batch: &[(ComplexMatrix, ComplexMatrix)], ts: &[f64], sigma_min: f64) -> Result<RegressionBatch> {
    if batch.is_empty() {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if ts.len() != batch.len() {
        return Err(Error::Dimension(format!(
            "{} times for {} pairs",
            ts.len(),
            batch.len()
        )));
    }
    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for ((h0, h1), &t) in batch.iter().zip(ts) {
        inputs.push(complex_to_tensor(&flow_point(h0, h1, t, sigma_min)?));
        targets.push(complex_to_tensor(&target_velocity(h0, h1, sigma_min)?));
    }
    Ok(RegressionBatch {
        input: stack(&inputs)?,
        cond: ts.to_vec(),
        target: stack(&targets)?,
    })
}

/// CFM loss at given times: mean over pairs of `||u(H_t, t) - (H1 - (1 - sigma_min) H0)||^2`.
pub fn cfm_loss_at(
    model: &UNet,
    batch: &[(ComplexMatrix, ComplexMatrix)],
    ts: &[f64],
    sigma_min: f64,
) -> Result<(f64, Grads)> {
    train::regression_loss(model, &pair_batch(batch, ts, sigma_min)?)
}

/// CFM loss with `t ~ U[0, 1]` drawn independently per pair.
pub fn cfm_loss(
    model: &UNet,
    batch: &[(ComplexMatrix, ComplexMatrix)],
    sigma_min: f64,
    rng: &mut Rng,
) -> Result<(f64, Grads)> {
    let ts: Vec<f64> = batch.iter().map(|_| rng.uniform()).collect();
    cfm_loss_at(model, batch, &ts, sigma_min)
}

/// Loss value for any field, with no gradients.
pub fn cfm_loss_value(
    field: &impl VelocityField,
    batch: &[(ComplexMatrix, ComplexMatrix)],
    ts: &[f64],
    sigma_min: f64,
) -> Result<f64> {
    let b = pair_batch(batch, ts, sigma_min)?;
    let out = field.velocity_batch(&b.input, &b.cond)?;
    if out.shape() != b.target.shape() {
        return Err(Error::Dimension(format!(
            "field output {:?} against target {:?}",
            out.shape(),
            b.target.shape()
        )));
    }
    let sq: f64 = out
        .data()
        .iter()
        .zip(b.target.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / batch.len() as f64)
}

pub(crate) struct FlowObjective {
    pub path: FlowPathConfig,
}

impl Objective for FlowObjective {
    fn assemble(&self, clean: &[&ComplexMatrix], rng: &mut Rng) -> Result<RegressionBatch> {
        let mut pairs = Vec::with_capacity(clean.len());
        let mut ts = Vec::with_capacity(clean.len());
        for h1 in clean {
            let (h0, _) = corrupt(h1, self.path.sigma_tilde, rng)?;
            pairs.push((h0, (*h1).clone()));
            ts.push(rng.uniform());
        }
        pair_batch(&pairs, &ts, self.path.sigma_min)
    }

    fn magic(&self) -> &'static [u8; 8] {
        FM_MAGIC
    }

    fn meta(&self) -> serde_json::Value {
        flow_meta(&self.path)
    }
}

fn flow_meta(path: &FlowPathConfig) -> serde_json::Value {
    serde_json::json!({ "kind": "flow", "path": path })
}

/// Writes an `FMCKPT01` checkpoint recording the training path.
pub fn save_flow_model(path: impl AsRef<Path>, model: &UNet, flow: &FlowPathConfig) -> Result<()> {
    save_checkpoint(path, FM_MAGIC, model, &flow_meta(flow))
}

pub fn load_flow_model(path: impl AsRef<Path>) -> Result<(UNet, FlowPathConfig)> {
    let (net, meta) = load_checkpoint(path, FM_MAGIC)?;
    let flow = serde_json::from_value(meta["path"].clone())
        .map_err(|e| Error::Config(format!("checkpoint lacks its path settings: {e}")))?;
    Ok((net, flow))
}

/// Trains a fresh network on the dataset's train split, selecting by
/// validation loss.
pub fn train(dataset: &ChannelDataset, network: NetworkConfig, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let (m, n) = dataset.shape();
    network.check_input(m, n)?;
    train_from(UNet::new(network)?, &dataset.train, &dataset.val, cfg)
}

/// Continues training an existing network.
pub fn train_from(model: UNet, train: &[ComplexMatrix], val: &[ComplexMatrix], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.flow.validate()?;
    train::run(model, train, val, cfg, &FlowObjective { path: cfg.flow })
}
