//! Score-matching baseline: a noise-conditional score network trained by
//! denoising score matching and sampled with annealed Langevin dynamics.
//!
//! Noise lives in the real coordinates of the stacked `[2, M, N]` tensor:
//! `x = h + sigma z` with `z ~ N(0, I)`. The network reuses the velocity
//! backbone; it predicts `-z` and the score is that output divided by
//! `sigma`, so the `sigma^2`-weighted objective is simply `||net + z||^2`.
//! The noise level reaches the network through its time input as
//! `ln(sigma_max / sigma) / ln(sigma_max / sigma_min)`, which runs from 0 at
//! the top of the ladder to 1 at the bottom.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::channel::ChannelDataset;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{load_checkpoint, save_checkpoint, SM_MAGIC};
use crate::nn::{Grads, NetworkConfig, UNet};
use crate::tensor::{complex_to_tensor, tensor_to_complex, ComplexMatrix, RealTensor, Rng};
use crate::train::{self, stack, Objective, RegressionBatch, TrainConfig, TrainOutcome};

/// Geometric noise ladder from `sigma_max` down to `sigma_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseLadder {
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub levels: usize,
}

impl NoiseLadder {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "need sigma_max > sigma_min > 0, got {} and {}",
                self.sigma_max, self.sigma_min
            )));
        }
        if self.levels == 0 {
            return Err(Error::InvalidParameter("the ladder needs at least one level".into()));
        }
        Ok(())
    }

    /// `sigma_k` for `k = 1..=K`, first entry `sigma_max`, last `sigma_min`
    /// (a single level sits at `sigma_max`).
    pub fn sigmas(&self) -> Vec<f64> {
        if self.levels == 1 {
            return vec![self.sigma_max];
        }
        let ratio = (self.sigma_min / self.sigma_max).ln();
        (0..self.levels)
            .map(|k| self.sigma_max * (ratio * k as f64 / (self.levels - 1) as f64).exp())
            .collect()
    }

    /// Network conditioning value for a noise level.
    pub fn condition(&self, sigma: f64) -> f64 {
        (self.sigma_max / sigma).ln() / (self.sigma_max / self.sigma_min).ln()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LangevinConfig {
    /// K
    pub n_levels: usize,
    /// L
    pub steps_per_level: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
    pub eps0: f64,
    /// Switch off to make the sampler deterministic.
    pub inject_noise: bool,
    pub seed: u64,
}

impl Default for LangevinConfig {
    fn default() -> Self {
        Self {
            n_levels: 500,
            steps_per_level: 3,
            sigma_max: 1.0,
            sigma_min: 0.01,
            eps0: 2e-5,
            inject_noise: true,
            seed: 0,
        }
    }
}

impl LangevinConfig {
    /// K = 2311 levels, L = 3 updates per level.
    pub fn full_scale() -> Self {
        Self {
            n_levels: 2311,
            ..Self::default()
        }
    }

    pub fn ladder(&self) -> NoiseLadder {
        NoiseLadder {
            sigma_max: self.sigma_max,
            sigma_min: self.sigma_min,
            levels: self.n_levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.ladder().validate()?;
        if self.steps_per_level == 0 {
            return Err(Error::InvalidParameter("at least one update per level is required".into()));
        }
        if !(self.eps0 > 0.0) || !self.eps0.is_finite() {
            return Err(Error::InvalidParameter(format!("eps0 must be positive, got {}", self.eps0)));
        }
        Ok(())
    }

    /// Network evaluations per sample.
    pub fn evaluations(&self) -> usize {
        self.n_levels * self.steps_per_level
    }
}

/// Score of the noise-perturbed data distribution over `[B, 2, M, N]`.
pub trait ScoreField {
    fn score_batch(&self, x: &RealTensor, sigma: &[f64]) -> Result<RealTensor>;
}

#[derive(Debug, Clone)]
pub struct ScoreModel {
    pub net: UNet,
    /// Range the network was trained over; fixes its conditioning map.
    pub ladder: NoiseLadder,
}

impl ScoreModel {
    pub fn new(net: UNet, ladder: NoiseLadder) -> Result<Self> {
        ladder.validate()?;
        Ok(Self { net, ladder })
    }

    fn conditions(&self, sigma: &[f64]) -> Vec<f64> {
        sigma.iter().map(|&s| self.ladder.condition(s)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, SM_MAGIC, &self.net, &score_meta(&self.ladder))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (net, meta) = load_checkpoint(path, SM_MAGIC)?;
        let ladder = serde_json::from_value(meta["ladder"].clone())
            .map_err(|e| Error::Config(format!("checkpoint lacks a noise ladder: {e}")))?;
        Self::new(net, ladder)
    }
}

impl ScoreField for ScoreModel {
    fn score_batch(&self, x: &RealTensor, sigma: &[f64]) -> Result<RealTensor> {
        let mut out = self.net.forward_batch(x, &self.conditions(sigma))?;
        let per = out.len() / sigma.len();
        for (chunk, s) in out.data_mut().chunks_mut(per).zip(sigma) {
            for v in chunk {
                *v /= s;
            }
        }
        Ok(out)
    }
}

fn score_meta(ladder: &NoiseLadder) -> serde_json::Value {
    serde_json::json!({ "kind": "score", "ladder": ladder })
}

/// Perturbs each clean channel at its own noise level and returns the
/// regression batch: input `h + sigma z`, target `-z`.
fn perturb(ladder: &NoiseLadder, clean: &[&ComplexMatrix], sigmas: &[f64], rng: &mut Rng) -> Result<RegressionBatch> {
    let mut inputs = Vec::with_capacity(clean.len());
    let mut targets = Vec::with_capacity(clean.len());
    for (h, &s) in clean.iter().zip(sigmas) {
        let mut x = complex_to_tensor(h);
        let mut target = RealTensor::zeros(x.shape().to_vec());
        for (xi, ti) in x.data_mut().iter_mut().zip(target.data_mut()) {
            let z = rng.normal();
            *xi += s * z;
            *ti = -z;
        }
        inputs.push(x);
        targets.push(target);
    }
    Ok(RegressionBatch {
        input: stack(&inputs)?,
        cond: sigmas.iter().map(|&s| ladder.condition(s)).collect(),
        target: stack(&targets)?,
    })
}

/// Log-uniform noise level within the ladder's range.
fn draw_sigma(ladder: &NoiseLadder, rng: &mut Rng) -> f64 {
    let (lo, hi) = (ladder.sigma_min.ln(), ladder.sigma_max.ln());
    (lo + (hi - lo) * rng.uniform()).exp()
}

/// Weighted DSM loss at given noise levels: mean over samples of
/// `sigma^2 ||s(h + sigma z, sigma) + z / sigma||^2 = ||net + z||^2`.
pub fn dsm_loss_at(model: &ScoreModel, clean: &[ComplexMatrix], sigmas: &[f64], rng: &mut Rng) -> Result<(f64, Grads)> {
    if clean.is_empty() || clean.len() != sigmas.len() {
        return Err(Error::Dimension(format!(
            "{} noise levels for {} samples",
            sigmas.len(),
            clean.len()
        )));
    }
    let refs: Vec<&ComplexMatrix> = clean.iter().collect();
    train::regression_loss(&model.net, &perturb(&model.ladder, &refs, sigmas, rng)?)
}

/// DSM loss with log-uniform noise levels.
pub fn dsm_loss(model: &ScoreModel, clean: &[ComplexMatrix], rng: &mut Rng) -> Result<(f64, Grads)> {
    let sigmas: Vec<f64> = clean.iter().map(|_| draw_sigma(&model.ladder, rng)).collect();
    dsm_loss_at(model, clean, &sigmas, rng)
}

/// Same weighted loss for any score field, value only. Draws the noise
/// exactly as [`dsm_loss_at`] does, so equal seeds give equal perturbations.
pub fn dsm_loss_value(
    field: &impl ScoreField,
    ladder: &NoiseLadder,
    clean: &[ComplexMatrix],
    sigmas: &[f64],
    rng: &mut Rng,
) -> Result<f64> {
    if clean.is_empty() || clean.len() != sigmas.len() {
        return Err(Error::Dimension(format!(
            "{} noise levels for {} samples",
            sigmas.len(),
            clean.len()
        )));
    }
    let refs: Vec<&ComplexMatrix> = clean.iter().collect();
    let batch = perturb(ladder, &refs, sigmas, rng)?;
    let score = field.score_batch(&batch.input, sigmas)?;
    if score.shape() != batch.target.shape() {
        return Err(Error::Dimension(format!(
            "score returned {:?} for {:?}",
            score.shape(),
            batch.target.shape()
        )));
    }
    let per = score.len() / sigmas.len();
    let mut total = 0.0;
    for ((s, z), sigma) in score.data().chunks(per).zip(batch.target.data().chunks(per)).zip(sigmas) {
        total += s.iter().zip(z).map(|(a, b)| (sigma * a - b).powi(2)).sum::<f64>();
    }
    Ok(total / clean.len() as f64)
}

struct ScoreObjective {
    ladder: NoiseLadder,
}

impl Objective for ScoreObjective {
    fn assemble(&self, clean: &[&ComplexMatrix], rng: &mut Rng) -> Result<RegressionBatch> {
        let sigmas: Vec<f64> = clean.iter().map(|_| draw_sigma(&self.ladder, rng)).collect();
        perturb(&self.ladder, clean, &sigmas, rng)
    }

    fn magic(&self) -> &'static [u8; 8] {
        SM_MAGIC
    }

    fn meta(&self) -> serde_json::Value {
        score_meta(&self.ladder)
    }
}

#[derive(Debug, Clone)]
pub struct ScoreTrainOutcome {
    pub model: ScoreModel,
    pub run: TrainOutcome,
}

/// Denoising score matching on the train split. `cfg.flow` is ignored.
pub fn dsm_train(
    dataset: &ChannelDataset,
    network: NetworkConfig,
    ladder: NoiseLadder,
    cfg: &TrainConfig,
) -> Result<ScoreTrainOutcome> {
    ladder.validate()?;
    let (m, n) = dataset.shape();
    network.check_input(m, n)?;
    let run = train::run(
        UNet::new(network)?,
        &dataset.train,
        &dataset.val,
        cfg,
        &ScoreObjective { ladder },
    )?;
    Ok(ScoreTrainOutcome {
        model: ScoreModel::new(run.model.clone(), ladder)?,
        run,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct LangevinOutput {
    pub estimates: Vec<ComplexMatrix>,
    /// Per-sample score evaluations.
    pub evaluations: usize,
}

/// Annealed Langevin dynamics over a batch of chains:
///
/// ```text
/// for k in 1..=K, l in 1..=L:
///     H <- H + a_k s(H, sigma_k) + sqrt(2 a_k) z,   a_k = eps0 sigma_k^2 / sigma_K^2
/// ```
pub fn annealed_langevin_batch(
    field: &impl ScoreField,
    h_init: &[ComplexMatrix],
    cfg: &LangevinConfig,
    rng: &mut Rng,
) -> Result<LangevinOutput> {
    cfg.validate()?;
    if h_init.is_empty() {
        return Err(Error::InvalidInput("no initial states".into()));
    }
    let (m, n) = h_init[0].shape();
    let b = h_init.len();
    let mut x = stack(&h_init.iter().map(complex_to_tensor).collect::<Vec<_>>())?;
    let sigmas = cfg.ladder().sigmas();
    let last = sigmas[sigmas.len() - 1];
    let mut evaluations = 0;
    for (k, &sigma) in sigmas.iter().enumerate() {
        let alpha = cfg.eps0 * sigma * sigma / (last * last);
        let noise_scale = (2.0 * alpha).sqrt();
        let levels = vec![sigma; b];
        for l in 0..cfg.steps_per_level {
            let s = field.score_batch(&x, &levels)?;
            if s.shape() != x.shape() {
                return Err(Error::Dimension(format!(
                    "score returned {:?} for state {:?}",
                    s.shape(),
                    x.shape()
                )));
            }
            evaluations += 1;
            for (xi, si) in x.data_mut().iter_mut().zip(s.data()) {
                *xi += alpha * si;
                if cfg.inject_noise {
                    *xi += noise_scale * rng.normal();
                }
            }
            if !x.is_finite() {
                return Err(Error::Divergence {
                    at: format!("level {} update {}", k + 1, l + 1),
                });
            }
        }
    }
    let estimates = x
        .data()
        .chunks(2 * m * n)
        .map(|c| tensor_to_complex(&RealTensor::new(vec![2, m, n], c.to_vec())?))
        .collect::<Result<_>>()?;
    Ok(LangevinOutput {
        estimates,
        evaluations,
    })
}

pub fn annealed_langevin(
    field: &impl ScoreField,
    h_init: &ComplexMatrix,
    cfg: &LangevinConfig,
    rng: &mut Rng,
) -> Result<ComplexMatrix> {
    let mut out = annealed_langevin_batch(field, std::slice::from_ref(h_init), cfg, rng)?;
    Ok(out.estimates.pop().expect("one estimate per chain"))
}
