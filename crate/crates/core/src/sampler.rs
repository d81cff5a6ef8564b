//! Deterministic Euler integration of a learned velocity field, starting at
//! the least-squares estimate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::VelocityField;
use crate::pilot::{ls_estimate, Measurement};
use crate::tensor::{complex_to_tensor, tensor_to_complex, ComplexMatrix, RealTensor};
use crate::train::stack;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateRule {
    /// `H <- H + dt * u(H, (s - 1) dt)`.
    #[default]
    StandardEuler,
    /// `H <- H + s * dt * u(H, (s - 1) dt)`. Integrates over a total time of
    /// `(S + 1) / 2`, so it overshoots for every `S > 1`; kept for comparison.
    StepScaled,
}

impl UpdateRule {
    fn coefficient(self, s: usize, dt: f64) -> f64 {
        match self {
            Self::StandardEuler => dt,
            Self::StepScaled => s as f64 * dt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub steps: usize,
    pub update_rule: UpdateRule,
    pub record_trajectory: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 5,
            update_rule: UpdateRule::StandardEuler,
            record_trajectory: false,
        }
    }
}

impl SamplerConfig {
    pub fn new(steps: usize) -> Self {
        Self {
            steps,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::InvalidParameter("at least one sampling step is required".into()));
        }
        Ok(())
    }
}

/// A field that ignores state and time; integrates to `h + v` exactly under
/// the standard rule.
#[derive(Debug, Clone)]
pub struct ConstantField {
    value: RealTensor,
}

impl ConstantField {
    pub fn new(v: &ComplexMatrix) -> Self {
        Self {
            value: complex_to_tensor(v),
        }
    }
}

impl VelocityField for ConstantField {
    fn velocity_batch(&self, x: &RealTensor, _t: &[f64]) -> Result<RealTensor> {
        let per = self.value.len();
        if x.len() % per != 0 || x.shape().get(1..) != Some(self.value.shape()) {
            return Err(Error::Dimension(format!(
                "constant field of shape {:?} applied to {:?}",
                self.value.shape(),
                x.shape()
            )));
        }
        let data = self.value.data().repeat(x.len() / per);
        RealTensor::new(x.shape().to_vec(), data)
    }
}

/// Result of a batched run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerOutput {
    pub estimates: Vec<ComplexMatrix>,
    /// States after each step, `trajectory[s][b]` with `s = 0` the initial
    /// state. Empty unless recording was requested.
    pub trajectory: Vec<Vec<ComplexMatrix>>,
    /// Per-sample network evaluations.
    pub evaluations: usize,
}

/// Integrates a batch of initial states together, one network call per step.
pub fn euler_estimate_batch(
    field: &impl VelocityField,
    h_init: &[ComplexMatrix],
    cfg: &SamplerConfig,
) -> Result<SamplerOutput> {
    cfg.validate()?;
    if h_init.is_empty() {
        return Err(Error::InvalidInput("no initial states".into()));
    }
    let (m, n) = h_init[0].shape();
    let mut x = stack(&h_init.iter().map(complex_to_tensor).collect::<Vec<_>>())?;
    let b = h_init.len();
    let dt = 1.0 / cfg.steps as f64;
    let unstack = |x: &RealTensor| -> Result<Vec<ComplexMatrix>> {
        x.data()
            .chunks(2 * m * n)
            .map(|c| tensor_to_complex(&RealTensor::new(vec![2, m, n], c.to_vec())?))
            .collect()
    };
    let mut trajectory = Vec::new();
    if cfg.record_trajectory {
        trajectory.push(h_init.to_vec());
    }
    for s in 1..=cfg.steps {
        let t = vec![(s - 1) as f64 * dt; b];
        let v = field.velocity_batch(&x, &t)?;
        if v.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "field returned {:?} for state {:?}",
                v.shape(),
                x.shape()
            )));
        }
        let c = cfg.update_rule.coefficient(s, dt);
        for (xi, vi) in x.data_mut().iter_mut().zip(v.data()) {
            *xi += c * vi;
        }
        if !x.is_finite() {
            return Err(Error::Divergence {
                at: format!("step {s} of {}", cfg.steps),
            });
        }
        if cfg.record_trajectory {
            trajectory.push(unstack(&x)?);
        }
    }
    Ok(SamplerOutput {
        estimates: unstack(&x)?,
        trajectory,
        evaluations: cfg.steps,
    })
}

pub fn euler_estimate(field: &impl VelocityField, h_init: &ComplexMatrix, cfg: &SamplerConfig) -> Result<ComplexMatrix> {
    let mut out = euler_estimate_batch(field, std::slice::from_ref(h_init), cfg)?;
    Ok(out.estimates.pop().expect("one estimate per input"))
}

/// LS initial estimate refined by the field.
pub fn estimate_channel(
    field: &impl VelocityField,
    meas: &Measurement,
    pilot_power: f64,
    cfg: &SamplerConfig,
) -> Result<ComplexMatrix> {
    euler_estimate(field, &ls_estimate(meas, pilot_power)?, cfg)
}
