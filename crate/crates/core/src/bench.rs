//! NMSE, SNR sweeps, sampling-time measurements and CSV reports.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::channel::load_dataset;
use crate::error::{Error, Result};
use crate::flow::load_flow_model;
use crate::nn::UNet;
use crate::pilot::{ls_estimate, make_pilots, measure, snr_to_sigma, PilotConfig};
use crate::sampler::{euler_estimate_batch, SamplerConfig, UpdateRule};
use crate::score::{annealed_langevin_batch, LangevinConfig, ScoreModel};
use crate::tensor::{ComplexMatrix, Rng, RNG_ALGORITHM};

/// Reported in place of `-inf` for a perfect estimate.
pub const NMSE_FLOOR_DB: f64 = -300.0;

/// Untimed estimates run before each timed block.
pub const WARMUP_ESTIMATES: usize = 3;

const DEFAULT_CHUNK: usize = 50;

fn to_db(ratio: f64) -> f64 {
    if ratio > 0.0 {
        (10.0 * ratio.log10()).max(NMSE_FLOOR_DB)
    } else {
        NMSE_FLOOR_DB
    }
}

/// `10 log10(||h_est - h_true||^2 / ||h_true||^2)`.
pub fn nmse_db(h_est: &ComplexMatrix, h_true: &ComplexMatrix) -> Result<f64> {
    let power = h_true.frobenius_norm_sq();
    if !(power > 0.0) {
        return Err(Error::InvalidInput("true channel has zero norm".into()));
    }
    Ok(to_db(h_est.sub(h_true)?.frobenius_norm_sq() / power))
}

/// Running NMSE over many trials.
///
/// The aggregate is the ratio of summed error energy to summed channel
/// energy, `E||H_est - H||^2 / E||H||^2`. Channels are normalised only on
/// average, so the mean of per-trial ratios would carry a Jensen bias of
/// `E[1/||H||^2] E||H||^2 > 1` and miss the analytic LS value.
#[derive(Debug, Clone, Default)]
pub struct NmseAccumulator {
    errors: Vec<f64>,
    powers: Vec<f64>,
}

impl NmseAccumulator {
    pub fn push(&mut self, h_est: &ComplexMatrix, h_true: &ComplexMatrix) -> Result<()> {
        let power = h_true.frobenius_norm_sq();
        if !(power > 0.0) {
            return Err(Error::InvalidInput("true channel has zero norm".into()));
        }
        self.errors.push(h_est.sub(h_true)?.frobenius_norm_sq());
        self.powers.push(power);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.errors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.errors.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.errors.iter().sum::<f64>() / self.powers.iter().sum::<f64>()
    }

    pub fn db(&self) -> f64 {
        to_db(self.ratio())
    }

    /// Standard error of [`NmseAccumulator::db`] by the delta method.
    pub fn stderr_db(&self) -> f64 {
        let n = self.len();
        if n < 2 {
            return 0.0;
        }
        let r = self.ratio();
        if !(r > 0.0) {
            return 0.0;
        }
        let mean_p = self.powers.iter().sum::<f64>() / n as f64;
        let resid: Vec<f64> = self.errors.iter().zip(&self.powers).map(|(e, p)| e - r * p).collect();
        let var = resid.iter().map(|d| d * d).sum::<f64>() / (n - 1) as f64;
        let se_ratio = (var / n as f64).sqrt() / mean_p;
        10.0 / std::f64::consts::LN_10 * se_ratio / r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotSpec {
    pub n: usize,
    pub t: usize,
    pub power: f64,
}

impl PilotSpec {
    pub fn config(&self, seed: u64) -> PilotConfig {
        PilotConfig {
            seed,
            ..PilotConfig::new(self.n, self.t, self.power)
        }
    }
}

/// One estimator entry of an experiment file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EstimatorSpec {
    Ls,
    Fm {
        checkpoint: PathBuf,
        steps: Vec<usize>,
        #[serde(default)]
        update_rule: UpdateRule,
        #[serde(default)]
        label: Option<String>,
    },
    Sm {
        checkpoint: PathBuf,
        k: usize,
        l: usize,
        #[serde(default)]
        eps0: Option<f64>,
        #[serde(default)]
        label: Option<String>,
    },
}

/// Experiment file:
///
/// ```json
/// {
///   "dataset": "data.bin",
///   "pilots": {"n": 32, "t": 32, "power": 1.0},
///   "estimators": [{"kind": "ls"}, {"kind": "fm", "checkpoint": "fm.ckpt", "steps": [1, 5]}],
///   "snr_db": [0, 10, 20],
///   "trials": 200,
///   "seed": 1
/// }
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub dataset: PathBuf,
    pub pilots: PilotSpec,
    pub estimators: Vec<EstimatorSpec>,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    #[serde(default)]
    pub seed: u64,
    /// Samples integrated together per network call.
    #[serde(default)]
    pub batch_size: Option<usize>,
}

impl ExperimentSpec {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("bad experiment file: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn plan(&self) -> SweepPlan {
        SweepPlan {
            pilots: self.pilots,
            snr_db: self.snr_db.clone(),
            trials: self.trials,
            seed: self.seed,
            batch_size: self.batch_size.unwrap_or(DEFAULT_CHUNK),
        }
    }
}

/// Estimator with its model in memory.
#[derive(Debug, Clone)]
pub enum Estimator {
    Ls,
    Fm {
        label: String,
        model: UNet,
        sampler: SamplerConfig,
    },
    Sm {
        label: String,
        model: ScoreModel,
        langevin: LangevinConfig,
    },
}

impl Estimator {
    pub fn fm(model: UNet, steps: usize) -> Self {
        Self::Fm {
            label: "fm".into(),
            model,
            sampler: SamplerConfig::new(steps),
        }
    }

    pub fn sm(model: ScoreModel, langevin: LangevinConfig) -> Self {
        Self::Sm {
            label: "sm".into(),
            model,
            langevin,
        }
    }

    pub fn label(&self) -> &str {
        match self {
            Self::Ls => "ls",
            Self::Fm { label, .. } | Self::Sm { label, .. } => label,
        }
    }

    /// Step count reported in the CSV: S for the flow sampler, K*L for
    /// Langevin, 0 for LS.
    pub fn steps(&self) -> usize {
        match self {
            Self::Ls => 0,
            Self::Fm { sampler, .. } => sampler.steps,
            Self::Sm { langevin, .. } => langevin.evaluations(),
        }
    }

    /// Network evaluations per estimate.
    pub fn evaluations(&self) -> usize {
        self.steps()
    }

    fn model_shape(&self) -> Option<&crate::nn::NetworkConfig> {
        match self {
            Self::Ls => None,
            Self::Fm { model, .. } => Some(model.config()),
            Self::Sm { model, .. } => Some(model.net.config()),
        }
    }

    /// Refines LS initial estimates. `rng` drives Langevin noise only.
    pub fn estimate(&self, ls: &[ComplexMatrix], rng: &mut Rng) -> Result<Vec<ComplexMatrix>> {
        match self {
            Self::Ls => Ok(ls.to_vec()),
            Self::Fm { model, sampler, .. } => Ok(euler_estimate_batch(model, ls, sampler)?.estimates),
            Self::Sm { model, langevin, .. } => Ok(annealed_langevin_batch(model, ls, langevin, rng)?.estimates),
        }
    }
}

/// Everything in an experiment apart from files.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepPlan {
    pub pilots: PilotSpec,
    pub snr_db: Vec<f64>,
    pub trials: usize,
    pub seed: u64,
    pub batch_size: usize,
}

impl SweepPlan {
    pub fn validate(&self) -> Result<()> {
        if self.snr_db.is_empty() {
            return Err(Error::Config("the SNR grid is empty".into()));
        }
        if self.snr_db.iter().any(|s| !s.is_finite()) {
            return Err(Error::Config("SNR values must be finite".into()));
        }
        if self.trials == 0 {
            return Err(Error::Config("trials must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub estimator: String,
    pub snr_db: f64,
    pub steps: usize,
    pub nmse_db: f64,
    pub nmse_stderr_db: f64,
    pub wall_s: f64,
    pub evals: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Environment {
    pub crate_version: String,
    pub os: String,
    pub arch: String,
    pub threads: usize,
    pub rng: String,
}

impl Environment {
    pub fn current() -> Self {
        Self {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            threads: 1,
            rng: RNG_ALGORITHM.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub environment: Environment,
}

impl BenchReport {
    pub fn row(&self, estimator: &str, snr_db: f64, steps: usize) -> Option<&BenchRow> {
        self.rows
            .iter()
            .find(|r| r.estimator == estimator && r.snr_db == snr_db && r.steps == steps)
    }
}

/// Estimates every trial of one SNR point and times the batched calls. The
/// first [`WARMUP_ESTIMATES`] trials are estimated once untimed beforehand.
fn run_point(
    estimator: &Estimator,
    truths: &[&ComplexMatrix],
    ls: &[ComplexMatrix],
    batch_size: usize,
    rng: &mut Rng,
) -> Result<(NmseAccumulator, f64)> {
    let warm = WARMUP_ESTIMATES.min(ls.len());
    if warm > 0 && !matches!(estimator, Estimator::Ls) {
        estimator.estimate(&ls[..warm], &mut rng.derive(u64::MAX))?;
    }
    let mut acc = NmseAccumulator::default();
    let mut wall = 0.0;
    for (chunk, truth) in ls.chunks(batch_size).zip(truths.chunks(batch_size)) {
        let start = Instant::now();
        let est = estimator.estimate(chunk, rng)?;
        wall += start.elapsed().as_secs_f64();
        for (e, h) in est.iter().zip(truth) {
            acc.push(e, h)?;
        }
    }
    Ok((acc, wall))
}

/// Sweeps every estimator over the SNR grid on `test`.
///
/// Trial `i` uses channel `test[i % len]` and measurement noise drawn from a
/// stream fixed by `(seed, snr index, i)`, so all estimators see the same
/// measurements and reports are reproducible.
pub fn run_sweep_with(plan: &SweepPlan, test: &[ComplexMatrix], estimators: &[Estimator]) -> Result<BenchReport> {
    plan.validate()?;
    if test.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    if estimators.is_empty() {
        return Err(Error::Config("no estimators requested".into()));
    }
    let (m, n) = test[0].shape();
    if plan.pilots.n != n {
        return Err(Error::Config(format!(
            "pilots for {} transmit antennas, channels have {n}",
            plan.pilots.n
        )));
    }
    for est in estimators {
        if let Some(cfg) = est.model_shape() {
            cfg.check_input(m, n)
                .map_err(|e| Error::Config(format!("{} does not fit {m}x{n} channels: {e}", est.label())))?;
        }
    }
    let pilots = make_pilots(&plan.pilots.config(plan.seed))?;
    let root = Rng::new(plan.seed);
    let mut rows = Vec::new();
    for (si, &snr) in plan.snr_db.iter().enumerate() {
        let sigma = snr_to_sigma(snr, plan.pilots.power);
        let point = root.derive(si as u64);
        let truths: Vec<&ComplexMatrix> = (0..plan.trials).map(|i| &test[i % test.len()]).collect();
        let mut ls = Vec::with_capacity(plan.trials);
        for (i, h) in truths.iter().enumerate() {
            let meas = measure(h, &pilots, sigma, &mut point.derive(i as u64))?;
            ls.push(ls_estimate(&meas, plan.pilots.power)?);
        }
        for (ei, est) in estimators.iter().enumerate() {
            let mut rng = point.derive(u64::MAX - ei as u64);
            let (acc, wall) = run_point(est, &truths, &ls, plan.batch_size, &mut rng)?;
            rows.push(BenchRow {
                estimator: est.label().to_string(),
                snr_db: snr,
                steps: est.steps(),
                nmse_db: acc.db(),
                nmse_stderr_db: acc.stderr_db(),
                wall_s: wall,
                evals: est.evaluations() * plan.trials,
            });
        }
    }
    Ok(BenchReport {
        rows,
        environment: Environment::current(),
    })
}

/// Loads the dataset and checkpoints named by the experiment, then sweeps.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<BenchReport> {
    let dataset = load_dataset(&spec.dataset)?;
    let estimators = load_estimators(spec)?;
    run_sweep_with(&spec.plan(), &dataset.test, &estimators)
}

fn missing(path: &Path, e: Error) -> Error {
    Error::Config(format!("cannot use checkpoint {}: {e}", path.display()))
}

pub fn load_estimators(spec: &ExperimentSpec) -> Result<Vec<Estimator>> {
    let mut out = Vec::new();
    for e in &spec.estimators {
        match e {
            EstimatorSpec::Ls => out.push(Estimator::Ls),
            EstimatorSpec::Fm {
                checkpoint,
                steps,
                update_rule,
                label,
            } => {
                if steps.is_empty() {
                    return Err(Error::Config("fm estimator lists no step counts".into()));
                }
                let (model, _) = load_flow_model(checkpoint).map_err(|e| missing(checkpoint, e))?;
                for &s in steps {
                    let sampler = SamplerConfig {
                        steps: s,
                        update_rule: *update_rule,
                        record_trajectory: false,
                    };
                    sampler.validate().map_err(|e| Error::Config(e.to_string()))?;
                    out.push(Estimator::Fm {
                        label: label.clone().unwrap_or_else(|| "fm".into()),
                        model: model.clone(),
                        sampler,
                    });
                }
            }
            EstimatorSpec::Sm {
                checkpoint,
                k,
                l,
                eps0,
                label,
            } => {
                let model = ScoreModel::load(checkpoint).map_err(|e| missing(checkpoint, e))?;
                let mut langevin = LangevinConfig {
                    n_levels: *k,
                    steps_per_level: *l,
                    sigma_max: model.ladder.sigma_max,
                    sigma_min: model.ladder.sigma_min,
                    seed: spec.seed,
                    ..LangevinConfig::default()
                };
                if let Some(eps0) = eps0 {
                    langevin.eps0 = *eps0;
                }
                langevin.validate().map_err(|e| Error::Config(e.to_string()))?;
                out.push(Estimator::Sm {
                    label: label.clone().unwrap_or_else(|| "sm".into()),
                    model,
                    langevin,
                });
            }
        }
    }
    Ok(out)
}

/// Writes the rows with header
/// `estimator,snr_db,steps,nmse_db,nmse_stderr_db,wall_s,evals`.
pub fn emit_csv(report: &BenchReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for row in &report.rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<BenchRow>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::Reader::from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub method: String,
    pub steps: usize,
    pub evals_per_sample: usize,
    pub samples: usize,
    pub total_s: f64,
}

/// Total sampling time of each estimator over `test` at one SNR, in the
/// shape of a methods-versus-seconds table.
pub fn timing(
    test: &[ComplexMatrix],
    pilots: PilotSpec,
    snr_db: f64,
    estimators: &[Estimator],
    batch_size: usize,
    seed: u64,
) -> Result<Vec<TimingRow>> {
    let plan = SweepPlan {
        pilots,
        snr_db: vec![snr_db],
        trials: test.len(),
        seed,
        batch_size,
    };
    let report = run_sweep_with(&plan, test, estimators)?;
    Ok(report
        .rows
        .iter()
        .zip(estimators)
        .map(|(row, est)| TimingRow {
            method: row.estimator.clone(),
            steps: row.steps,
            evals_per_sample: est.evaluations(),
            samples: test.len(),
            total_s: row.wall_s,
        })
        .collect())
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, r^2)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidInput("a line fit needs two or more paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidInput("x values are all equal".into()));
    }
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, my - slope * mx, r2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn_complex;

    #[test]
    fn nmse_examples() {
        let mut rng = Rng::new(1);
        let h = randn_complex(&mut rng, 3, 4, 1.0).unwrap();
        assert_eq!(nmse_db(&h, &h).unwrap(), NMSE_FLOOR_DB);
        assert!(nmse_db(&ComplexMatrix::zeros(3, 4), &h).unwrap().abs() < 1e-12);
        assert!(nmse_db(&h.scale(2.0), &h).unwrap().abs() < 1e-12);
        assert!(matches!(nmse_db(&h, &ComplexMatrix::zeros(3, 4)), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn accumulator_is_a_ratio_of_sums() {
        let a = ComplexMatrix::identity(2);
        let b = a.scale(3.0);
        let mut acc = NmseAccumulator::default();
        acc.push(&a.scale(2.0), &a).unwrap(); // error 2, power 2
        acc.push(&b.scale(0.0), &b).unwrap(); // error 18, power 18
        assert!((acc.ratio() - 1.0).abs() < 1e-15);
        assert_eq!(acc.stderr_db(), 0.0);
    }

    #[test]
    fn line_fit() {
        let (s, c, r2) = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]).unwrap();
        assert!((s - 2.0).abs() < 1e-12 && (c - 1.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        assert!(linear_fit(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn experiment_json() {
        let spec = ExperimentSpec::from_json(
            r#"{"dataset": "d.bin", "pilots": {"n": 32, "t": 32, "power": 1.0},
                "estimators": [{"kind": "ls"},
                               {"kind": "fm", "checkpoint": "fm.ckpt", "steps": [1, 5, 20, 100]},
                               {"kind": "sm", "checkpoint": "sm.ckpt", "k": 2311, "l": 3}],
                "snr_db": [10], "trials": 500, "seed": 4}"#,
        )
        .unwrap();
        assert_eq!(spec.estimators.len(), 3);
        assert_eq!(spec.plan().trials, 500);
        assert!(ExperimentSpec::from_json(r#"{"dataset": 3}"#).is_err());
    }
}
