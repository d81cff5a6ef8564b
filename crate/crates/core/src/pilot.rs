//! Pilots, the measurement model `Y = H P + E`, and the LS estimate.
//!
//! Pilots satisfy `P P^H = E_p I_N` exactly. When `T` is a power of two the
//! rows come from a Sylvester Hadamard matrix rotated by `pi/4`, so every
//! entry is a QPSK symbol. For other lengths QPSK rows cannot all be
//! orthogonal (odd `T` makes every inner product nonzero), and the rows are
//! taken from the `T`-point DFT instead. The seed only chooses which rows
//! are used and in what order.
//!
//! SNR is the per-entry receive SNR `E_p * E|h|^2 / sigma^2` with unit
//! channel power, so the LS error has NMSE `sigma^2 / E_p = 1 / SNR`.

use std::f64::consts::{FRAC_PI_4, PI};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{randn_complex, ComplexMatrix, Rng};

/// Relative orthogonality residual accepted by [`make_pilots`].
pub const PILOT_TOLERANCE: f64 = 1e-10;
/// Residual above which [`ls_estimate`] refuses the pilots.
pub const LS_PILOT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PilotConfig {
    pub n_tx: usize,
    pub t_slots: usize,
    pub pilot_power: f64,
    pub seed: u64,
}

impl PilotConfig {
    pub fn new(n_tx: usize, t_slots: usize, pilot_power: f64) -> Self {
        Self {
            n_tx,
            t_slots,
            pilot_power,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    /// `M x T` received block.
    pub y: ComplexMatrix,
    /// `N x T` pilot block.
    pub pilots: ComplexMatrix,
    pub noise_sigma: f64,
}

fn sylvester_sign(row: usize, col: usize) -> f64 {
    if (row & col).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

pub fn make_pilots(cfg: &PilotConfig) -> Result<ComplexMatrix> {
    let (n, t) = (cfg.n_tx, cfg.t_slots);
    if n == 0 {
        return Err(Error::InvalidParameter("n_tx must be >= 1".into()));
    }
    if t < n {
        return Err(Error::InvalidParameter(format!(
            "t_slots = {t} < n_tx = {n}: orthogonal pilots need at least N slots"
        )));
    }
    if !(cfg.pilot_power > 0.0) || !cfg.pilot_power.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "pilot power must be positive, got {}",
            cfg.pilot_power
        )));
    }

    // Fisher-Yates over the T candidate rows; the first N are used.
    let mut rows: Vec<usize> = (0..t).collect();
    let mut rng = Rng::new(cfg.seed);
    for i in (1..t).rev() {
        let j = rng.below(i + 1);
        rows.swap(i, j);
    }

    let amplitude = (cfg.pilot_power / t as f64).sqrt();
    let rotation = Complex64::from_polar(amplitude, FRAC_PI_4);
    let hadamard = t.is_power_of_two();
    let p = ComplexMatrix::from_fn(n, t, |r, c| {
        let row = rows[r];
        if hadamard {
            rotation * sylvester_sign(row, c)
        } else {
            let phase = -2.0 * PI * ((row * c) % t) as f64 / t as f64;
            rotation * Complex64::from_polar(1.0, phase)
        }
    });

    let residual = orthogonality_residual(&p, cfg.pilot_power);
    if residual > PILOT_TOLERANCE {
        return Err(Error::InvalidPilot { residual });
    }
    Ok(p)
}

/// `||P P^H - E_p I||_F / E_p`.
pub fn orthogonality_residual(pilots: &ComplexMatrix, pilot_power: f64) -> f64 {
    let gram = pilots
        .matmul(&pilots.hermitian())
        .expect("P P^H is always conforming");
    let target = ComplexMatrix::identity(pilots.rows()).scale(pilot_power);
    (&gram - &target).frobenius_norm() / pilot_power
}

pub fn measure(
    h: &ComplexMatrix,
    pilots: &ComplexMatrix,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<Measurement> {
    let clean = h.matmul(pilots)?;
    let noise = randn_complex(rng, clean.rows(), clean.cols(), noise_sigma)?;
    Ok(Measurement {
        y: &clean + &noise,
        pilots: pilots.clone(),
        noise_sigma,
    })
}

/// `Y P^H / E_p`, i.e. the true channel plus white `CN(0, sigma^2/E_p)` error.
pub fn ls_estimate(meas: &Measurement, pilot_power: f64) -> Result<ComplexMatrix> {
    if !(pilot_power > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "pilot power must be positive, got {pilot_power}"
        )));
    }
    let residual = orthogonality_residual(&meas.pilots, pilot_power);
    if !(residual <= LS_PILOT_TOLERANCE) {
        return Err(Error::InvalidPilot { residual });
    }
    Ok(meas
        .y
        .matmul(&meas.pilots.hermitian())?
        .scale(1.0 / pilot_power))
}

/// Noise standard deviation giving per-entry receive SNR `snr_db`.
pub fn snr_to_sigma(snr_db: f64, pilot_power: f64) -> f64 {
    (pilot_power / 10f64.powf(snr_db / 10.0)).sqrt()
}
