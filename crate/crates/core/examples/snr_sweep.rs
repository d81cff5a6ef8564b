//! Sweeps LS and the flow model at several step counts over an SNR grid and
//! writes the CSV report.
//!
//! `cargo run --release --example snr_sweep -- channels.bin flow.ckpt sweep.csv`

use fmchest::bench::{emit_csv, run_sweep, EstimatorSpec, ExperimentSpec, PilotSpec};

fn main() -> fmchest::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let spec = ExperimentSpec {
        dataset: arg(1, "channels.bin").into(),
        pilots: PilotSpec { n: 32, t: 32, power: 1.0 },
        estimators: vec![
            EstimatorSpec::Ls,
            EstimatorSpec::Fm {
                checkpoint: arg(2, "flow.ckpt").into(),
                steps: vec![1, 2, 5, 20],
                update_rule: Default::default(),
                label: None,
            },
        ],
        snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
        trials: 200,
        seed: 11,
        batch_size: None,
    };
    let report = run_sweep(&spec)?;
    for r in &report.rows {
        println!(
            "{:<3} S={:<3} SNR {:>4} dB  NMSE {:>7.2} +/- {:.2} dB",
            r.estimator, r.steps, r.snr_db, r.nmse_db, r.nmse_stderr_db
        );
    }
    let out = arg(3, "sweep.csv");
    emit_csv(&report, &out)?;
    println!("wrote {out}");
    Ok(())
}
