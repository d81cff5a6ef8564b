//! Least-squares estimation from orthogonal pilots over an SNR grid. The
//! measured NMSE sits on the analytic line NMSE = -SNR.
//!
//! `cargo run --release --example ls_baseline`

use fmchest::bench::{run_sweep_with, Estimator, PilotSpec, SweepPlan};
use fmchest::channel::{generate_channel, ChannelModelConfig};
use fmchest::pilot::{make_pilots, orthogonality_residual, PilotConfig};
use fmchest::Rng;

fn main() -> fmchest::Result<()> {
    let cfg = ChannelModelConfig::new(8, 32);
    let mut rng = Rng::new(1);
    let test: Vec<_> = (0..200).map(|_| generate_channel(&cfg, &mut rng)).collect();

    let pilots = make_pilots(&PilotConfig::new(32, 32, 1.0))?;
    println!("pilot orthogonality residual {:.1e}", orthogonality_residual(&pilots, 1.0));

    let plan = SweepPlan {
        pilots: PilotSpec { n: 32, t: 32, power: 1.0 },
        snr_db: vec![0.0, 5.0, 10.0, 15.0, 20.0],
        trials: 500,
        seed: 2,
        batch_size: 100,
    };
    let report = run_sweep_with(&plan, &test, &[Estimator::Ls])?;
    println!("{:>8} {:>10} {:>10}", "SNR dB", "NMSE dB", "analytic");
    for r in &report.rows {
        println!("{:>8.1} {:>10.2} {:>10.2}", r.snr_db, r.nmse_db, -r.snr_db);
    }
    Ok(())
}
