//! Trains the score-matching baseline briefly on small channels and
//! compares annealed Langevin estimates with least squares.
//!
//! `cargo run --release --example score_baseline`

use fmchest::bench::{run_sweep_with, Estimator, PilotSpec, SweepPlan};
use fmchest::channel::{build_dataset, ChannelModelConfig, SplitSizes, StorageDtype};
use fmchest::nn::{AdamWConfig, NetworkConfig};
use fmchest::score::{dsm_train, LangevinConfig};
use fmchest::train::TrainConfig;

fn main() -> fmchest::Result<()> {
    let mut cfg = ChannelModelConfig::new(8, 16);
    cfg.seed = 9;
    let ds = build_dataset(&cfg, SplitSizes::new(400, 50, 50), StorageDtype::F64)?;
    let net = NetworkConfig {
        base_channels: 16,
        level_multipliers: vec![1, 2],
        res_blocks_per_level: 1,
        ..Default::default()
    };
    let train = TrainConfig {
        epochs: 5,
        batch_size: 16,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let langevin = LangevinConfig {
        n_levels: 100,
        ..Default::default()
    };
    let out = dsm_train(&ds, net, langevin.ladder(), &train)?;
    for r in &out.run.history {
        println!("epoch {:>2} val loss {:.3}", r.epoch, r.val_loss);
    }

    let plan = SweepPlan {
        pilots: PilotSpec { n: 16, t: 16, power: 1.0 },
        snr_db: vec![0.0, 10.0],
        trials: 50,
        seed: 10,
        batch_size: 50,
    };
    let report = run_sweep_with(&plan, &ds.test, &[Estimator::Ls, Estimator::sm(out.model, langevin)])?;
    for r in &report.rows {
        println!("{:<3} SNR {:>4} dB  NMSE {:>7.2} dB  {} evals/sample  {:.2}s", r.estimator, r.snr_db, r.nmse_db, r.steps, r.wall_s);
    }
    Ok(())
}
