//! Total sampling time of Euler integration at several step counts against
//! annealed Langevin dynamics on the same backbone. Weights do not affect
//! the cost, so untrained networks are used.
//!
//! `cargo run --release --example sampling_time`

use fmchest::bench::{linear_fit, timing, Estimator, PilotSpec};
use fmchest::channel::{generate_channel, ChannelModelConfig};
use fmchest::nn::{NetworkConfig, UNet};
use fmchest::score::{LangevinConfig, ScoreModel};
use fmchest::Rng;

fn main() -> fmchest::Result<()> {
    let cfg = ChannelModelConfig::new(8, 32);
    let mut rng = Rng::new(3);
    let test: Vec<_> = (0..20).map(|_| generate_channel(&cfg, &mut rng)).collect();
    let net = NetworkConfig {
        base_channels: 16,
        level_multipliers: vec![1, 2],
        res_blocks_per_level: 1,
        ..Default::default()
    };
    let fm = UNet::new(net.clone())?;
    let langevin = LangevinConfig::default();
    let sm = ScoreModel::new(UNet::new(net)?, langevin.ladder())?;

    let steps = [1, 5, 20, 100];
    let mut estimators: Vec<Estimator> = steps.iter().map(|&s| Estimator::fm(fm.clone(), s)).collect();
    estimators.push(Estimator::sm(sm, langevin));
    let pilots = PilotSpec { n: 32, t: 32, power: 1.0 };
    let rows = timing(&test, pilots, 10.0, &estimators, 20, 4)?;

    println!("{:<6} {:>6} {:>12} {:>10}", "method", "steps", "evals/sample", "total s");
    for r in &rows {
        println!("{:<6} {:>6} {:>12} {:>10.3}", r.method, r.steps, r.evals_per_sample, r.total_s);
    }
    let x: Vec<f64> = steps.iter().map(|&s| s as f64).collect();
    let y: Vec<f64> = rows[..steps.len()].iter().map(|r| r.total_s).collect();
    let (slope, _, r2) = linear_fit(&x, &y)?;
    println!("flow time per step {:.4} s (r^2 {r2:.3})", slope);
    println!("Langevin / flow S=5: {:.1}x", rows[4].total_s / rows[1].total_s);
    Ok(())
}
