//! Refines least-squares estimates with a trained flow model and prints the
//! NMSE after every Euler step.
//!
//! `cargo run --release --example estimate_channel -- channels.bin flow.ckpt`
//! (files from the `generate_dataset` and `train_flow` examples)

use fmchest::bench::NmseAccumulator;
use fmchest::channel::load_dataset;
use fmchest::flow::load_flow_model;
use fmchest::pilot::{ls_estimate, make_pilots, measure, snr_to_sigma, PilotConfig};
use fmchest::sampler::{euler_estimate_batch, SamplerConfig};
use fmchest::Rng;

fn main() -> fmchest::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let data = args.get(1).map_or("channels.bin", String::as_str);
    let ckpt = args.get(2).map_or("flow.ckpt", String::as_str);
    let ds = load_dataset(data)?;
    let (model, path) = load_flow_model(ckpt)?;
    println!("model trained with sigma_tilde {}", path.sigma_tilde);

    let (_, n) = ds.shape();
    let pilots = make_pilots(&PilotConfig::new(n, n, 1.0))?;
    let mut rng = Rng::new(5);
    for snr in [0.0, 10.0, 20.0] {
        let sigma = snr_to_sigma(snr, 1.0);
        let ls = ds
            .test
            .iter()
            .map(|h| ls_estimate(&measure(h, &pilots, sigma, &mut rng)?, 1.0))
            .collect::<fmchest::Result<Vec<_>>>()?;
        let cfg = SamplerConfig {
            steps: 5,
            record_trajectory: true,
            ..Default::default()
        };
        let out = euler_estimate_batch(&model, &ls, &cfg)?;
        let curve: Vec<String> = out
            .trajectory
            .iter()
            .map(|states| {
                let mut acc = NmseAccumulator::default();
                for (e, h) in states.iter().zip(&ds.test) {
                    acc.push(e, h)?;
                }
                Ok(format!("{:.2}", acc.db()))
            })
            .collect::<fmchest::Result<_>>()?;
        println!("SNR {snr:>4} dB  NMSE by step (0 = LS): {}", curve.join("  "));
    }
    Ok(())
}
