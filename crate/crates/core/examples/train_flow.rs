//! Trains a velocity network on a saved dataset and writes `flow.ckpt`.
//!
//! `cargo run --release --example train_flow -- channels.bin 600`
//! trains for at most 600 seconds. The training log goes to `flow_log.csv`.

use fmchest::channel::load_dataset;
use fmchest::flow::{self, save_flow_model, FlowPathConfig};
use fmchest::nn::{AdamWConfig, NetworkConfig};
use fmchest::train::{write_training_log, TrainConfig};

fn main() -> fmchest::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let data = args.get(1).map_or("channels.bin", String::as_str);
    let budget: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(600.0);
    let ds = load_dataset(data)?;

    let network = NetworkConfig {
        base_channels: 24,
        level_multipliers: vec![1, 2, 2],
        res_blocks_per_level: 1,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 200,
        batch_size: 16,
        flow: FlowPathConfig::new(0.1),
        optimizer: AdamWConfig {
            lr: 2e-3,
            ..Default::default()
        },
        time_budget_s: Some(budget),
        ..Default::default()
    };
    let out = flow::train(&ds, network, &cfg)?;
    for rec in &out.history {
        match rec.train_loss {
            Some(train) => println!(
                "epoch {:>3}  train {train:.4}  val {:.4}  {:.0} s",
                rec.epoch, rec.val_loss, rec.wall_seconds
            ),
            None => println!("epoch   0  val {:.4}", rec.val_loss),
        }
    }
    println!("best epoch {} of {}, {} optimizer steps", out.best_epoch, out.history.len() - 1, out.steps);
    if out.truncated {
        println!("stopped by the {budget} s budget");
    }
    write_training_log("flow_log.csv", &out.history)?;
    save_flow_model("flow.ckpt", &out.model, &cfg.flow)
}
