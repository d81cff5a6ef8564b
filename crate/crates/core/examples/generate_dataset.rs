//! Simulates a small clustered-channel dataset, saves it and reads it back.
//!
//! `cargo run --release --example generate_dataset -- out.bin`

use fmchest::channel::{build_dataset, load_dataset, save_dataset, ChannelModelConfig, SplitSizes, StorageDtype};

fn main() -> fmchest::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "channels.bin".into());
    let mut cfg = ChannelModelConfig::new(8, 32);
    cfg.seed = 7;
    let ds = build_dataset(&cfg, SplitSizes::new(2000, 200, 200), StorageDtype::F32)?;
    save_dataset(&out, &ds)?;

    let back = load_dataset(&out)?;
    let (m, n) = back.shape();
    println!("{out}: {m}x{n}, {} / {} / {} samples", back.train.len(), back.val.len(), back.test.len());
    println!("mean per-entry power {:.4}", back.mean_entry_power());
    let h = &back.test[0];
    println!("first test channel: top singular value {:.3}, Frobenius norm {:.3}", h.top_singular_value(100), h.frobenius_norm());
    Ok(())
}
