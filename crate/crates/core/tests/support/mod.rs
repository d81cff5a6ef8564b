//! Test-only oracles shared by the integration suites.
#![allow(dead_code)]

pub mod gradcheck;

use fmchest::nn::ParamStore;
use fmchest::Rng;

/// Relative error with an absolute floor: gradients below `floor` are
/// compared on absolute terms, where central differences lose precision.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub const FD_STEP: f64 = 1e-4;
pub const FD_FLOOR: f64 = 1e-6;

/// Indices to probe: all of them when there are at most `count`,
/// otherwise `count` distinct random picks.
pub fn sample_indices(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut idx);
    idx.truncate(count);
    idx
}

/// Max relative error between `analytic` (flat, parameter layout) and
/// central differences of `loss` over sampled parameters.
pub fn check_params(
    store: &mut ParamStore,
    loss: impl Fn(&ParamStore) -> f64,
    analytic: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in sample_indices(store.len(), samples, rng) {
        let orig = store.flat()[i];
        store.flat_mut()[i] = orig + FD_STEP;
        let up = loss(store);
        store.flat_mut()[i] = orig - FD_STEP;
        let down = loss(store);
        store.flat_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric, FD_FLOOR));
    }
    worst
}

/// Same as [`check_params`] for an input vector.
pub fn check_input(
    x: &mut [f64],
    loss: impl Fn(&[f64]) -> f64,
    analytic: &[f64],
    samples: usize,
    rng: &mut Rng,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in sample_indices(x.len(), samples, rng) {
        let orig = x[i];
        x[i] = orig + FD_STEP;
        let up = loss(x);
        x[i] = orig - FD_STEP;
        let down = loss(x);
        x[i] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(analytic[i], numeric, FD_FLOOR));
    }
    worst
}

pub fn randn(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.normal()).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Shift every parameter by Gaussian noise so no gradient path is
/// structurally zero (zero-initialized output conv, unit gammas, ...).
pub fn jitter(store: &mut ParamStore, scale: f64, rng: &mut Rng) {
    for v in store.flat_mut() {
        *v += scale * rng.normal();
    }
}

/// A small network for 8x8 inputs that trains in seconds.
pub fn small_net(seed: u64) -> fmchest::nn::NetworkConfig {
    fmchest::nn::NetworkConfig {
        base_channels: 8,
        level_multipliers: vec![1, 2],
        res_blocks_per_level: 1,
        attention_levels: Vec::new(),
        mid_block: true,
        mid_attention: false,
        time_embed_dim: 16,
        norm_groups: 4,
        seed,
        ..Default::default()
    }
}

/// Clustered channels of the given shape.
pub fn channels(m: usize, n: usize, count: usize, seed: u64) -> Vec<fmchest::ComplexMatrix> {
    let cfg = fmchest::channel::ChannelModelConfig::new(m, n);
    let mut rng = Rng::new(seed);
    (0..count)
        .map(|_| fmchest::channel::generate_channel(&cfg, &mut rng))
        .collect()
}
