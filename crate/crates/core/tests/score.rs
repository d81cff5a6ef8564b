//! Score-matching baseline: loss floors, analytic scores and Langevin sampling.

mod support;

use std::cell::Cell;

use fmchest::nn::{AdamWConfig, AdamWState, ParamStore, UNet};
use fmchest::score::{
    annealed_langevin_batch, dsm_loss, dsm_loss_at, dsm_loss_value, dsm_train, LangevinConfig, NoiseLadder,
    ScoreField, ScoreModel,
};
use fmchest::channel::{build_dataset, ChannelModelConfig, SplitSizes, StorageDtype};
use fmchest::tensor::complex_to_tensor;
use fmchest::train::TrainConfig;
use fmchest::{ComplexMatrix, Error, RealTensor, Result, Rng};
use num_complex::Complex64;
use support::{channels, check_params, jitter, small_net};

fn ladder() -> NoiseLadder {
    NoiseLadder {
        sigma_max: 1.0,
        sigma_min: 0.01,
        levels: 500,
    }
}

/// Exact score of `N(mu, var)` per real coordinate after adding `N(0, sigma^2)`.
struct GaussianScore {
    mu: f64,
    var: f64,
}

impl ScoreField for GaussianScore {
    fn score_batch(&self, x: &RealTensor, sigma: &[f64]) -> Result<RealTensor> {
        let per = x.len() / sigma.len();
        let mut out = Vec::with_capacity(x.len());
        for (chunk, s) in x.data().chunks(per).zip(sigma) {
            out.extend(chunk.iter().map(|v| -(v - self.mu) / (self.var + s * s)));
        }
        RealTensor::new(x.shape().to_vec(), out)
    }
}

#[test]
fn langevin_recovers_a_gaussian() {
    let (mu, var) = (0.5, 0.64);
    let chains = 10_000;
    let init = vec![ComplexMatrix::new(1, 1, vec![Complex64::new(3.0, -3.0)]).unwrap(); chains];
    let cfg = LangevinConfig::default();
    let out = annealed_langevin_batch(&GaussianScore { mu, var }, &init, &cfg, &mut Rng::new(1)).unwrap();
    for part in [|z: &Complex64| z.re, |z: &Complex64| z.im] {
        let xs: Vec<f64> = out.estimates.iter().map(|h| part(&h.get(0, 0))).collect();
        let mean = xs.iter().sum::<f64>() / chains as f64;
        let v = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (chains - 1) as f64;
        assert!((mean / mu - 1.0).abs() < 0.05, "mean {mean}");
        assert!((v / var - 1.0).abs() < 0.05, "variance {v}");
    }
}

struct Counter(Cell<usize>);

impl ScoreField for Counter {
    fn score_batch(&self, x: &RealTensor, _sigma: &[f64]) -> Result<RealTensor> {
        self.0.set(self.0.get() + 1);
        Ok(RealTensor::zeros(x.shape().to_vec()))
    }
}

#[test]
fn evaluation_count_is_levels_times_updates() {
    let h = vec![ComplexMatrix::zeros(2, 2); 3];
    for (k, l) in [(1, 1), (7, 3), (50, 2)] {
        let cfg = LangevinConfig {
            n_levels: k,
            steps_per_level: l,
            ..Default::default()
        };
        let counter = Counter(Cell::new(0));
        let out = annealed_langevin_batch(&counter, &h, &cfg, &mut Rng::new(2)).unwrap();
        assert_eq!(counter.0.get(), k * l);
        assert_eq!(out.evaluations, k * l);
        assert_eq!(cfg.evaluations(), k * l);
    }
    assert_eq!(LangevinConfig::full_scale().evaluations(), 2311 * 3);
}

#[test]
fn untrained_loss_is_the_noise_energy() {
    let model = ScoreModel::new(UNet::new(small_net(3)).unwrap(), ladder()).unwrap();
    let data = channels(8, 8, 400, 4);
    let mut rng = Rng::new(5);
    let mut total = 0.0;
    for chunk in data.chunks(50) {
        total += dsm_loss(&model, chunk, &mut rng).unwrap().0 * chunk.len() as f64;
    }
    let mean = total / 400.0;
    let floor = 2.0 * 64.0;
    assert!((mean / floor - 1.0).abs() < 0.05, "{mean} vs {floor}");
}

/// Knows the clean sample, so its score is exact for the perturbation kernel.
struct KernelScore(Vec<ComplexMatrix>);

impl ScoreField for KernelScore {
    fn score_batch(&self, x: &RealTensor, sigma: &[f64]) -> Result<RealTensor> {
        let per = x.len() / sigma.len();
        let mut out = Vec::with_capacity(x.len());
        for ((chunk, s), h) in x.data().chunks(per).zip(sigma).zip(&self.0) {
            let h = complex_to_tensor(h);
            out.extend(chunk.iter().zip(h.data()).map(|(v, c)| -(v - c) / (s * s)));
        }
        RealTensor::new(x.shape().to_vec(), out)
    }
}

#[test]
fn kernel_score_has_zero_loss() {
    let data = channels(4, 8, 5, 6);
    let sigmas = [1.0, 0.3, 0.1, 0.03, 0.01];
    let loss = dsm_loss_value(&KernelScore(data.clone()), &ladder(), &data, &sigmas, &mut Rng::new(7)).unwrap();
    assert!(loss < 1e-18, "{loss}");
}

#[test]
fn loss_value_and_gradient_agree() {
    let mut rng = Rng::new(8);
    let mut net = UNet::new(small_net(9)).unwrap();
    jitter(net.params_mut(), 0.05, &mut rng);
    let model = ScoreModel::new(net, ladder()).unwrap();
    let data = channels(8, 8, 3, 10);
    let sigmas = [0.02, 0.2, 0.9];
    let (loss, grads) = dsm_loss_at(&model, &data, &sigmas, &mut Rng::new(11)).unwrap();
    let value = dsm_loss_value(&model, &ladder(), &data, &sigmas, &mut Rng::new(11)).unwrap();
    assert!((loss - value).abs() < 1e-10 * value, "{loss} vs {value}");

    let mut store = model.net.params().clone();
    let f = |s: &ParamStore| {
        let mut m = model.clone();
        m.net.params_mut().load_flat(s.flat()).unwrap();
        dsm_loss_value(&m, &ladder(), &data, &sigmas, &mut Rng::new(11)).unwrap()
    };
    let worst = check_params(&mut store, f, grads.flat(), 60, &mut rng);
    assert!(worst < 1e-4, "{worst}");
}

/// Overfit sanity run: 16 samples, noise levels and draws frozen.
#[test]
fn adamw_overfits_a_frozen_toy_set() {
    let mut model = ScoreModel::new(UNet::new(small_net(12)).unwrap(), ladder()).unwrap();
    let data = channels(8, 8, 16, 13);
    let sigmas: Vec<f64> = (0..16).map(|i| 0.01 * 100f64.powf(i as f64 / 15.0)).collect();
    let mut opt = AdamWState::new(
        AdamWConfig {
            lr: 3e-3,
            ..Default::default()
        },
        model.net.param_count(),
    );
    let first = dsm_loss_at(&model, &data, &sigmas, &mut Rng::new(14)).unwrap().0;
    for _ in 0..200 {
        let (_, g) = dsm_loss_at(&model, &data, &sigmas, &mut Rng::new(14)).unwrap();
        opt.step(model.net.params_mut().flat_mut(), g.flat()).unwrap();
    }
    let last = dsm_loss_at(&model, &data, &sigmas, &mut Rng::new(14)).unwrap().0;
    assert!(last <= 0.5 * first, "{first} -> {last}");
}

fn toy_dataset() -> fmchest::channel::ChannelDataset {
    let mut cfg = ChannelModelConfig::new(8, 8);
    cfg.seed = 15;
    build_dataset(&cfg, SplitSizes::new(16, 8, 4), StorageDtype::F64).unwrap()
}

#[test]
fn training_keeps_the_ladder_and_best_model() {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..Default::default()
    };
    let out = dsm_train(&toy_dataset(), small_net(16), ladder(), &cfg).unwrap();
    assert_eq!(out.model.ladder, ladder());
    assert_eq!(out.run.history.len(), 4);
    assert!(out.run.best_val_loss() <= out.run.history[0].val_loss);
    assert_eq!(out.model.net.params().flat(), out.run.model.params().flat());
}

#[test]
fn divergent_training_is_reported() {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 4,
        optimizer: AdamWConfig {
            lr: 1e200,
            ..Default::default()
        },
        ..Default::default()
    };
    match dsm_train(&toy_dataset(), small_net(17), ladder(), &cfg) {
        Err(Error::Training { loss, .. }) => assert!(!loss.is_finite()),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn conditioning_spans_unit_interval() {
    let l = ladder();
    let s = l.sigmas();
    assert_eq!(s.len(), 500);
    assert!((s[0] - 1.0).abs() < 1e-15 && (s[499] - 0.01).abs() < 1e-15);
    assert!((l.condition(1.0)).abs() < 1e-15);
    assert!((l.condition(0.01) - 1.0).abs() < 1e-15);
    assert!((l.condition(0.1) - 0.5).abs() < 1e-12);
    // consecutive ratios are constant
    let r0 = s[1] / s[0];
    assert!(s.windows(2).all(|w| (w[1] / w[0] - r0).abs() < 1e-12));
}
