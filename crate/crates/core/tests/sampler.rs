//! Euler sampler against closed-form integrals.

mod support;

use std::cell::RefCell;

use fmchest::flow::VelocityField;
use fmchest::nn::UNet;
use fmchest::pilot::{ls_estimate, make_pilots, measure, snr_to_sigma, PilotConfig};
use fmchest::sampler::{estimate_channel, euler_estimate, euler_estimate_batch, ConstantField, SamplerConfig, UpdateRule};
use fmchest::tensor::randn_complex;
use fmchest::{ComplexMatrix, RealTensor, Result, Rng};
use support::{channels, jitter, small_net};

fn max_diff(a: &ComplexMatrix, b: &ComplexMatrix) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

#[test]
fn constant_field_lands_on_the_sum() {
    let mut rng = Rng::new(1);
    let h = randn_complex(&mut rng, 4, 8, 1.0).unwrap();
    let v = randn_complex(&mut rng, 4, 8, 0.5).unwrap();
    let want = h.add(&v).unwrap();
    for s in [1, 2, 5, 20] {
        let got = euler_estimate(&ConstantField::new(&v), &h, &SamplerConfig::new(s)).unwrap();
        assert!(max_diff(&got, &want) < 1e-12, "S={s}");
    }
}

#[test]
fn step_scaled_rule_multiplies_by_step_index() {
    let mut rng = Rng::new(2);
    let h = randn_complex(&mut rng, 2, 4, 1.0).unwrap();
    let v = randn_complex(&mut rng, 2, 4, 1.0).unwrap();
    for s in [1, 2, 5] {
        let cfg = SamplerConfig {
            steps: s,
            update_rule: UpdateRule::StepScaled,
            record_trajectory: false,
        };
        let got = euler_estimate(&ConstantField::new(&v), &h, &cfg).unwrap();
        // sum of s/S over s = 1..S
        let want = h.add(&v.scale((s + 1) as f64 / 2.0)).unwrap();
        assert!(max_diff(&got, &want) < 1e-12, "S={s}");
    }
}

/// `u(x, t) = -x`; explicit Euler multiplies by `(1 - dt)` per step.
struct Decay;

impl VelocityField for Decay {
    fn velocity_batch(&self, x: &RealTensor, _t: &[f64]) -> Result<RealTensor> {
        RealTensor::new(x.shape().to_vec(), x.data().iter().map(|v| -v).collect())
    }
}

#[test]
fn linear_field_matches_closed_form() {
    let h = randn_complex(&mut Rng::new(3), 3, 3, 1.0).unwrap();
    for s in [1, 3, 10] {
        let got = euler_estimate(&Decay, &h, &SamplerConfig::new(s)).unwrap();
        let want = h.scale((1.0 - 1.0 / s as f64).powi(s as i32));
        assert!(max_diff(&got, &want) < 1e-12, "S={s}");
    }
}

/// Records the times it is queried at and returns `t` everywhere.
struct Clock(RefCell<Vec<f64>>);

impl VelocityField for Clock {
    fn velocity_batch(&self, x: &RealTensor, t: &[f64]) -> Result<RealTensor> {
        self.0.borrow_mut().push(t[0]);
        RealTensor::new(x.shape().to_vec(), vec![t[0]; x.len()])
    }
}

#[test]
fn evaluation_times_are_left_endpoints() {
    let h = ComplexMatrix::zeros(2, 2);
    let clock = Clock(RefCell::new(Vec::new()));
    let out = euler_estimate(&clock, &h, &SamplerConfig::new(4)).unwrap();
    assert_eq!(*clock.0.borrow(), vec![0.0, 0.25, 0.5, 0.75]);
    // dt * (0 + 1/4 + 1/2 + 3/4) on the real part
    assert!((out.get(0, 0).re - 0.375).abs() < 1e-15);

    let clock = Clock(RefCell::new(Vec::new()));
    euler_estimate(&clock, &h, &SamplerConfig::new(1)).unwrap();
    assert_eq!(*clock.0.borrow(), vec![0.0]);
}

#[test]
fn single_step_is_one_network_call() {
    let mut rng = Rng::new(4);
    let mut net = UNet::new(small_net(5)).unwrap();
    jitter(net.params_mut(), 0.05, &mut rng);
    let h = randn_complex(&mut rng, 8, 8, 1.0).unwrap();
    let got = euler_estimate(&net, &h, &SamplerConfig::new(1)).unwrap();
    let want = h.add(&net.velocity(&h, 0.0).unwrap()).unwrap();
    assert!(max_diff(&got, &want) < 1e-12);
}

#[test]
fn untrained_network_returns_least_squares() {
    let net = UNet::new(small_net(6)).unwrap();
    let p = make_pilots(&PilotConfig::new(8, 8, 1.0)).unwrap();
    let h = &channels(8, 8, 1, 7)[0];
    let meas = measure(h, &p, snr_to_sigma(10.0, 1.0), &mut Rng::new(8)).unwrap();
    let ls = ls_estimate(&meas, 1.0).unwrap();
    for s in [1, 5, 20] {
        let got = estimate_channel(&net, &meas, 1.0, &SamplerConfig::new(s)).unwrap();
        assert_eq!(got, ls, "S={s}");
    }
}

#[test]
fn batch_and_single_runs_agree_and_repeat() {
    let mut rng = Rng::new(9);
    let mut net = UNet::new(small_net(10)).unwrap();
    jitter(net.params_mut(), 0.05, &mut rng);
    let inits: Vec<ComplexMatrix> = (0..3).map(|_| randn_complex(&mut rng, 8, 8, 1.0).unwrap()).collect();
    let cfg = SamplerConfig {
        steps: 5,
        record_trajectory: true,
        ..Default::default()
    };
    let a = euler_estimate_batch(&net, &inits, &cfg).unwrap();
    let b = euler_estimate_batch(&net, &inits, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.evaluations, 5);
    assert_eq!(a.trajectory.len(), 6);
    assert_eq!(a.trajectory[0], inits);
    assert_eq!(a.trajectory[5], a.estimates);
    for (h, est) in inits.iter().zip(&a.estimates) {
        let single = euler_estimate(&net, h, &SamplerConfig::new(5)).unwrap();
        assert!(max_diff(&single, est) < 1e-10);
    }
}

#[test]
fn zero_steps_rejected() {
    let h = ComplexMatrix::zeros(2, 2);
    assert!(euler_estimate(&ConstantField::new(&h), &h, &SamplerConfig::new(0)).is_err());
}
