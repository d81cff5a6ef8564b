//! Finite-difference gradient checks shared by the gradient suite and the
//! acceptance run. Each check reports the worst relative error over sampled
//! parameters and inputs instead of asserting.

use fmchest::flow::{cfm_loss_at, cfm_loss_value, corrupt};
use fmchest::nn::layers::{Activation, AttnBlock, Conv2d, FeatureMap, GroupNorm, Linear, ResBlock, Upsample};
use fmchest::nn::{NetworkConfig, ParamStore, UNet};
use fmchest::tensor::randn_complex;
use fmchest::{ComplexMatrix, RealTensor, Rng};

use super::{check_input, check_params, dot, jitter, randn};

pub const TOL: f64 = 1e-4;
pub const SAMPLES: usize = 100;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub param_err: f64,
    pub input_err: f64,
}

impl Check {
    fn new(name: impl Into<String>, (param_err, input_err): (f64, f64)) -> Self {
        Self {
            name: name.into(),
            param_err,
            input_err,
        }
    }

    pub fn worst(&self) -> f64 {
        self.param_err.max(self.input_err)
    }
}

fn fmap(rng: &mut Rng, c: usize, b: usize, h: usize, w: usize) -> FeatureMap {
    FeatureMap {
        channels: c,
        batch: b,
        height: h,
        width: w,
        data: randn(rng, c * b * h * w, 1.0),
    }
}

/// Parameter and input errors of `backward` under the loss
/// `sum(weights * forward(x))`.
fn check_layer(
    store: &mut ParamStore,
    x: &FeatureMap,
    forward: impl Fn(&ParamStore, &FeatureMap) -> FeatureMap,
    backward: impl Fn(&ParamStore, &FeatureMap, &FeatureMap, &mut fmchest::nn::Grads) -> FeatureMap,
    rng: &mut Rng,
) -> (f64, f64) {
    let y = forward(store, x);
    let weights = randn(rng, y.data.len(), 1.0);
    let dy = y.like(weights.clone());
    let mut grads = store.zeros_like();
    let dx = backward(store, x, &dy, &mut grads);

    let param_err = check_params(store, |s| dot(&forward(s, x).data, &weights), grads.flat(), SAMPLES, rng);
    let mut xin = x.data.clone();
    let input_err = check_input(
        &mut xin,
        |v| dot(&forward(store, &x.like(v.to_vec())).data, &weights),
        &dx.data,
        SAMPLES,
        rng,
    );
    (param_err, input_err)
}

pub fn conv_variants() -> Vec<Check> {
    let mut out = Vec::new();
    for (k, s, p) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let mut rng = Rng::new(10 + k as u64 + s as u64);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, &mut rng, "c", 3, 4, k, s, p, false);
        jitter(&mut store, 0.1, &mut rng);
        let x = fmap(&mut rng, 3, 2, 8, 8);
        let r = check_layer(
            &mut store,
            &x,
            |st, x| conv.forward(st, x),
            |st, x, dy, g| conv.backward(st, x, dy, g),
            &mut rng,
        );
        out.push(Check::new(format!("conv k{k} s{s}"), r));
    }
    out
}

pub fn group_norm() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(20);
    let mut store = ParamStore::new();
    let gn = GroupNorm::new(&mut store, &mut rng, "gn", 4, 2);
    jitter(&mut store, 0.3, &mut rng);
    let x = fmap(&mut rng, 4, 2, 8, 8);
    let r = check_layer(
        &mut store,
        &x,
        |st, x| gn.forward(st, x).0,
        |st, x, dy, g| {
            let (_, cache) = gn.forward(st, x);
            gn.backward(st, &cache, dy, g)
        },
        &mut rng,
    );
    out.push(Check::new("group norm", r));
    out
}

pub fn silu() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(21);
    let mut store = ParamStore::new();
    let x = fmap(&mut rng, 2, 2, 8, 8);
    let act = Activation::Silu;
    let r = check_layer(
        &mut store,
        &x,
        |_, x| x.like(act.apply(&x.data)),
        |_, x, dy, _| x.like(act.backward(&x.data, &dy.data)),
        &mut rng,
    );
    out.push(Check::new("silu", (0.0, r.1)));
    out
}

pub fn linear() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(22);
    let mut store = ParamStore::new();
    let lin = Linear::new(&mut store, &mut rng, "lin", 6, 5);
    jitter(&mut store, 0.1, &mut rng);
    let rows = 3;
    let x = randn(&mut rng, rows * 6, 1.0);
    let weights = randn(&mut rng, rows * 5, 1.0);
    let mut grads = store.zeros_like();
    let dx = lin.backward(&store, &x, &weights, rows, &mut grads);
    let p = check_params(&mut store, |s| dot(&lin.forward(s, &x, rows), &weights), grads.flat(), SAMPLES, &mut rng);
    let mut xin = x.clone();
    let i = check_input(&mut xin, |v| dot(&lin.forward(&store, v, rows), &weights), &dx, SAMPLES, &mut rng);
    out.push(Check::new("linear", (p, i)));
    out
}

pub fn residual_blocks() -> Vec<Check> {
    let mut out = Vec::new();
    for (cin, cout) in [(4, 4), (4, 8)] {
        let mut rng = Rng::new(30 + cout as u64);
        let mut store = ParamStore::new();
        let block = ResBlock::new(&mut store, &mut rng, "rb", cin, cout, 6, 2, Activation::Silu);
        jitter(&mut store, 0.1, &mut rng);
        let x = fmap(&mut rng, cin, 2, 8, 8);
        let temb = randn(&mut rng, 2 * 6, 1.0);
        let r = check_layer(
            &mut store,
            &x,
            |st, x| block.forward(st, x, &temb).0,
            |st, x, dy, g| {
                let (_, cache) = block.forward(st, x, &temb);
                let mut dt = vec![0.0; temb.len()];
                block.backward(st, &cache, &temb, dy, g, &mut dt)
            },
            &mut rng,
        );
        out.push(Check::new(format!("resblock {cin}->{cout}"), r));

        // gradient with respect to the time embedding itself
        let (y, cache) = block.forward(&store, &x, &temb);
        let weights = randn(&mut rng, y.data.len(), 1.0);
        let mut grads = store.zeros_like();
        let mut dt = vec![0.0; temb.len()];
        block.backward(&store, &cache, &temb, &y.like(weights.clone()), &mut grads, &mut dt);
        let mut tin = temb.clone();
        let e = check_input(
            &mut tin,
            |v| dot(&block.forward(&store, &x, v).0.data, &weights),
            &dt,
            SAMPLES,
            &mut rng,
        );
        out.push(Check::new(format!("resblock {cin}->{cout} time embedding"), (0.0, e)));
    }
    out
}

pub fn attention() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(40);
    let mut store = ParamStore::new();
    let block = AttnBlock::new(&mut store, &mut rng, "attn", 4, 2);
    jitter(&mut store, 0.2, &mut rng);
    let x = fmap(&mut rng, 4, 2, 4, 4);
    let r = check_layer(
        &mut store,
        &x,
        |st, x| block.forward(st, x).0,
        |st, x, dy, g| {
            let (_, cache) = block.forward(st, x);
            block.backward(st, &cache, dy, g)
        },
        &mut rng,
    );
    out.push(Check::new("attention", r));
    out
}

pub fn upsample() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(50);
    let mut store = ParamStore::new();
    let up = Upsample::new(&mut store, &mut rng, "up", 3);
    jitter(&mut store, 0.1, &mut rng);
    let x = fmap(&mut rng, 3, 2, 4, 4);
    let r = check_layer(
        &mut store,
        &x,
        |st, x| up.forward(st, x).0,
        |st, x, dy, g| {
            let (_, u) = up.forward(st, x);
            up.backward(st, &u, dy, g)
        },
        &mut rng,
    );
    out.push(Check::new("upsample", r));
    out
}

pub fn net_config() -> NetworkConfig {
    NetworkConfig {
        base_channels: 4,
        level_multipliers: vec![1, 2],
        res_blocks_per_level: 1,
        attention_levels: vec![1],
        mid_block: true,
        mid_attention: true,
        time_embed_dim: 8,
        norm_groups: 2,
        activation: Activation::Silu,
        seed: 3,
    }
}

pub fn whole_network() -> Vec<Check> {
    let mut out = Vec::new();
    let mut rng = Rng::new(60);
    let mut net = UNet::new(net_config()).unwrap();
    jitter(net.params_mut(), 0.1, &mut rng);
    let b = 2;
    let x = RealTensor::new(vec![b, 2, 8, 8], randn(&mut rng, b * 128, 1.0)).unwrap();
    let t = [0.3, 0.8];
    let weights = randn(&mut rng, b * 128, 1.0);
    let (_, tape) = net.forward_tape(&x, &t).unwrap();
    let dy = RealTensor::new(vec![b, 2, 8, 8], weights.clone()).unwrap();
    let (grads, dx) = net.backward_tape(&tape, &dy).unwrap();

    let mut store = net.params().clone();
    let probe = net.clone();
    let loss = |s: &ParamStore| {
        let mut n = probe.clone();
        n.params_mut().load_flat(s.flat()).unwrap();
        dot(n.forward_batch(&x, &t).unwrap().data(), &weights)
    };
    let p = check_params(&mut store, loss, grads.flat(), SAMPLES, &mut rng);

    let mut xin = x.data().to_vec();
    let i = check_input(
        &mut xin,
        |v| {
            let xv = RealTensor::new(vec![b, 2, 8, 8], v.to_vec()).unwrap();
            dot(net.forward_batch(&xv, &t).unwrap().data(), &weights)
        },
        dx.data(),
        SAMPLES,
        &mut rng,
    );
    out.push(Check::new("unet", (p, i)));
    out
}


/// The whole CFM loss: corruption, path point, network and squared error,
/// differentiated with respect to the network parameters and compared with
/// differences of the loss value on a batch of two 8x8 channels.
pub fn cfm_pipeline() -> Vec<Check> {
    let mut rng = Rng::new(80);
    let mut net = UNet::new(net_config()).unwrap();
    jitter(net.params_mut(), 0.1, &mut rng);
    let batch: Vec<(ComplexMatrix, ComplexMatrix)> = (0..2)
        .map(|_| {
            let h1 = randn_complex(&mut rng, 8, 8, 1.0).unwrap();
            (corrupt(&h1, 0.1, &mut rng).unwrap().0, h1)
        })
        .collect();
    let ts = [0.25, 0.7];
    let (_, grads) = cfm_loss_at(&net, &batch, &ts, 0.0).unwrap();
    let mut store = net.params().clone();
    let probe = net.clone();
    let loss = |s: &ParamStore| {
        let mut n = probe.clone();
        n.params_mut().load_flat(s.flat()).unwrap();
        cfm_loss_value(&n, &batch, &ts, 0.0).unwrap()
    };
    let p = check_params(&mut store, loss, grads.flat(), SAMPLES, &mut rng);
    vec![Check::new("cfm loss", (p, 0.0))]
}

pub fn all() -> Vec<Check> {
    [
        conv_variants(),
        group_norm(),
        silu(),
        linear(),
        residual_blocks(),
        attention(),
        upsample(),
        whole_network(),
        cfm_pipeline(),
    ]
    .concat()
}
