//! Network layers with explicit forward caches and hand-written backward
//! passes.
//!
//! Activations are stored channel-major as `[C, B, H, W]`, so a convolution
//! over the whole batch is a single `W (O x CKK) * cols (CKK x BHW)` product
//! and channel concatenation is plain vector concatenation. Every `backward`
//! accumulates parameter gradients into a [`Grads`] buffer and returns the
//! gradient with respect to the layer input.

use std::borrow::Cow;

use serde::{Deserialize, Serialize};

use super::params::{Grads, Init, ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{RealTensor, Rng};

/// `C = A * B + beta * C` for strided row/column-major operands.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "gemm: A out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "gemm: B out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "gemm: C out of bounds");
    // SAFETY: every index touched by the kernel is bounded by the asserts above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Contiguous row-major product; `ta`/`tb` mean the operand is stored
/// transposed (`k x m` for A, `n x k` for B).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
    let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
    gemm_strided(m, k, n, a, rsa, csa, b, rsb, csb, beta, c, n, 1);
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Channel-major batch of feature maps, `[C, B, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    /// Same dimensions, new values.
    pub fn like(&self, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), self.data.len());
        self.with_channels(self.channels, data)
    }

    pub fn with_channels(&self, channels: usize, data: Vec<f64>) -> Self {
        Self {
            channels,
            batch: self.batch,
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn hw(&self) -> usize {
        self.height * self.width
    }

    /// Elements per channel (`B * H * W`).
    pub fn plane(&self) -> usize {
        self.batch * self.hw()
    }

    /// Convert a `[B, C, H, W]` tensor.
    pub fn from_batch(x: &RealTensor) -> Result<Self> {
        let &[b, c, h, w] = x.shape() else {
            return Err(Error::Dimension(format!(
                "expected a [B, C, H, W] tensor, got {:?}",
                x.shape()
            )));
        };
        let hw = h * w;
        let mut data = vec![0.0; x.len()];
        let src = x.data();
        for bi in 0..b {
            for ci in 0..c {
                let s = (bi * c + ci) * hw;
                let d = (ci * b + bi) * hw;
                data[d..d + hw].copy_from_slice(&src[s..s + hw]);
            }
        }
        Ok(Self {
            channels: c,
            batch: b,
            height: h,
            width: w,
            data,
        })
    }

    /// Back to `[B, C, H, W]`.
    pub fn to_batch(&self) -> RealTensor {
        let (b, c, hw) = (self.batch, self.channels, self.hw());
        let mut data = vec![0.0; self.data.len()];
        for bi in 0..b {
            for ci in 0..c {
                let s = (ci * b + bi) * hw;
                let d = (bi * c + ci) * hw;
                data[d..d + hw].copy_from_slice(&self.data[s..s + hw]);
            }
        }
        RealTensor::from_parts(vec![b, c, self.height, self.width], data)
    }

    pub fn concat(&self, other: &Self) -> Self {
        assert_eq!(
            (self.batch, self.height, self.width),
            (other.batch, other.height, other.width),
            "concat: spatial/batch mismatch"
        );
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        self.with_channels(self.channels + other.channels, data)
    }

    /// Split after the first `channels` channels.
    pub fn split(&self, channels: usize) -> (Self, Self) {
        let cut = channels * self.plane();
        (
            self.with_channels(channels, self.data[..cut].to_vec()),
            self.with_channels(self.channels - channels, self.data[cut..].to_vec()),
        )
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.data.len(), other.data.len());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

impl Activation {
    pub fn apply(self, x: &[f64]) -> Vec<f64> {
        match self {
            Activation::Silu => x.iter().map(|&v| v * sigmoid(v)).collect(),
            Activation::Identity => x.to_vec(),
        }
    }

    /// Gradient with respect to the pre-activation `x`.
    pub fn backward(self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        match self {
            Activation::Silu => x
                .iter()
                .zip(dy)
                .map(|(&v, &g)| {
                    let s = sigmoid(v);
                    g * s * (1.0 + v * (1.0 - s))
                })
                .collect(),
            Activation::Identity => dy.to_vec(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        zero_init: bool,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let init = if zero_init {
            Init::Zeros
        } else {
            Init::Normal(1.0 / fan_in.sqrt())
        };
        let weight = store.add(
            format!("{name}.weight"),
            vec![out_channels, in_channels, kernel, kernel],
            init,
            rng,
        );
        let bias = store.add(format!("{name}.bias"), vec![out_channels], Init::Zeros, rng);
        Self {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        }
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |d: usize| (d + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn im2col<'a>(&self, x: &'a FeatureMap) -> Cow<'a, [f64]> {
        if self.is_pointwise() {
            return Cow::Borrowed(&x.data);
        }
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (x.height, x.width);
        let (ho, wo) = self.output_dims(h, w);
        let n = x.batch * ho * wo;
        let mut cols = vec![0.0; x.channels * k * k * n];
        for c in 0..x.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * n;
                    for b in 0..x.batch {
                        let src = (c * x.batch + b) * h * w;
                        for oh in 0..ho {
                            let ih = (oh * s + ki) as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let dst = row + (b * ho + oh) * wo;
                            let srow = src + ih as usize * w;
                            for ow in 0..wo {
                                let iw = (ow * s + kj) as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    cols[dst + ow] = x.data[srow + iw as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Cow::Owned(cols)
    }

    fn col2im(&self, cols: &[f64], x: &FeatureMap) -> Vec<f64> {
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let (h, w) = (x.height, x.width);
        let (ho, wo) = self.output_dims(h, w);
        let n = x.batch * ho * wo;
        let mut dx = vec![0.0; x.data.len()];
        for c in 0..x.channels {
            for ki in 0..k {
                for kj in 0..k {
                    let row = ((c * k + ki) * k + kj) * n;
                    for b in 0..x.batch {
                        let dst = (c * x.batch + b) * h * w;
                        for oh in 0..ho {
                            let ih = (oh * s + ki) as isize - p;
                            if ih < 0 || ih >= h as isize {
                                continue;
                            }
                            let src = row + (b * ho + oh) * wo;
                            let drow = dst + ih as usize * w;
                            for ow in 0..wo {
                                let iw = (ow * s + kj) as isize - p;
                                if iw >= 0 && iw < w as isize {
                                    dx[drow + iw as usize] += cols[src + ow];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> FeatureMap {
        assert_eq!(x.channels, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_dims(x.height, x.width);
        let n = x.batch * ho * wo;
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x);
        let bias = store.get(self.bias);
        let mut out = vec![0.0; self.out_channels * n];
        for (o, row) in out.chunks_mut(n).enumerate() {
            row.fill(bias[o]);
        }
        gemm(self.out_channels, kk, n, store.get(self.weight), false, &cols, false, 1.0, &mut out);
        FeatureMap {
            channels: self.out_channels,
            batch: x.batch,
            height: ho,
            width: wo,
            data: out,
        }
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &FeatureMap,
        dy: &FeatureMap,
        grads: &mut Grads,
    ) -> FeatureMap {
        let n = dy.plane();
        let kk = self.in_channels * self.kernel * self.kernel;
        let cols = self.im2col(x);
        gemm(self.out_channels, n, kk, &dy.data, false, &cols, true, 1.0, grads.get_mut(store, self.weight));
        let db = grads.get_mut(store, self.bias);
        for (o, row) in dy.data.chunks(n).enumerate() {
            db[o] += row.iter().sum::<f64>();
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.out_channels, n, store.get(self.weight), true, &dy.data, false, 0.0, &mut dcols);
        let dx = if self.is_pointwise() {
            dcols
        } else {
            self.col2im(&dcols, x)
        };
        x.like(dx)
    }
}

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
    pub groups: usize,
    pub eps: f64,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, groups: usize) -> Self {
        assert!(groups > 0 && channels % groups == 0, "{channels} channels not divisible into {groups} groups");
        Self {
            gamma: store.add(format!("{name}.gamma"), vec![channels], Init::Ones, rng),
            beta: store.add(format!("{name}.beta"), vec![channels], Init::Zeros, rng),
            channels,
            groups,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> (FeatureMap, GroupNormCache) {
        let (hw, plane, cg) = (x.hw(), x.plane(), self.channels / self.groups);
        let count = (cg * hw) as f64;
        let gamma = store.get(self.gamma);
        let beta = store.get(self.beta);
        let mut xhat = vec![0.0; x.data.len()];
        let mut out = vec![0.0; x.data.len()];
        let mut inv_std = vec![0.0; x.batch * self.groups];
        for b in 0..x.batch {
            for g in 0..self.groups {
                let chans = g * cg..(g + 1) * cg;
                let at = |c: usize| c * plane + b * hw;
                let mut mean = 0.0;
                for c in chans.clone() {
                    mean += x.data[at(c)..at(c) + hw].iter().sum::<f64>();
                }
                mean /= count;
                let mut var = 0.0;
                for c in chans.clone() {
                    var += x.data[at(c)..at(c) + hw]
                        .iter()
                        .map(|v| (v - mean) * (v - mean))
                        .sum::<f64>();
                }
                var /= count;
                let is = 1.0 / (var + self.eps).sqrt();
                inv_std[b * self.groups + g] = is;
                for c in chans {
                    for i in at(c)..at(c) + hw {
                        let xh = (x.data[i] - mean) * is;
                        xhat[i] = xh;
                        out[i] = xh * gamma[c] + beta[c];
                    }
                }
            }
        }
        (x.like(out), GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &GroupNormCache,
        dy: &FeatureMap,
        grads: &mut Grads,
    ) -> FeatureMap {
        let (hw, plane, cg) = (dy.hw(), dy.plane(), self.channels / self.groups);
        let count = (cg * hw) as f64;
        let gamma = store.get(self.gamma).to_vec();
        {
            let dgamma = grads.get_mut(store, self.gamma);
            for c in 0..self.channels {
                let s = c * plane;
                dgamma[c] += dy.data[s..s + plane]
                    .iter()
                    .zip(&cache.xhat[s..s + plane])
                    .map(|(g, x)| g * x)
                    .sum::<f64>();
            }
        }
        {
            let dbeta = grads.get_mut(store, self.beta);
            for c in 0..self.channels {
                let s = c * plane;
                dbeta[c] += dy.data[s..s + plane].iter().sum::<f64>();
            }
        }
        let mut dx = vec![0.0; dy.data.len()];
        for b in 0..dy.batch {
            for g in 0..self.groups {
                let chans = g * cg..(g + 1) * cg;
                let at = |c: usize| c * plane + b * hw;
                let (mut m1, mut m2) = (0.0, 0.0);
                for c in chans.clone() {
                    for i in at(c)..at(c) + hw {
                        let dxh = dy.data[i] * gamma[c];
                        m1 += dxh;
                        m2 += dxh * cache.xhat[i];
                    }
                }
                m1 /= count;
                m2 /= count;
                let is = cache.inv_std[b * self.groups + g];
                for c in chans {
                    for i in at(c)..at(c) + hw {
                        let dxh = dy.data[i] * gamma[c];
                        dx[i] = is * (dxh - m1 - cache.xhat[i] * m2);
                    }
                }
            }
        }
        dy.like(dx)
    }
}

/// Normalization slot: group norm or pass-through.
#[derive(Debug, Clone)]
pub enum Norm {
    Group(GroupNorm),
    Identity,
}

#[derive(Debug, Clone)]
pub enum NormCache {
    Group(GroupNormCache),
    Identity,
}

impl Norm {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, groups: usize) -> Self {
        if groups == 0 {
            Norm::Identity
        } else {
            Norm::Group(GroupNorm::new(store, rng, name, channels, groups))
        }
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> (FeatureMap, NormCache) {
        match self {
            Norm::Group(gn) => {
                let (y, c) = gn.forward(store, x);
                (y, NormCache::Group(c))
            }
            Norm::Identity => (x.clone(), NormCache::Identity),
        }
    }

    pub fn backward(&self, store: &ParamStore, cache: &NormCache, dy: &FeatureMap, grads: &mut Grads) -> FeatureMap {
        match (self, cache) {
            (Norm::Group(gn), NormCache::Group(c)) => gn.backward(store, c, dy, grads),
            _ => dy.clone(),
        }
    }
}

/// Dense layer over row vectors, `y = W x + b` with `W: [out, in]`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, in_features: usize, out_features: usize) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                vec![out_features, in_features],
                Init::Normal(1.0 / (in_features as f64).sqrt()),
                rng,
            ),
            bias: store.add(format!("{name}.bias"), vec![out_features], Init::Zeros, rng),
            in_features,
            out_features,
        }
    }

    /// `x` is `[rows, in]`; returns `[rows, out]`.
    pub fn forward(&self, store: &ParamStore, x: &[f64], rows: usize) -> Vec<f64> {
        let bias = store.get(self.bias);
        let mut out: Vec<f64> = (0..rows).flat_map(|_| bias.iter().copied()).collect();
        gemm(rows, self.in_features, self.out_features, x, false, store.get(self.weight), true, 1.0, &mut out);
        out
    }

    pub fn backward(&self, store: &ParamStore, x: &[f64], dy: &[f64], rows: usize, grads: &mut Grads) -> Vec<f64> {
        gemm(self.out_features, rows, self.in_features, dy, true, x, false, 1.0, grads.get_mut(store, self.weight));
        let db = grads.get_mut(store, self.bias);
        for row in dy.chunks(self.out_features) {
            for (d, g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        let mut dx = vec![0.0; rows * self.in_features];
        gemm(rows, self.out_features, self.in_features, dy, false, store.get(self.weight), false, 0.0, &mut dx);
        dx
    }
}

/// Pre-activation residual block with an additive per-channel time shift:
///
/// ```text
/// h = conv1(act(norm1(x))) + time_proj(temb)
/// y = skip(x) + conv2(act(norm2(h)))
/// ```
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub norm1: Norm,
    pub conv1: Conv2d,
    pub time_proj: Linear,
    pub norm2: Norm,
    pub conv2: Conv2d,
    pub skip: Option<Conv2d>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct ResBlockCache {
    x: FeatureMap,
    n1: NormCache,
    pre1: FeatureMap,
    act1: FeatureMap,
    n2: NormCache,
    pre2: FeatureMap,
    act2: FeatureMap,
}

impl ResBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        time_dim: usize,
        groups: usize,
        activation: Activation,
    ) -> Self {
        Self {
            norm1: Norm::new(store, rng, &format!("{name}.norm1"), in_channels, groups),
            conv1: Conv2d::new(store, rng, &format!("{name}.conv1"), in_channels, out_channels, 3, 1, 1, false),
            time_proj: Linear::new(store, rng, &format!("{name}.time_proj"), time_dim, out_channels),
            norm2: Norm::new(store, rng, &format!("{name}.norm2"), out_channels, groups),
            conv2: Conv2d::new(store, rng, &format!("{name}.conv2"), out_channels, out_channels, 3, 1, 1, false),
            skip: (in_channels != out_channels).then(|| {
                Conv2d::new(store, rng, &format!("{name}.skip"), in_channels, out_channels, 1, 1, 0, false)
            }),
            activation,
        }
    }

    /// `temb` is `[B, time_dim]`.
    pub fn forward(&self, store: &ParamStore, x: &FeatureMap, temb: &[f64]) -> (FeatureMap, ResBlockCache) {
        let (h0, n1) = self.norm1.forward(store, x);
        let a0 = x.like(self.activation.apply(&h0.data));
        let mut h1 = self.conv1.forward(store, &a0);
        let shift = self.time_proj.forward(store, temb, x.batch);
        let (hw, plane, out_c) = (h1.hw(), h1.plane(), h1.channels);
        for c in 0..out_c {
            for b in 0..x.batch {
                let s = shift[b * out_c + c];
                for v in &mut h1.data[c * plane + b * hw..c * plane + (b + 1) * hw] {
                    *v += s;
                }
            }
        }
        let (h2n, n2) = self.norm2.forward(store, &h1);
        let a2 = h1.like(self.activation.apply(&h2n.data));
        let mut y = self.conv2.forward(store, &a2);
        match &self.skip {
            Some(conv) => y.add_assign(&conv.forward(store, x)),
            None => y.add_assign(x),
        }
        let cache = ResBlockCache {
            x: x.clone(),
            n1,
            pre1: h0,
            act1: a0,
            n2,
            pre2: h2n,
            act2: a2,
        };
        (y, cache)
    }

    /// Returns `dx`; adds the time-embedding gradient into `dtemb`.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ResBlockCache,
        temb: &[f64],
        dy: &FeatureMap,
        grads: &mut Grads,
        dtemb: &mut [f64],
    ) -> FeatureMap {
        let mut dx = match &self.skip {
            Some(conv) => conv.backward(store, &cache.x, dy, grads),
            None => dy.clone(),
        };
        let da2 = self.conv2.backward(store, &cache.act2, dy, grads);
        let dh2n = da2.like(self.activation.backward(&cache.pre2.data, &da2.data));
        let dh1 = self.norm2.backward(store, &cache.n2, &dh2n, grads);

        let (hw, plane, out_c, batch) = (dh1.hw(), dh1.plane(), dh1.channels, dh1.batch);
        let mut dshift = vec![0.0; batch * out_c];
        for c in 0..out_c {
            for b in 0..batch {
                dshift[b * out_c + c] = dh1.data[c * plane + b * hw..c * plane + (b + 1) * hw]
                    .iter()
                    .sum();
            }
        }
        let dt = self.time_proj.backward(store, temb, &dshift, batch, grads);
        for (d, g) in dtemb.iter_mut().zip(&dt) {
            *d += g;
        }

        let da1 = self.conv1.backward(store, &cache.act1, &dh1, grads);
        let dh0 = da1.like(self.activation.backward(&cache.pre1.data, &da1.data));
        let dmain = self.norm1.backward(store, &cache.n1, &dh0, grads);
        dx.add_assign(&dmain);
        dx
    }
}

/// Single-head spatial self-attention with a residual connection.
#[derive(Debug, Clone)]
pub struct AttnBlock {
    pub norm: Norm,
    pub query: Conv2d,
    pub key: Conv2d,
    pub value: Conv2d,
    pub proj: Conv2d,
    pub channels: usize,
}

#[derive(Debug, Clone)]
pub struct AttnCache {
    norm: NormCache,
    normed: FeatureMap,
    q: FeatureMap,
    k: FeatureMap,
    v: FeatureMap,
    /// Softmax weights per sample, `[B, HW, HW]`.
    attn: Vec<f64>,
    o: FeatureMap,
}

impl AttnBlock {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize, groups: usize) -> Self {
        let c = channels;
        Self {
            norm: Norm::new(store, rng, &format!("{name}.norm"), c, groups),
            query: Conv2d::new(store, rng, &format!("{name}.query"), c, c, 1, 1, 0, false),
            key: Conv2d::new(store, rng, &format!("{name}.key"), c, c, 1, 1, 0, false),
            value: Conv2d::new(store, rng, &format!("{name}.value"), c, c, 1, 1, 0, false),
            proj: Conv2d::new(store, rng, &format!("{name}.proj"), c, c, 1, 1, 0, false),
            channels,
        }
    }

    fn scale(&self) -> f64 {
        1.0 / (self.channels as f64).sqrt()
    }

    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> (FeatureMap, AttnCache) {
        let (normed, norm) = self.norm.forward(store, x);
        let q = self.query.forward(store, &normed);
        let k = self.key.forward(store, &normed);
        let v = self.value.forward(store, &normed);
        let (c, hw, plane) = (self.channels, x.hw(), x.plane());
        let mut attn = vec![0.0; x.batch * hw * hw];
        let mut o = vec![0.0; x.data.len()];
        for b in 0..x.batch {
            let off = b * hw;
            let s = &mut attn[b * hw * hw..(b + 1) * hw * hw];
            // S = q_b^T k_b
            gemm_strided(hw, c, hw, &q.data[off..], 1, plane, &k.data[off..], plane, 1, 0.0, s, hw, 1);
            for row in s.chunks_mut(hw) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v * self.scale()));
                let mut sum = 0.0;
                for v in row.iter_mut() {
                    *v = (*v * self.scale() - mx).exp();
                    sum += *v;
                }
                for v in row.iter_mut() {
                    *v /= sum;
                }
            }
            // o_b = v_b A^T
            gemm_strided(c, hw, hw, &v.data[off..], plane, 1, s, 1, hw, 0.0, &mut o[off..], plane, 1);
        }
        let o = x.like(o);
        let mut y = self.proj.forward(store, &o);
        y.add_assign(x);
        (
            y,
            AttnCache {
                norm,
                normed,
                q,
                k,
                v,
                attn,
                o,
            },
        )
    }

    pub fn backward(&self, store: &ParamStore, cache: &AttnCache, dy: &FeatureMap, grads: &mut Grads) -> FeatureMap {
        let (c, hw, plane) = (self.channels, dy.hw(), dy.plane());
        let d_o = self.proj.backward(store, &cache.o, dy, grads);
        let mut dq = vec![0.0; dy.data.len()];
        let mut dk = vec![0.0; dy.data.len()];
        let mut dv = vec![0.0; dy.data.len()];
        let mut da = vec![0.0; hw * hw];
        for b in 0..dy.batch {
            let off = b * hw;
            let a = &cache.attn[b * hw * hw..(b + 1) * hw * hw];
            // dv_b = dO_b A
            gemm_strided(c, hw, hw, &d_o.data[off..], plane, 1, a, hw, 1, 0.0, &mut dv[off..], plane, 1);
            // dA = dO_b^T v_b
            gemm_strided(hw, c, hw, &d_o.data[off..], 1, plane, &cache.v.data[off..], plane, 1, 0.0, &mut da, hw, 1);
            // softmax backward, folded with the 1/sqrt(C) scale
            for (arow, drow) in a.chunks(hw).zip(da.chunks_mut(hw)) {
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(x, y)| x * y).sum();
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot) * self.scale();
                }
            }
            // dq_b = k_b dS^T, dk_b = q_b dS
            gemm_strided(c, hw, hw, &cache.k.data[off..], plane, 1, &da, 1, hw, 0.0, &mut dq[off..], plane, 1);
            gemm_strided(c, hw, hw, &cache.q.data[off..], plane, 1, &da, hw, 1, 0.0, &mut dk[off..], plane, 1);
        }
        let mut dn = self.query.backward(store, &cache.normed, &dy.like(dq), grads);
        dn.add_assign(&self.key.backward(store, &cache.normed, &dy.like(dk), grads));
        dn.add_assign(&self.value.backward(store, &cache.normed, &dy.like(dv), grads));
        let mut dx = self.norm.backward(store, &cache.norm, &dn, grads);
        dx.add_assign(dy);
        dx
    }
}

/// Nearest-neighbour 2x upsampling followed by a 3x3 convolution.
#[derive(Debug, Clone)]
pub struct Upsample {
    pub conv: Conv2d,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, rng: &mut Rng, name: &str, channels: usize) -> Self {
        Self {
            conv: Conv2d::new(store, rng, &format!("{name}.conv"), channels, channels, 3, 1, 1, false),
        }
    }

    pub fn nearest(x: &FeatureMap) -> FeatureMap {
        let (h, w) = (x.height, x.width);
        let (h2, w2) = (2 * h, 2 * w);
        let mut data = vec![0.0; x.data.len() * 4];
        for cb in 0..x.channels * x.batch {
            let src = &x.data[cb * h * w..(cb + 1) * h * w];
            let dst = &mut data[cb * h2 * w2..(cb + 1) * h2 * w2];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[i * w2 + j] = src[(i / 2) * w + j / 2];
                }
            }
        }
        FeatureMap {
            channels: x.channels,
            batch: x.batch,
            height: h2,
            width: w2,
            data,
        }
    }

    fn nearest_backward(dy: &FeatureMap) -> FeatureMap {
        let (h2, w2) = (dy.height, dy.width);
        let (h, w) = (h2 / 2, w2 / 2);
        let mut data = vec![0.0; dy.data.len() / 4];
        for cb in 0..dy.channels * dy.batch {
            let src = &dy.data[cb * h2 * w2..(cb + 1) * h2 * w2];
            let dst = &mut data[cb * h * w..(cb + 1) * h * w];
            for i in 0..h2 {
                for j in 0..w2 {
                    dst[(i / 2) * w + j / 2] += src[i * w2 + j];
                }
            }
        }
        FeatureMap {
            channels: dy.channels,
            batch: dy.batch,
            height: h,
            width: w,
            data,
        }
    }

    /// Returns the output and the upsampled input the convolution saw.
    pub fn forward(&self, store: &ParamStore, x: &FeatureMap) -> (FeatureMap, FeatureMap) {
        let up = Self::nearest(x);
        (self.conv.forward(store, &up), up)
    }

    pub fn backward(&self, store: &ParamStore, up: &FeatureMap, dy: &FeatureMap, grads: &mut Grads) -> FeatureMap {
        let dup = self.conv.backward(store, up, dy, grads);
        Self::nearest_backward(&dup)
    }
}
