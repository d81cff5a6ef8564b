//! Compact encoder-decoder velocity network.
//!
//! ```text
//! x [2, M, N] -> conv_in
//!   encoder level l: R x ResBlock (+ attention if l in attention_levels),
//!                    save skip, stride-2 conv (except at the last level)
//!   middle:          ResBlock, attention, ResBlock
//!   decoder level l: concat skip, R x ResBlock (+ attention),
//!                    nearest upsample + conv (except at level 0)
//! -> norm -> act -> conv_out (zero-initialized) -> [2, M, N]
//! ```
//!
//! The scalar conditioning input (flow time, or the mapped noise level for
//! the score baseline) goes through a sinusoidal encoding and a shared
//! `Linear + act` before every residual block adds its own projection.

use serde::{Deserialize, Serialize};

use super::embed::time_embedding;
use super::layers::{
    Activation, AttnBlock, AttnCache, Conv2d, FeatureMap, Linear, Norm, NormCache, ResBlock,
    ResBlockCache, Upsample,
};
use super::params::{Grads, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{complex_to_tensor, tensor_to_complex, ComplexMatrix, RealTensor, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub level_multipliers: Vec<usize>,
    pub res_blocks_per_level: usize,
    /// Encoder/decoder levels that get an attention block after each
    /// residual block.
    pub attention_levels: Vec<usize>,
    pub mid_block: bool,
    pub mid_attention: bool,
    pub time_embed_dim: usize,
    /// Group-norm groups; 0 disables normalization.
    pub norm_groups: usize,
    pub activation: Activation,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            level_multipliers: vec![1, 2, 2],
            res_blocks_per_level: 2,
            attention_levels: Vec::new(),
            mid_block: true,
            mid_attention: true,
            time_embed_dim: 32,
            norm_groups: 8,
            activation: Activation::Silu,
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn levels(&self) -> usize {
        self.level_multipliers.len()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.level_multipliers[level]
    }

    /// Spatial dimensions must be divisible by this.
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.levels() == 0 {
            return bad("need at least one level".into());
        }
        if self.base_channels == 0 || self.level_multipliers.contains(&0) {
            return bad("channel counts must be positive".into());
        }
        if self.time_embed_dim == 0 || self.time_embed_dim % 2 != 0 {
            return bad(format!("time_embed_dim must be even, got {}", self.time_embed_dim));
        }
        if let Some(l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} does not exist"));
        }
        if self.norm_groups > 0 {
            for l in 0..self.levels() {
                if self.channels(l) % self.norm_groups != 0 {
                    return bad(format!(
                        "{} channels at level {l} not divisible into {} groups",
                        self.channels(l),
                        self.norm_groups
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let d = self.spatial_divisor();
        if height == 0 || width == 0 || height % d != 0 || width % d != 0 {
            return Err(Error::Dimension(format!(
                "spatial dims {height}x{width} must be positive multiples of {d}"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Stage {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv2d),
    Up(Upsample),
    SaveSkip,
    ConcatSkip,
}

#[derive(Debug, Clone)]
enum StageCache {
    Res(Box<ResBlockCache>),
    Attn(Box<AttnCache>),
    Down(FeatureMap),
    Up(FeatureMap),
    SaveSkip,
    ConcatSkip { channels: usize },
}

/// Everything `backward` needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    batch: usize,
    height: usize,
    width: usize,
    input: FeatureMap,
    embedding: Vec<f64>,
    temb_pre: Vec<f64>,
    temb: Vec<f64>,
    stages: Vec<StageCache>,
    out_norm: NormCache,
    out_pre: FeatureMap,
    out_act: FeatureMap,
}

/// The velocity field network; also the score network of the baseline.
#[derive(Debug, Clone)]
pub struct UNet {
    config: NetworkConfig,
    store: ParamStore,
    conv_in: Conv2d,
    time_linear: Linear,
    stages: Vec<Stage>,
    out_norm: Norm,
    conv_out: Conv2d,
    tape: Option<Tape>,
}

pub type VelocityFieldModel = UNet;

impl UNet {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let mut store = ParamStore::new();
        let rng = &mut rng;
        let g = config.norm_groups;
        let act = config.activation;
        let td = config.time_embed_dim;
        let c0 = config.channels(0);

        let time_linear = Linear::new(&mut store, rng, "time.linear", td, td);
        let conv_in = Conv2d::new(&mut store, rng, "conv_in", 2, c0, 3, 1, 1, false);

        let mut stages = Vec::new();
        let mut ch = c0;
        let mut skip_channels = Vec::new();
        let levels = config.levels();
        for l in 0..levels {
            let out = config.channels(l);
            for r in 0..config.res_blocks_per_level {
                let name = format!("down{l}.res{r}");
                stages.push(Stage::Res(ResBlock::new(&mut store, rng, &name, ch, out, td, g, act)));
                ch = out;
                if config.attention_levels.contains(&l) {
                    let name = format!("down{l}.attn{r}");
                    stages.push(Stage::Attn(AttnBlock::new(&mut store, rng, &name, ch, g)));
                }
            }
            stages.push(Stage::SaveSkip);
            skip_channels.push(ch);
            if l + 1 < levels {
                let name = format!("down{l}.downsample");
                stages.push(Stage::Down(Conv2d::new(&mut store, rng, &name, ch, ch, 3, 2, 1, false)));
            }
        }
        if config.mid_block {
            stages.push(Stage::Res(ResBlock::new(&mut store, rng, "mid.res0", ch, ch, td, g, act)));
            if config.mid_attention {
                stages.push(Stage::Attn(AttnBlock::new(&mut store, rng, "mid.attn", ch, g)));
            }
            stages.push(Stage::Res(ResBlock::new(&mut store, rng, "mid.res1", ch, ch, td, g, act)));
        }
        for l in (0..levels).rev() {
            stages.push(Stage::ConcatSkip);
            ch += skip_channels[l];
            let out = config.channels(l);
            for r in 0..config.res_blocks_per_level {
                let name = format!("up{l}.res{r}");
                stages.push(Stage::Res(ResBlock::new(&mut store, rng, &name, ch, out, td, g, act)));
                ch = out;
                if config.attention_levels.contains(&l) {
                    let name = format!("up{l}.attn{r}");
                    stages.push(Stage::Attn(AttnBlock::new(&mut store, rng, &name, ch, g)));
                }
            }
            if l > 0 {
                let name = format!("up{l}.upsample");
                stages.push(Stage::Up(Upsample::new(&mut store, rng, &name, ch)));
            }
        }
        let out_groups = if g > 0 && ch % g == 0 { g } else { 0 };
        if g > 0 && out_groups == 0 {
            return Err(Error::InvalidParameter(format!(
                "output width {ch} not divisible into {g} groups"
            )));
        }
        let out_norm = Norm::new(&mut store, rng, "out.norm", ch, out_groups);
        let conv_out = Conv2d::new(&mut store, rng, "conv_out", ch, 2, 3, 1, 1, true);

        Ok(Self {
            config,
            store,
            conv_in,
            time_linear,
            stages,
            out_norm,
            conv_out,
            tape: None,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.len()
    }

    fn batch_input(&self, x: &RealTensor, t: &[f64]) -> Result<FeatureMap> {
        let fm = FeatureMap::from_batch(x)?;
        if fm.channels != 2 {
            return Err(Error::Dimension(format!(
                "input must have 2 channels, got {}",
                fm.channels
            )));
        }
        if t.len() != fm.batch {
            return Err(Error::Dimension(format!(
                "{} time values for a batch of {}",
                t.len(),
                fm.batch
            )));
        }
        self.config.check_input(fm.height, fm.width)?;
        Ok(fm)
    }

    /// Forward pass over a `[B, 2, M, N]` batch with one time value per
    /// sample, returning the output and the tape for [`UNet::backward_tape`].
    pub fn forward_tape(&self, x: &RealTensor, t: &[f64]) -> Result<(RealTensor, Tape)> {
        let input = self.batch_input(x, t)?;
        let batch = input.batch;
        let td = self.config.time_embed_dim;
        let mut embedding = Vec::with_capacity(batch * td);
        for &ti in t {
            embedding.extend(time_embedding(ti, td)?);
        }
        let temb_pre = self.time_linear.forward(&self.store, &embedding, batch);
        let temb = self.config.activation.apply(&temb_pre);

        let store = &self.store;
        let mut h = self.conv_in.forward(store, &input);
        let mut skips: Vec<FeatureMap> = Vec::new();
        let mut caches = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            match stage {
                Stage::Res(block) => {
                    let (y, c) = block.forward(store, &h, &temb);
                    caches.push(StageCache::Res(Box::new(c)));
                    h = y;
                }
                Stage::Attn(block) => {
                    let (y, c) = block.forward(store, &h);
                    caches.push(StageCache::Attn(Box::new(c)));
                    h = y;
                }
                Stage::Down(conv) => {
                    let y = conv.forward(store, &h);
                    caches.push(StageCache::Down(std::mem::replace(&mut h, y)));
                }
                Stage::Up(up) => {
                    let (y, u) = up.forward(store, &h);
                    caches.push(StageCache::Up(u));
                    h = y;
                }
                Stage::SaveSkip => {
                    skips.push(h.clone());
                    caches.push(StageCache::SaveSkip);
                }
                Stage::ConcatSkip => {
                    let skip = skips.pop().expect("balanced skip stack");
                    caches.push(StageCache::ConcatSkip { channels: h.channels });
                    h = h.concat(&skip);
                }
            }
        }
        let (out_pre, out_norm) = self.out_norm.forward(store, &h);
        let out_act = out_pre.like(self.config.activation.apply(&out_pre.data));
        let y = self.conv_out.forward(store, &out_act);
        let tape = Tape {
            batch,
            height: input.height,
            width: input.width,
            input,
            embedding,
            temb_pre,
            temb,
            stages: caches,
            out_norm,
            out_pre,
            out_act,
        };
        Ok((y.to_batch(), tape))
    }

    /// Parameter gradients and input gradient for upstream gradient `dy`.
    pub fn backward_tape(&self, tape: &Tape, dy: &RealTensor) -> Result<(Grads, RealTensor)> {
        let expected = [tape.batch, 2, tape.height, tape.width];
        if dy.shape() != expected {
            return Err(Error::Dimension(format!(
                "upstream gradient {:?}, expected {expected:?}",
                dy.shape()
            )));
        }
        let store = &self.store;
        let mut grads = store.zeros_like();
        let mut dtemb = vec![0.0; tape.temb.len()];
        let dy = FeatureMap::from_batch(dy)?;

        let d_act = self.conv_out.backward(store, &tape.out_act, &dy, &mut grads);
        let d_pre = d_act.like(self.config.activation.backward(&tape.out_pre.data, &d_act.data));
        let mut dh = self.out_norm.backward(store, &tape.out_norm, &d_pre, &mut grads);

        let mut skip_grads: Vec<FeatureMap> = Vec::new();
        for (stage, cache) in self.stages.iter().zip(&tape.stages).rev() {
            dh = match (stage, cache) {
                (Stage::Res(block), StageCache::Res(c)) => {
                    block.backward(store, c, &tape.temb, &dh, &mut grads, &mut dtemb)
                }
                (Stage::Attn(block), StageCache::Attn(c)) => block.backward(store, c, &dh, &mut grads),
                (Stage::Down(conv), StageCache::Down(x)) => conv.backward(store, x, &dh, &mut grads),
                (Stage::Up(up), StageCache::Up(u)) => up.backward(store, u, &dh, &mut grads),
                (Stage::ConcatSkip, StageCache::ConcatSkip { channels }) => {
                    let (main, skip) = dh.split(*channels);
                    skip_grads.push(skip);
                    main
                }
                (Stage::SaveSkip, StageCache::SaveSkip) => {
                    let mut g = dh;
                    g.add_assign(&skip_grads.pop().expect("balanced skip stack"));
                    g
                }
                _ => unreachable!("tape does not match network stages"),
            };
        }
        let dx = self.conv_in.backward(store, &tape.input, &dh, &mut grads);

        let d_temb_pre = self.config.activation.backward(&tape.temb_pre, &dtemb);
        self.time_linear
            .backward(store, &tape.embedding, &d_temb_pre, tape.batch, &mut grads);
        Ok((grads, dx.to_batch()))
    }

    /// Batched inference.
    pub fn forward_batch(&self, x: &RealTensor, t: &[f64]) -> Result<RealTensor> {
        Ok(self.forward_tape(x, t)?.0)
    }

    /// Single `[2, M, N]` input.
    pub fn forward(&self, x: &RealTensor, t: f64) -> Result<RealTensor> {
        let &[c, m, n] = x.shape() else {
            return Err(Error::Dimension(format!(
                "expected [2, M, N], got {:?}",
                x.shape()
            )));
        };
        let xb = RealTensor::new(vec![1, c, m, n], x.data().to_vec())?;
        let y = self.forward_batch(&xb, &[t])?;
        Ok(RealTensor::from_parts(vec![2, m, n], y.into_data()))
    }

    /// The field evaluated on a complex channel matrix.
    pub fn velocity(&self, h: &ComplexMatrix, t: f64) -> Result<ComplexMatrix> {
        tensor_to_complex(&self.forward(&complex_to_tensor(h), t)?)
    }

    /// Forward pass that keeps its tape for a following [`UNet::backward`].
    pub fn forward_train(&mut self, x: &RealTensor, t: &[f64]) -> Result<RealTensor> {
        let (y, tape) = self.forward_tape(x, t)?;
        self.tape = Some(tape);
        Ok(y)
    }

    /// Backward through the tape left by [`UNet::forward_train`].
    pub fn backward(&mut self, dy: &RealTensor) -> Result<Grads> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a preceding forward_train".into()))?;
        Ok(self.backward_tape(&tape, dy)?.0)
    }
}
