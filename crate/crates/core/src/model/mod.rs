//! The encoder-decoder dehazing network.
//!
//! ```text
//! shallow  = conv3x3(hazy)
//! mm       = encoder/decoder stack of mixture blocks applied to shallow
//! refined  = mm + delta * shallow
//! fused    = refined + shallow
//! output   = clamp(conv3x3(fused), 0, 1)
//! ```
//!
//! Encoder level `i` runs `blocks[i]` mixture blocks at `base * mult^i`
//! channels, keeps a skip copy and downsamples with a stride-2 conv that
//! multiplies the width. The last level is the bottleneck. Each decoder level
//! upsamples (nearest neighbour, then a 3x3 conv reducing the width), adds the
//! skip and runs its own `blocks[i]` mixture blocks.

mod checkpoint;

pub use checkpoint::{
    stored_precision, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, RNG_CONVENTION,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::moe::{mm_forward, ConvParams, MmBlock, MoeConfig};
use crate::numcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::prior::{DarkChannelEstimator, DegradationPrior, IntensityEstimator, RatingLevelSet};
use crate::ssm::ScanDirection;

/// Network hyperparameters.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub levels: usize,
    /// Mixture blocks per level (encoder and decoder each).
    pub blocks: Vec<usize>,
    /// Experts per mixture block at each level.
    pub experts: Vec<usize>,
    /// Experts evaluated per forward at each level.
    pub top_k: Vec<usize>,
    pub base_channels: usize,
    /// Width multiplier between consecutive levels.
    pub channel_multiplier: usize,
    pub state_dim: usize,
    pub directions: Vec<ScanDirection>,
    pub image_channels: usize,
    /// Dark-channel window of the built-in intensity estimator.
    pub prior_window: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::full()
    }
}

impl ModelConfig {
    /// Four levels with {4, 6, 6, 8} blocks, {14, 1, 1, 14} experts and
    /// top-{7, 1, 1, 7} routing.
    pub fn full() -> Self {
        ModelConfig {
            levels: 4,
            blocks: vec![4, 6, 6, 8],
            experts: vec![14, 1, 1, 14],
            top_k: vec![7, 1, 1, 7],
            base_channels: 16,
            channel_multiplier: 2,
            state_dim: 16,
            directions: ScanDirection::ALL.to_vec(),
            image_channels: 3,
            prior_window: DarkChannelEstimator::DEFAULT_WINDOW,
        }
    }

    /// One level, one block, two experts with top-1 routing, four channels.
    pub fn tiny() -> Self {
        ModelConfig {
            levels: 1,
            blocks: vec![1],
            experts: vec![2],
            top_k: vec![1],
            base_channels: 4,
            state_dim: 4,
            ..Self::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.levels == 0 {
            return bad("at least one level is required".into());
        }
        for (name, v) in [
            ("blocks", &self.blocks),
            ("experts", &self.experts),
            ("top_k", &self.top_k),
        ] {
            if v.len() != self.levels {
                return bad(format!(
                    "{name} has {} entries for {} levels",
                    v.len(),
                    self.levels
                ));
            }
        }
        for i in 0..self.levels {
            if self.blocks[i] == 0 || self.experts[i] == 0 || self.top_k[i] == 0 {
                return bad(format!(
                    "level {i}: blocks, experts and top_k must be positive"
                ));
            }
            if self.top_k[i] > self.experts[i] {
                return bad(format!(
                    "level {i}: top_k {} exceeds {} experts",
                    self.top_k[i], self.experts[i]
                ));
            }
        }
        let mut routed = self.experts.iter().filter(|&&n| n > 1);
        if let Some(&n) = routed.next() {
            if routed.any(|&m| m != n) {
                return bad(format!(
                    "routed levels must share one expert count, got {:?}",
                    self.experts
                ));
            }
        }
        if self.base_channels == 0
            || self.channel_multiplier == 0
            || self.state_dim == 0
            || self.image_channels == 0
        {
            return bad("channel, multiplier and state sizes must be positive".into());
        }
        if self.directions.is_empty() {
            return bad("at least one scan direction is required".into());
        }
        if self.prior_window == 0 || self.prior_window.is_multiple_of(2) {
            return bad(format!(
                "prior window must be odd, got {}",
                self.prior_window
            ));
        }
        Ok(())
    }

    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels * self.channel_multiplier.pow(level as u32)
    }

    /// Length of the degradation prior the network consumes.
    pub fn prior_len(&self) -> usize {
        self.experts.iter().copied().find(|&n| n > 1).unwrap_or(1)
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serialises")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn moe_config(&self, level: usize) -> MoeConfig {
        MoeConfig {
            channels: self.channels_at(level),
            n_experts: self.experts[level],
            top_k: self.top_k[level],
            state_dim: self.state_dim,
            directions: self.directions.clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct EncoderLevel {
    blocks: Vec<MmBlock>,
    down: ConvParams,
}

#[derive(Debug, Clone)]
struct DecoderLevel {
    up: ConvParams,
    blocks: Vec<MmBlock>,
}

/// Intermediate tensors of one forward pass.
#[derive(Clone)]
pub struct Stages<T: Scalar> {
    pub shallow: Var<T>,
    pub mm: Var<T>,
    pub refined: Var<T>,
    pub fused: Var<T>,
    pub output: Var<T>,
}

/// A built network and its parameters.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar> {
    config: ModelConfig,
    seed: u64,
    store: ParamStore<T>,
    shallow: ConvParams,
    encoder: Vec<EncoderLevel>,
    bottleneck: Vec<MmBlock>,
    decoder: Vec<DecoderLevel>,
    delta: ParamId,
    recon: ConvParams,
}

fn mm_blocks<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    config: &ModelConfig,
    level: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MmBlock>> {
    (0..config.blocks[level])
        .map(|b| {
            MmBlock::register(
                store,
                &format!("{prefix}.block{b}"),
                &config.moe_config(level),
                rng,
            )
        })
        .collect()
}

/// Builds a network with parameters drawn from `ChaCha8Rng::seed_from_u64(seed)`.
pub fn build<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<Network<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let img = config.image_channels;
    let c0 = config.channels_at(0);
    let shallow = ConvParams::register(&mut store, "shallow", img, c0, 1, &mut rng);
    let last = config.levels - 1;
    let mut encoder = Vec::with_capacity(last);
    for level in 0..last {
        let blocks = mm_blocks(&mut store, &format!("enc{level}"), config, level, &mut rng)?;
        let (cin, cout) = (config.channels_at(level), config.channels_at(level + 1));
        let down = ConvParams::register(
            &mut store,
            &format!("enc{level}.down"),
            cin,
            cout,
            2,
            &mut rng,
        );
        encoder.push(EncoderLevel { blocks, down });
    }
    let bottleneck = mm_blocks(&mut store, "bottleneck", config, last, &mut rng)?;
    let mut decoder = Vec::with_capacity(last);
    for level in (0..last).rev() {
        let (cin, cout) = (config.channels_at(level + 1), config.channels_at(level));
        let up = ConvParams::register(
            &mut store,
            &format!("dec{level}.up"),
            cin,
            cout,
            1,
            &mut rng,
        );
        let blocks = mm_blocks(&mut store, &format!("dec{level}"), config, level, &mut rng)?;
        decoder.push(DecoderLevel { up, blocks });
    }
    let delta = store.add("delta", Tensor::full(&[1], T::one()));
    let recon = ConvParams::register(&mut store, "recon", c0, img, 1, &mut rng);
    Ok(Network {
        config: config.clone(),
        seed,
        store,
        shallow,
        encoder,
        bottleneck,
        decoder,
        delta,
        recon,
    })
}

/// Total scalar parameter count.
pub fn count_parameters<T: Scalar>(net: &Network<T>) -> usize {
    net.store.scalar_count()
}

/// Reflect-pads the bottom and right edges of a `(B, C, H, W)` tensor.
pub fn reflect_pad<T: Scalar>(x: &Tensor<T>, pad_h: usize, pad_w: usize) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let reflect = |i: usize, n: usize| -> usize {
        if i < n {
            i
        } else if n == 1 {
            0
        } else {
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        }
    };
    let (oh, ow) = (h + pad_h, w + pad_w);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in x.data().chunks(h * w) {
        for y in 0..oh {
            let row = &plane[reflect(y, h) * w..][..w];
            out.extend((0..ow).map(|xx| row[reflect(xx, w)]));
        }
    }
    Tensor::new(&[b, c, oh, ow], out)
}

impl<T: Scalar> Network<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Seed the parameters were drawn from.
    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn delta_param(&self) -> ParamId {
        self.delta
    }

    /// Every mixture block in forward order.
    pub fn mm_blocks(&self) -> impl Iterator<Item = &MmBlock> {
        self.encoder
            .iter()
            .flat_map(|l| l.blocks.iter())
            .chain(self.bottleneck.iter())
            .chain(self.decoder.iter().flat_map(|l| l.blocks.iter()))
    }

    /// The built-in intensity estimator over `prior_len` graded levels.
    pub fn estimator(&self) -> DarkChannelEstimator {
        let levels =
            RatingLevelSet::graded(self.config.prior_len()).expect("validated prior length");
        DarkChannelEstimator::new(levels, self.config.prior_window).expect("validated window")
    }

    /// Prior from the built-in estimator.
    pub fn estimate_prior(&self, image: &Tensor<T>) -> Result<DegradationPrior> {
        self.estimator().prior(image)
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.config.image_channels {
            return shape_err(format!(
                "network expects {} image channels, got {c}",
                self.config.image_channels
            ));
        }
        let m = self.config.size_multiple();
        if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
            let up = |v: usize| v.div_ceil(m).max(1) * m;
            return shape_err(format!(
                "{h}x{w} input is not a multiple of {m}; pad to {}x{} (see forward_padded)",
                up(h),
                up(w)
            ));
        }
        if let Some(v) = x
            .data()
            .iter()
            .find(|v| !(**v >= T::zero() && **v <= T::one()))
        {
            return Err(Error::Range(format!("input value {v} outside [0, 1]")));
        }
        Ok(())
    }

    fn run_blocks(
        &self,
        g: &Graph<T>,
        mut x: Var<T>,
        blocks: &[MmBlock],
        prior: &DegradationPrior,
    ) -> Result<Var<T>> {
        for block in blocks {
            x = mm_forward(g, &self.store, &x, prior, block)?;
        }
        Ok(x)
    }

    /// The encoder-decoder stack of mixture blocks.
    pub fn mm_stack(&self, g: &Graph<T>, x: &Var<T>, prior: &DegradationPrior) -> Result<Var<T>> {
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut cur = x.clone();
        for level in &self.encoder {
            let y = self.run_blocks(g, cur, &level.blocks, prior)?;
            cur = level.down.forward(g, &self.store, &y)?;
            skips.push(y);
        }
        cur = self.run_blocks(g, cur, &self.bottleneck, prior)?;
        for level in &self.decoder {
            let up = level.up.forward(g, &self.store, &g.upsample2x(&cur)?)?;
            let skip = skips.pop().expect("one skip per decoder level");
            cur = self.run_blocks(g, g.add(&up, &skip)?, &level.blocks, prior)?;
        }
        Ok(cur)
    }

    /// Forward pass exposing every stage. Spatial sizes must be multiples of
    /// [`ModelConfig::size_multiple`].
    pub fn forward_stages(
        &self,
        g: &Graph<T>,
        hazy: &Var<T>,
        prior: &DegradationPrior,
    ) -> Result<Stages<T>> {
        self.check_input(hazy.value())?;
        let shallow = self.shallow.forward(g, &self.store, hazy)?;
        let mm = self.mm_stack(g, &shallow, prior)?;
        let scaled = g.mul_scalar(&shallow, &g.param(&self.store, self.delta))?;
        let refined = g.add(&mm, &scaled)?;
        let fused = g.add(&refined, &shallow)?;
        let output = g.clamp(
            &self.recon.forward(g, &self.store, &fused)?,
            T::zero(),
            T::one(),
        )?;
        Ok(Stages {
            shallow,
            mm,
            refined,
            fused,
            output,
        })
    }

    pub fn forward(&self, g: &Graph<T>, hazy: &Var<T>, prior: &DegradationPrior) -> Result<Var<T>> {
        Ok(self.forward_stages(g, hazy, prior)?.output)
    }

    /// Reflect-pads to a valid size, runs [`Network::forward`] and crops back.
    pub fn forward_padded(
        &self,
        g: &Graph<T>,
        hazy: &Tensor<T>,
        prior: &DegradationPrior,
    ) -> Result<Var<T>> {
        let (_, _, h, w) = hazy.dims4()?;
        let m = self.config.size_multiple();
        let (ph, pw) = (h.div_ceil(m) * m - h, w.div_ceil(m) * m - w);
        if ph == 0 && pw == 0 {
            return self.forward(g, &g.constant(hazy.clone()), prior);
        }
        let padded = g.constant(reflect_pad(hazy, ph, pw)?);
        g.crop(&self.forward(g, &padded, prior)?, 0, 0, h, w)
    }

    /// Dehazes one image with the built-in prior, without recording gradients.
    pub fn dehaze(&self, hazy: &Tensor<T>) -> Result<Tensor<T>> {
        let prior = self.estimate_prior(hazy)?;
        let g = Graph::inference();
        Ok(self.forward_padded(&g, hazy, &prior)?.into_tensor())
    }

    /// Checkpoint of the current parameters.
    pub fn to_checkpoint(&self, step: u64) -> Checkpoint<T> {
        Checkpoint {
            config: self.config.clone(),
            seed: self.seed,
            step,
            tensors: self
                .store
                .iter()
                .map(|(_, name, t)| {
                    let mut t = t.clone();
                    t.set_requires_grad(false);
                    (name.to_string(), t)
                })
                .collect(),
        }
    }

    /// Rebuilds the network described by `ckpt`. Every parameter must be
    /// present with a matching shape; tensors with other names are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let mut net = build(&ckpt.config, ckpt.seed)?;
        let mut missing: Vec<String> = net.store.iter().map(|(_, n, _)| n.to_string()).collect();
        for (name, tensor) in &ckpt.tensors {
            if net.store.id(name).is_some() {
                net.store
                    .set(name, tensor.clone())
                    .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
                missing.retain(|m| m != name);
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing parameters: {}",
                missing.join(", ")
            )));
        }
        Ok(net)
    }
}
