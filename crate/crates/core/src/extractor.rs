//! Source extractor: residual attention, a stack of dilated convolution
//! blocks, residual attention again, then one softplus channel per source.

use cocktail_tensor::{Element, ParamStore, Pool2dSpec, Tape, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::key;
use crate::dsp::{Domain, Spectrogram};
use crate::error::{Error, Result};
use crate::layers::{Conv, Ctx, ResidualBlock};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Attention,
    /// Both attention stages replaced by dilated blocks of the same width.
    Ablation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractorConfig {
    pub n_sources: usize,
    pub attention_channels: usize,
    pub hourglass_depth: usize,
    /// Residual blocks in the attention trunk.
    pub trunk_blocks: usize,
    pub dilated_blocks: usize,
    pub layers_per_block: usize,
    pub dilated_channels: usize,
    pub kernel: usize,
    pub variant: Variant,
}

impl Default for ExtractorConfig {
    fn default() -> Self {
        Self::desk(2)
    }
}

impl ExtractorConfig {
    pub fn desk(n_sources: usize) -> Self {
        ExtractorConfig {
            n_sources,
            attention_channels: 16,
            hourglass_depth: 3,
            trunk_blocks: 2,
            dilated_blocks: 2,
            layers_per_block: 6,
            dilated_channels: 16 * n_sources,
            kernel: 3,
            variant: Variant::Attention,
        }
    }

    pub fn reference(n_sources: usize) -> Self {
        ExtractorConfig {
            attention_channels: 128,
            dilated_blocks: 3,
            dilated_channels: 32 * n_sources,
            ..Self::desk(n_sources)
        }
    }

    pub fn ablation(mut self) -> Self {
        self.variant = Variant::Ablation;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("extractor: {m}")));
        if !(1..=4).contains(&self.n_sources) {
            return bad("n_sources must be in 1..=4");
        }
        if self.hourglass_depth == 0 {
            return bad("hourglass_depth must be at least 1");
        }
        if self.layers_per_block == 0 || self.layers_per_block % 3 != 0 {
            return bad("layers_per_block must be a positive multiple of 3");
        }
        if self.dilated_channels < self.n_sources {
            return bad("dilated_channels must be at least n_sources");
        }
        if self.kernel % 2 == 0 || self.attention_channels == 0 {
            return bad("kernel must be odd and attention_channels positive");
        }
        Ok(())
    }

    /// Dilation of each layer in a block: 1, 2, 4, ...
    pub fn dilations(&self) -> Vec<usize> {
        (0..self.layers_per_block).map(|n| 1 << n).collect()
    }

    /// Time-axis receptive field of one dilated block, in frames.
    pub fn block_receptive_field(&self) -> usize {
        (self.kernel - 1) * self.dilations().iter().sum::<usize>() + 1
    }

    /// Receptive field of the whole dilated stack.
    pub fn stack_receptive_field(&self) -> usize {
        self.dilated_blocks * (self.block_receptive_field() - 1) + 1
    }
}

/// Dilated convolutions with relu and a residual junction every 3 layers.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedBlock {
    pub layers: Vec<Conv>,
}

impl DilatedBlock {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ExtractorConfig, channels: usize) -> Self {
        let layers = cfg
            .dilations()
            .into_iter()
            .enumerate()
            .map(|(i, d)| Conv::same(store, rng, &format!("{name}.layer{i}"), (channels, channels), cfg.kernel, d))
            .collect();
        DilatedBlock { layers }
    }

    pub fn junctions(&self) -> usize {
        self.layers.len() / 3
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (mut h, mut skip) = (x, x);
        for (i, conv) in self.layers.iter().enumerate() {
            h = conv.forward(cx, h)?;
            h = cx.tape.relu(h)?;
            if (i + 1) % 3 == 0 {
                h = cx.tape.add(h, skip)?;
                skip = h;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DilatedStack {
    pub blocks: Vec<DilatedBlock>,
}

impl DilatedStack {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ExtractorConfig, channels: usize) -> Self {
        DilatedStack {
            blocks: (0..cfg.dilated_blocks)
                .map(|b| DilatedBlock::new(store, rng, &format!("{name}.block{b}"), cfg, channels))
                .collect(),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.blocks.iter().try_fold(x, |h, b| b.forward(cx, h))
    }
}

/// Trunk of residual blocks and an hourglass mask branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualAttention {
    pub trunk: Vec<ResidualBlock>,
    /// One residual block after each 2x max-pool.
    pub down: Vec<ResidualBlock>,
    /// Residual blocks on the way up, from the coarsest merged level.
    pub up: Vec<ResidualBlock>,
    pub mask_out: Conv,
}

impl ResidualAttention {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ExtractorConfig) -> Self {
        let (c, k) = (cfg.attention_channels, cfg.kernel);
        let mut block = |n: String| ResidualBlock::new(store, rng, &n, c, c, k);
        let trunk = (0..cfg.trunk_blocks).map(|i| block(format!("{name}.trunk{i}"))).collect();
        let down = (0..cfg.hourglass_depth).map(|i| block(format!("{name}.down{i}"))).collect();
        let up = (1..cfg.hourglass_depth).rev().map(|l| block(format!("{name}.up{l}"))).collect();
        let mask_out = Conv::same(store, rng, &format!("{name}.mask_out"), (c, c), 1, 1);
        ResidualAttention {
            trunk,
            down,
            up,
            mask_out,
        }
    }

    pub fn depth(&self) -> usize {
        self.down.len()
    }

    pub fn trunk<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        self.trunk.iter().try_fold(x, |h, b| b.forward(cx, h))
    }

    /// Sigmoid mask in (0,1) with the shape of `x`. Frequency and time axes
    /// are zero-padded to a multiple of `2^depth` and cropped afterwards.
    pub fn mask<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x).to_vec();
        let unit = 1 << self.depth();
        let mut h = x;
        for axis in [1, 2] {
            let extra = shape[axis].next_multiple_of(unit) - shape[axis];
            if extra > 0 {
                h = cx.tape.pad(h, axis, 0, extra)?;
            }
        }
        let mut skips = vec![h];
        for block in &self.down {
            h = cx.tape.pool2d(h, Pool2dSpec::max(2))?;
            h = block.forward(cx, h)?;
            skips.push(h);
        }
        skips.pop();
        let mut up = self.up.iter();
        while let Some(skip) = skips.pop() {
            h = cx.tape.upsample2x(h)?;
            h = cx.tape.add(h, skip)?;
            if let Some(block) = up.next() {
                h = block.forward(cx, h)?;
            }
        }
        h = self.mask_out.forward(cx, h)?;
        h = cx.tape.sigmoid(h)?;
        for axis in [1, 2] {
            if cx.tape.shape(h)[axis] != shape[axis] {
                h = cx.tape.narrow(h, axis, 0, shape[axis])?;
            }
        }
        Ok(h)
    }

    /// Returns `(trunk, mask)`.
    pub fn parts<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<(Var, Var)> {
        let t = self.trunk(cx, x)?;
        let m = self.mask(cx, x)?;
        Ok((t, m))
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (t, m) = self.parts(cx, x)?;
        combine(cx.tape, t, m)
    }
}

/// `(1 + mask) * trunk`.
pub fn combine<T: Element>(tape: &mut Tape<T>, trunk: Var, mask: Var) -> Result<Var> {
    let gated = tape.mul(mask, trunk)?;
    Ok(tape.add(trunk, gated)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    Attention(ResidualAttention),
    Dilated(DilatedBlock),
}

impl Stage {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cfg: &ExtractorConfig) -> Self {
        match cfg.variant {
            Variant::Attention => Stage::Attention(ResidualAttention::new(store, rng, name, cfg)),
            Variant::Ablation => Stage::Dilated(DilatedBlock::new(store, rng, name, cfg, cfg.attention_channels)),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            Stage::Attention(a) => a.forward(cx, x),
            Stage::Dilated(d) => d.forward(cx, x),
        }
    }
}

/// Multiplier on the fan-in bound of the output head's weights.
const HEAD_INIT_SCALE: f64 = 0.1;

/// Layer graph of the extractor; parameter values live in a separate store.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorNet {
    pub cfg: ExtractorConfig,
    pub stem: Conv,
    pub front: Stage,
    pub widen: Conv,
    pub stack: DilatedStack,
    pub narrow: Conv,
    pub back: Stage,
    pub head: Conv,
}

impl ExtractorNet {
    pub fn build<T: Element>(cfg: &ExtractorConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(key(seed, &[0xe7]));
        let (a, d) = (cfg.attention_channels, cfg.dilated_channels);
        let stem = Conv::same(store, rng, "extractor.stem", (1, a), cfg.kernel, 1);
        let front = Stage::new(store, rng, "extractor.front", cfg);
        let widen = Conv::same(store, rng, "extractor.widen", (a, d), 1, 1);
        let stack = DilatedStack::new(store, rng, "extractor.dilated", cfg, d);
        let narrow = Conv::same(store, rng, "extractor.narrow", (d, a), 1, 1);
        let back = Stage::new(store, rng, "extractor.back", cfg);
        let head = Conv::same(store, rng, "extractor.head", (a, cfg.n_sources), 1, 1);
        // small head keeps the first steps from pushing softplus into its flat tail
        for w in store.value_mut(head.weight).data_mut() {
            *w = T::of(w.as_f64() * HEAD_INIT_SCALE);
        }
        ExtractorNet {
            cfg: cfg.clone(),
            stem,
            front,
            widen,
            stack,
            narrow,
            back,
            head,
        }
    }

    /// `[1, F, T]` compressed input to `[n_sources, F, T]` non-negative
    /// estimates.
    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let shape = cx.tape.shape(x);
        if shape.len() != 3 || shape[0] != 1 {
            return Err(Error::invalid(format!("extractor input must be [1, F, T], got {shape:?}")));
        }
        let h = self.stem.forward(cx, x)?;
        let h = self.front.forward(cx, h)?;
        let h = self.widen.forward(cx, h)?;
        let h = self.stack.forward(cx, h)?;
        let h = self.narrow.forward(cx, h)?;
        let h = self.back.forward(cx, h)?;
        let h = self.head.forward(cx, h)?;
        Ok(cx.tape.softplus(h)?)
    }
}

/// An extractor with its parameters.
#[derive(Debug, Clone)]
pub struct Extractor<T: Element> {
    pub net: ExtractorNet,
    pub store: ParamStore<T>,
}

impl<T: Element> Extractor<T> {
    pub fn new(cfg: &ExtractorConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let net = ExtractorNet::build(cfg, &mut store, seed);
        Extractor { net, store }
    }

    pub fn cfg(&self) -> &ExtractorConfig {
        &self.net.cfg
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.net.forward(&mut Ctx::new(tape, &self.store), x)
    }

    /// Runs the extractor on a compressed spectrogram without recording
    /// gradients for later use.
    pub fn extract(&self, x: &Spectrogram) -> Result<Vec<Spectrogram>> {
        if x.domain() != Domain::Compressed {
            return Err(Error::invalid("extractor expects a compressed spectrogram"));
        }
        let mut tape = Tape::new();
        let input = tape.constant(x.to_tensor());
        let y = self.forward(&mut tape, input)?;
        split_channels(tape.value(y), x.frames())
    }
}

/// Splits a `[C, F, T]` tensor into per-channel compressed spectrograms.
pub fn split_channels<T: Element>(y: &cocktail_tensor::Tensor<T>, frames: usize) -> Result<Vec<Spectrogram>> {
    let per = y.len() / y.shape()[0];
    y.data()
        .chunks(per)
        .map(|c| Spectrogram::new(Domain::Compressed, frames, c.iter().map(|v| v.as_f64()).collect()))
        .collect()
}
