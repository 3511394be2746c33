//! Siamese per-channel speaker classifiers: a residual convolutional
//! network with global pooling, and a chunked bidirectional LSTM.

use cocktail_tensor::{Conv2dSpec, Element, ParamStore, Pool2dSpec, PoolMode, ReduceMode, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::key;
use crate::dsp::{Domain, Spectrogram, BINS};
use crate::error::{Error, Result};
use crate::layers::{Conv, Ctx, Dense};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierVariant {
    Convolutional,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalPool {
    Avg,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResNetPreset {
    /// 3x3 stride-2 stem and one basic block per stage, widths 8..64.
    Resnet10,
    /// 7x7 stem, max-pool, blocks [3, 4, 6, 3], widths 64..512.
    Resnet34,
}

impl ResNetPreset {
    fn layout(self) -> (usize, usize, bool, [usize; 4], [usize; 4]) {
        // (stem kernel, stem width, stem pool, blocks, widths)
        match self {
            ResNetPreset::Resnet10 => (3, 8, false, [1, 1, 1, 1], [8, 16, 32, 64]),
            ResNetPreset::Resnet34 => (7, 64, true, [3, 4, 6, 3], [64, 128, 256, 512]),
        }
    }

    /// Weighted layers: stem, two per basic block, and the output affine.
    pub fn depth(self) -> usize {
        let (_, _, _, blocks, _) = self.layout();
        2 + 2 * blocks.iter().sum::<usize>()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub variant: ClassifierVariant,
    pub n_speakers: usize,
    pub resnet: ResNetPreset,
    pub pooling: GlobalPool,
    pub chunk_frames: usize,
    pub chunk_shift_frames: usize,
    pub rnn_hidden: usize,
    pub rnn_layers: usize,
    pub fc_hidden: usize,
    pub fc_layers: usize,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self::desk(8)
    }
}

impl ClassifierConfig {
    pub fn desk(n_speakers: usize) -> Self {
        ClassifierConfig {
            variant: ClassifierVariant::Convolutional,
            n_speakers,
            resnet: ResNetPreset::Resnet10,
            pooling: GlobalPool::Avg,
            chunk_frames: 20,
            chunk_shift_frames: 1,
            rnn_hidden: 32,
            rnn_layers: 2,
            fc_hidden: 64,
            fc_layers: 3,
        }
    }

    pub fn reference(n_speakers: usize) -> Self {
        ClassifierConfig {
            resnet: ResNetPreset::Resnet34,
            rnn_hidden: 200,
            rnn_layers: 3,
            fc_hidden: 800,
            ..Self::desk(n_speakers)
        }
    }

    pub fn recurrent(mut self) -> Self {
        self.variant = ClassifierVariant::Recurrent;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("classifier: {m}")));
        if self.n_speakers < 2 {
            return bad("n_speakers must be at least 2");
        }
        if self.chunk_frames == 0 || self.chunk_shift_frames == 0 {
            return bad("chunk_frames and chunk_shift_frames must be positive");
        }
        if self.rnn_hidden == 0 || self.rnn_layers == 0 || self.fc_hidden == 0 || self.fc_layers == 0 {
            return bad("recurrent sizes must be positive");
        }
        Ok(())
    }
}

/// Start frames of sliding chunks.
pub fn chunk_starts(frames: usize, chunk: usize, shift: usize) -> Result<Vec<usize>> {
    if chunk == 0 || shift == 0 || frames < chunk {
        return Err(Error::invalid(format!("{frames} frames cannot hold a {chunk}-frame chunk")));
    }
    Ok((0..=(frames - chunk) / shift).map(|k| k * shift).collect())
}

pub fn chunk(x: &Spectrogram, chunk: usize, shift: usize) -> Result<Vec<Spectrogram>> {
    chunk_starts(x.frames(), chunk, shift)?
        .into_iter()
        .map(|s| {
            let data = (0..BINS).flat_map(|b| (s..s + chunk).map(move |t| (b, t))).map(|(b, t)| x.get(b, t)).collect();
            Spectrogram::new(x.domain(), chunk, data)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasicBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub shortcut: Option<Conv>,
}

impl BasicBlock {
    fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = cx.tape.relu(h)?;
        let h = self.conv2.forward(cx, h)?;
        let s = match &self.shortcut {
            Some(c) => c.forward(cx, x)?,
            None => x,
        };
        let h = cx.tape.add(h, s)?;
        Ok(cx.tape.relu(h)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResNet {
    pub stem: Conv,
    pub stem_pool: bool,
    pub blocks: Vec<BasicBlock>,
    pub pooling: GlobalPool,
    pub out: Dense,
    pub n_speakers: usize,
}

impl ResNet {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ClassifierConfig) -> Self {
        let (k, stem_width, stem_pool, counts, widths) = cfg.resnet.layout();
        let stem = Conv::new(store, rng, "classifier.stem", (1, stem_width), k, Conv2dSpec::strided(2, k / 2));
        let mut blocks = Vec::new();
        let mut cin = stem_width;
        for (stage, (&n, &w)) in counts.iter().zip(&widths).enumerate() {
            for b in 0..n {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                let name = format!("classifier.stage{stage}.block{b}");
                let conv1 = Conv::new(store, rng, &format!("{name}.conv1"), (cin, w), 3, Conv2dSpec::strided(stride, 1));
                let conv2 = Conv::same(store, rng, &format!("{name}.conv2"), (w, w), 3, 1);
                let shortcut = (stride != 1 || cin != w).then(|| {
                    Conv::new(store, rng, &format!("{name}.shortcut"), (cin, w), 1, Conv2dSpec::strided(stride, 0))
                });
                blocks.push(BasicBlock { conv1, conv2, shortcut });
                cin = w;
            }
        }
        let out = Dense::new(store, rng, "classifier.out", cin, cfg.n_speakers);
        ResNet {
            stem,
            stem_pool,
            blocks,
            pooling: cfg.pooling,
            out,
            n_speakers: cfg.n_speakers,
        }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(cx, x)?;
        h = cx.tape.relu(h)?;
        if self.stem_pool {
            h = cx.tape.pool2d(h, Pool2dSpec::max(2))?;
        }
        for b in &self.blocks {
            h = b.forward(cx, h)?;
        }
        let s = cx.tape.shape(h).to_vec();
        let mode = match self.pooling {
            GlobalPool::Avg => PoolMode::Avg,
            GlobalPool::Max => PoolMode::Max,
        };
        let spec = Pool2dSpec {
            mode,
            window: (s[1], s[2]),
            stride: (s[1], s[2]),
        };
        h = cx.tape.pool2d(h, spec)?;
        h = cx.tape.reshape(h, &[1, s[0]])?;
        h = self.out.forward(cx, h)?;
        h = cx.tape.softmax(h, 1)?;
        Ok(cx.tape.reshape(h, &[self.n_speakers])?)
    }
}

/// One direction of one LSTM layer; gates ordered i, f, g, o.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input: Dense,
    pub recurrent: cocktail_tensor::ParamId,
    pub hidden: usize,
}

impl LstmCell {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, din: usize, hidden: usize) -> Self {
        let input = Dense::new(store, rng, &format!("{name}.input"), din, 4 * hidden);
        // forget-gate bias starts at 1
        let b = store.value_mut(input.bias);
        b.data_mut()[hidden..2 * hidden].iter_mut().for_each(|v| *v = T::one());
        let recurrent = store.add_uniform(
            format!("{name}.recurrent"),
            &[hidden, 4 * hidden],
            crate::layers::fan_in_bound(hidden),
            rng,
        );
        LstmCell { input, recurrent, hidden }
    }

    /// Runs over `xs` (each `[N, din]`) in the given order; returns hidden
    /// states in the same order.
    fn run<T: Element>(&self, cx: &mut Ctx<T>, xs: &[Var], reverse: bool) -> Result<Vec<Var>> {
        let h = self.hidden;
        let n = cx.tape.shape(xs[0])[0];
        let wr = cx.p(self.recurrent);
        let mut state: Option<(Var, Var)> = None;
        let mut out = vec![None; xs.len()];
        let order: Vec<usize> = if reverse { (0..xs.len()).rev().collect() } else { (0..xs.len()).collect() };
        for t in order {
            let mut z = self.input.forward(cx, xs[t])?;
            if let Some((hp, _)) = state {
                let r = cx.tape.affine(hp, wr, None)?;
                z = cx.tape.add(z, r)?;
            }
            let gate = |cx: &mut Ctx<T>, k: usize| cx.tape.narrow(z, 1, k * h, h);
            let (i, f, g, o) = (gate(cx, 0)?, gate(cx, 1)?, gate(cx, 2)?, gate(cx, 3)?);
            let i = cx.tape.sigmoid(i)?;
            let g = cx.tape.tanh(g)?;
            let o = cx.tape.sigmoid(o)?;
            let mut c = cx.tape.mul(i, g)?;
            if let Some((_, cp)) = state {
                let f = cx.tape.sigmoid(f)?;
                let keep = cx.tape.mul(f, cp)?;
                c = cx.tape.add(c, keep)?;
            }
            let tc = cx.tape.tanh(c)?;
            let hn = cx.tape.mul(o, tc)?;
            debug_assert_eq!(cx.tape.shape(hn), &[n, h]);
            state = Some((hn, c));
            out[t] = Some(hn);
        }
        Ok(out.into_iter().map(|v| v.expect("every step visited")).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecurrentNet {
    /// `(forward, backward)` cells per layer.
    pub layers: Vec<(LstmCell, LstmCell)>,
    pub head: Vec<Dense>,
    pub chunk_frames: usize,
    pub chunk_shift: usize,
}

impl RecurrentNet {
    fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, cfg: &ClassifierConfig) -> Self {
        let h = cfg.rnn_hidden;
        let layers = (0..cfg.rnn_layers)
            .map(|l| {
                let din = if l == 0 { BINS } else { 2 * h };
                (
                    LstmCell::new(store, rng, &format!("classifier.lstm{l}.fwd"), din, h),
                    LstmCell::new(store, rng, &format!("classifier.lstm{l}.bwd"), din, h),
                )
            })
            .collect();
        let head = (0..cfg.fc_layers)
            .map(|l| {
                let din = if l == 0 { 2 * h } else { cfg.fc_hidden };
                let dout = if l + 1 == cfg.fc_layers { cfg.n_speakers } else { cfg.fc_hidden };
                Dense::new(store, rng, &format!("classifier.fc{l}"), din, dout)
            })
            .collect();
        RecurrentNet {
            layers,
            head,
            chunk_frames: cfg.chunk_frames,
            chunk_shift: cfg.chunk_shift_frames,
        }
    }

    /// Softmax output of every chunk, `[n_chunks, n_speakers]`.
    pub fn chunk_probabilities<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        let (bins, frames) = (s[1], s[2]);
        let starts = chunk_starts(frames, self.chunk_frames, self.chunk_shift)?;
        let plane = cx.tape.reshape(x, &[bins, frames])?;
        let rows = cx.tape.transpose(plane)?;
        // step t of every chunk at once: rows start_k + t
        let mut xs = Vec::with_capacity(self.chunk_frames);
        for t in 0..self.chunk_frames {
            let step = if self.chunk_shift == 1 {
                cx.tape.narrow(rows, 0, t, starts.len())?
            } else {
                let picked = starts
                    .iter()
                    .map(|&k| cx.tape.narrow(rows, 0, k + t, 1))
                    .collect::<Result<Vec<_>, _>>()?;
                cx.tape.concat(&picked, 0)?
            };
            xs.push(step);
        }
        let mut finals = (xs[0], xs[0]);
        for (fwd, bwd) in &self.layers {
            let hf = fwd.run(cx, &xs, false)?;
            let hb = bwd.run(cx, &xs, true)?;
            finals = (*hf.last().expect("non-empty chunk"), hb[0]);
            xs = hf
                .iter()
                .zip(&hb)
                .map(|(&a, &b)| cx.tape.concat(&[a, b], 1))
                .collect::<Result<Vec<_>, _>>()?;
        }
        let mut h = cx.tape.concat(&[finals.0, finals.1], 1)?;
        for (l, d) in self.head.iter().enumerate() {
            h = d.forward(cx, h)?;
            if l + 1 < self.head.len() {
                h = cx.tape.relu(h)?;
            }
        }
        Ok(cx.tape.softmax(h, 1)?)
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let p = self.chunk_probabilities(cx, x)?;
        Ok(cx.tape.reduce(p, ReduceMode::Mean, &[0])?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierNet {
    Convolutional(ResNet),
    Recurrent(RecurrentNet),
}

impl ClassifierNet {
    pub fn build<T: Element>(cfg: &ClassifierConfig, store: &mut ParamStore<T>, seed: u64) -> Self {
        let rng = &mut ChaCha8Rng::seed_from_u64(key(seed, &[0xc1a5]));
        match cfg.variant {
            ClassifierVariant::Convolutional => ClassifierNet::Convolutional(ResNet::new(store, rng, cfg)),
            ClassifierVariant::Recurrent => ClassifierNet::Recurrent(RecurrentNet::new(store, rng, cfg)),
        }
    }

    /// `[1, F, T]` spectrogram to a probability vector `[n_speakers]`.
    pub fn classify<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        match self {
            ClassifierNet::Convolutional(r) => r.forward(cx, x),
            ClassifierNet::Recurrent(r) => r.forward(cx, x),
        }
    }

    /// Applies the same classifier to every channel of `[C, F, T]`; returns
    /// `[C, n_speakers]` (row c = distribution for channel c).
    pub fn siamese_apply<T: Element>(&self, cx: &mut Ctx<T>, channels: Var) -> Result<Var> {
        let c = cx.tape.shape(channels)[0];
        let rows = (0..c)
            .map(|k| {
                let x = cx.tape.narrow(channels, 0, k, 1)?;
                let p = self.classify(cx, x)?;
                let n = cx.tape.shape(p)[0];
                Ok(cx.tape.reshape(p, &[1, n])?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(cx.tape.concat(&rows, 0)?)
    }
}

#[derive(Debug, Clone)]
pub struct Classifier<T: Element> {
    pub cfg: ClassifierConfig,
    pub net: ClassifierNet,
    pub store: ParamStore<T>,
}

impl<T: Element> Classifier<T> {
    pub fn new(cfg: &ClassifierConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let net = ClassifierNet::build(cfg, &mut store, seed);
        Classifier {
            cfg: cfg.clone(),
            net,
            store,
        }
    }

    pub fn siamese_apply(&self, tape: &mut Tape<T>, channels: Var) -> Result<Var> {
        self.net.siamese_apply(&mut Ctx::new(tape, &self.store), channels)
    }

    /// Prediction matrix for a list of spectrograms (one per channel).
    pub fn predict(&self, channels: &[Spectrogram]) -> Result<PredictionMatrix> {
        let frames = channels.first().ok_or_else(|| Error::invalid("no channels"))?.frames();
        let mut data = Vec::new();
        for c in channels {
            if c.domain() != Domain::Compressed || c.frames() != frames {
                return Err(Error::invalid("channels must be compressed and equally long"));
            }
            data.extend_from_slice(c.data());
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(vec![channels.len(), BINS, frames], &data)?);
        let p = self.siamese_apply(&mut tape, x)?;
        Ok(PredictionMatrix::from_tensor(tape.value(p)))
    }
}

/// `values[i][c]` = probability that channel c is speaker i.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionMatrix {
    pub values: Vec<Vec<f64>>,
}

impl PredictionMatrix {
    /// From a `[C, S]` tensor as produced by `siamese_apply`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        let (c, s) = (t.shape()[0], t.shape()[1]);
        let d = t.data();
        PredictionMatrix {
            values: (0..s).map(|i| (0..c).map(|k| d[k * s + i].as_f64()).collect()).collect(),
        }
    }

    pub fn n_speakers(&self) -> usize {
        self.values.len()
    }

    pub fn n_channels(&self) -> usize {
        self.values.first().map_or(0, Vec::len)
    }

    /// `[C, S]` layout.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (s, c) = (self.n_speakers(), self.n_channels());
        Tensor::from_fn(vec![c, s], |k| T::of(self.values[k % s][k / s]))
    }

    /// `p_i = max_c y[i][c]`.
    pub fn pooled(&self) -> Vec<f64> {
        self.values.iter().map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max)).collect()
    }
}
