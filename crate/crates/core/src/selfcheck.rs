//! Self-check suites: finite-difference gradient checks of every primitive
//! and composite block, a brute-force PIT oracle, and the max-pool
//! dominance inequality.

use std::fmt;
use std::time::Instant;

use cocktail_tensor::fault::flip_backward_sign;
use cocktail_tensor::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, Objective, Oracle, Probes};
use cocktail_tensor::suite::{primitive_cases, primitive_options};
use cocktail_tensor::{Element, OpKind, ParamId, ParamStore, Tape, Tensor, TensorError, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::classifier::{ClassifierConfig, ClassifierNet, PredictionMatrix};
use crate::dsp::BINS;
use crate::error::Result;
use crate::extractor::{DilatedBlock, ExtractorConfig, ResidualAttention};
use crate::layers::{Ctx, ResidualBlock};
use crate::objectives::{assigned_cce, joint_loss, maxpool_cce, pit_mse};

/// Tolerance for 64-bit primitive checks.
pub const PRIMITIVE_TOL: f64 = 1e-6;
/// Tolerance for 32-bit composite checks against a 64-bit oracle.
pub const COMPOSITE_TOL: f64 = 1e-3;
pub const COMPOSITE_PROBES: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Composite {
    ResidualBlock,
    HourglassMask,
    ResidualAttention,
    DilatedBlock,
    ConvClassifier,
    RecurrentClassifier,
}

impl Composite {
    pub const ALL: [Composite; 6] = [
        Composite::ResidualBlock,
        Composite::HourglassMask,
        Composite::ResidualAttention,
        Composite::DilatedBlock,
        Composite::ConvClassifier,
        Composite::RecurrentClassifier,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Composite::ResidualBlock => "residual_block",
            Composite::HourglassMask => "hourglass_mask",
            Composite::ResidualAttention => "residual_attention",
            Composite::DilatedBlock => "dilated_block",
            Composite::ConvClassifier => "classifier/convolutional",
            Composite::RecurrentClassifier => "classifier/recurrent",
        }
    }
}

enum Block {
    Residual(ResidualBlock),
    Attention { net: ResidualAttention, mask_only: bool },
    Dilated(DilatedBlock),
    Classifier(ClassifierNet),
}

/// A small instance of a composite block applied to a random input and
/// contracted with fixed random weights. The input is a parameter too, so
/// probes cover input gradients as well as weights.
pub struct CompositeCase {
    pub kind: Composite,
    block: Block,
    input: ParamId,
    seed: u64,
}

impl CompositeCase {
    /// Builds the block with f32 parameters.
    pub fn build(kind: Composite, seed: u64) -> (Self, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        // desk widths on small spatial extents
        let ecfg = ExtractorConfig::desk(2);
        let (c, d) = (ecfg.attention_channels, ecfg.dilated_channels);
        let (block, input_shape) = match kind {
            Composite::ResidualBlock => (Block::Residual(ResidualBlock::new(&mut store, rng, "res", c, c, ecfg.kernel)), vec![c, 6, 5]),
            Composite::HourglassMask | Composite::ResidualAttention => (
                Block::Attention {
                    net: ResidualAttention::new(&mut store, rng, "att", &ecfg),
                    mask_only: kind == Composite::HourglassMask,
                },
                vec![c, 9, 11],
            ),
            Composite::DilatedBlock => (Block::Dilated(DilatedBlock::new(&mut store, rng, "dil", &ecfg, d)), vec![d, 5, 9]),
            Composite::ConvClassifier => {
                let cfg = ClassifierConfig::desk(8);
                (Block::Classifier(ClassifierNet::build(&cfg, &mut store, rng.gen())), vec![2, BINS, 24])
            }
            Composite::RecurrentClassifier => {
                let cfg = ClassifierConfig::desk(8).recurrent();
                (Block::Classifier(ClassifierNet::build(&cfg, &mut store, rng.gen())), vec![2, BINS, 22])
            }
        };
        let input = Tensor::from_fn(input_shape, |_| rng.gen_range(-1.0f32..1.0));
        let input = store.add("input", input);
        (
            CompositeCase {
                kind,
                block,
                input,
                seed: rng.gen(),
            },
            store,
        )
    }

    /// 32-bit analytic gradient against 64-bit central differences on
    /// `probes` random coordinates.
    pub fn check(&self, store: &ParamStore<f32>, probes: usize) -> Result<GradCheckReport> {
        let opts = GradCheckOptions {
            eps: 1e-6,
            probes: Probes::Random {
                count: probes,
                seed: self.seed,
            },
            oracle: Oracle::F64,
            floor: 1e-3,
        };
        Ok(finite_diff_check(self, store, &opts)?)
    }
}

impl Objective for CompositeCase {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> cocktail_tensor::Result<Var> {
        let mut cx = Ctx::new(tape, params);
        let x = cx.p(self.input);
        let y = match &self.block {
            Block::Residual(b) => b.forward(&mut cx, x),
            Block::Attention { net, mask_only: true } => net.mask(&mut cx, x),
            Block::Attention { net, mask_only: false } => net.forward(&mut cx, x),
            Block::Dilated(b) => b.forward(&mut cx, x),
            Block::Classifier(c) => c.siamese_apply(&mut cx, x),
        }
        .map_err(|e| match e {
            crate::Error::Tensor(t) => t,
            other => TensorError::Shape {
                op: self.kind.name(),
                detail: other.to_string(),
            },
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let shape = tape.shape(y).to_vec();
        let w = tape.constant(Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0))));
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }
}

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] {}: {}", self.name, self.detail)
    }
}

#[derive(Debug, Clone, Default)]
pub struct SelfcheckReport {
    pub lines: Vec<CheckLine>,
}

impl SelfcheckReport {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.passed)
    }

    fn push(&mut self, name: impl Into<String>, passed: bool, detail: String) {
        self.lines.push(CheckLine {
            name: name.into(),
            passed,
            detail,
        });
    }
}

/// Worst relative error per primitive family over `per_primitive` random
/// shape draws at 64-bit.
pub fn primitive_gradients(seed: u64, per_primitive: usize) -> Result<Vec<(String, usize, f64)>> {
    let mut out: Vec<(String, usize, f64)> = Vec::new();
    for case in primitive_cases(seed, per_primitive) {
        let err = case.check::<f64>(&primitive_options())?.max_rel_err;
        let family = case.primitive.name().split('/').next().unwrap_or_default().to_string();
        match out.iter_mut().find(|(f, _, _)| *f == family) {
            Some((_, n, worst)) => {
                *n += 1;
                *worst = worst.max(err);
            }
            None => out.push((family, 1, err)),
        }
    }
    Ok(out)
}

/// Worst relative error of each composite block.
pub fn composite_gradients(seed: u64, probes: usize) -> Result<Vec<(Composite, f64)>> {
    Composite::ALL
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let (case, store) = CompositeCase::build(kind, seed.wrapping_add(k as u64));
            Ok((kind, case.check(&store, probes)?.max_rel_err))
        })
        .collect()
}

/// Exhaustive search written independently of [`pit_mse`]: recursive
/// enumeration in lexicographic order, errors summed straight from the data.
pub fn brute_force_pit(estimates: &[&[f64]], references: &[&[f64]]) -> (f64, Vec<usize>) {
    fn rec(
        est: &[&[f64]],
        refs: &[&[f64]],
        prefix: &mut Vec<usize>,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        let n = refs.len();
        if prefix.len() == n {
            let mut total = 0.0;
            for (i, &c) in prefix.iter().enumerate() {
                let mut s = 0.0;
                for (x, y) in est[c].iter().zip(refs[i]) {
                    s += (x - y) * (x - y);
                }
                total += s;
            }
            if best.as_ref().is_none_or(|(b, _)| total < *b) {
                *best = Some((total, prefix.clone()));
            }
            return;
        }
        for c in 0..n {
            if !prefix.contains(&c) {
                prefix.push(c);
                rec(est, refs, prefix, best);
                prefix.pop();
            }
        }
    }
    let mut best = None;
    rec(estimates, references, &mut Vec::new(), &mut best);
    let (total, perm) = best.expect("non-empty");
    (total / (references.len() * references[0].len()) as f64, perm)
}

/// Number of mismatches between [`pit_mse`] and [`brute_force_pit`] over
/// `instances` random cases for each `n` in 2..=4.
pub fn pit_oracle(seed: u64, instances: usize) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut mismatches) = (0, 0);
    for n in 2..=4 {
        for _ in 0..instances {
            let len = rng.gen_range(1..24);
            let draw = |rng: &mut ChaCha8Rng| -> Vec<Vec<f64>> {
                (0..n).map(|_| (0..len).map(|_| rng.gen_range(0.0..1.0)).collect()).collect()
            };
            let est = draw(&mut rng);
            let mut refs = draw(&mut rng);
            // occasional exact ties exercise the tie-break rule
            if rng.gen_bool(0.1) {
                refs[1] = refs[0].clone();
            }
            let e: Vec<&[f64]> = est.iter().map(Vec::as_slice).collect();
            let r: Vec<&[f64]> = refs.iter().map(Vec::as_slice).collect();
            let got = pit_mse(&e, &r)?;
            let (loss, perm) = brute_force_pit(&e, &r);
            checked += 1;
            if got.loss.to_bits() != loss.to_bits() || got.permutation != perm {
                mismatches += 1;
            }
        }
    }
    Ok((checked, mismatches))
}

/// Counts triples where max-pool CCE exceeds the CCE of a fixed
/// assignment, over `triples` random cases for each speaker count.
pub fn dominance(seed: u64, triples: usize, speaker_counts: &[usize]) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut checked, mut violations) = (0, 0);
    for &s in speaker_counts {
        for _ in 0..triples {
            let n = rng.gen_range(1..=s.min(4));
            let values: Vec<Vec<f64>> = {
                let cols: Vec<Vec<f64>> = (0..n)
                    .map(|_| {
                        let raw: Vec<f64> = (0..s).map(|_| rng.gen_range(-4.0f64..4.0).exp()).collect();
                        let z: f64 = raw.iter().sum();
                        raw.iter().map(|v| v / z).collect()
                    })
                    .collect();
                (0..s).map(|i| cols.iter().map(|c| c[i]).collect()).collect()
            };
            let pred = PredictionMatrix { values };
            let mut speakers: Vec<usize> = (0..s).collect::<Vec<_>>().choose_multiple(&mut rng, n).copied().collect();
            speakers.sort_unstable();
            let mut sigma: Vec<usize> = (0..n).collect();
            sigma.shuffle(&mut rng);
            let mut targets = vec![0.0; s];
            for &i in &speakers {
                targets[i] = 1.0;
            }
            checked += 1;
            if maxpool_cce(&pred, &targets)? > assigned_cce(&pred, &speakers, &sigma) {
                violations += 1;
            }
        }
    }
    Ok((checked, violations))
}

/// Runs every suite. With `fault`, the backward rule of that op is
/// sign-flipped for the gradient suites; they are expected to fail.
pub fn run(seed: u64, fault: Option<OpKind>) -> Result<SelfcheckReport> {
    let _guard = fault.map(flip_backward_sign);
    let mut report = SelfcheckReport::default();

    let t = Instant::now();
    for (family, cases, worst) in primitive_gradients(seed, 20)? {
        report.push(
            format!("gradient/{family}"),
            worst < PRIMITIVE_TOL,
            format!("{cases} cases at f64, max rel err {worst:.2e} (< {PRIMITIVE_TOL:e})"),
        );
    }
    for (kind, worst) in composite_gradients(seed, COMPOSITE_PROBES)? {
        report.push(
            format!("gradient/{}", kind.name()),
            worst < COMPOSITE_TOL,
            format!("{COMPOSITE_PROBES} probes f32 vs f64 oracle, max rel err {worst:.2e} (< {COMPOSITE_TOL:e})"),
        );
    }
    let grad_secs = t.elapsed().as_secs_f64();
    report.push("gradient/runtime", grad_secs < 180.0, format!("{grad_secs:.1}s (< 180s)"));

    let (checked, mismatches) = pit_oracle(seed, 500)?;
    report.push(
        "pit_oracle",
        mismatches == 0,
        format!("{mismatches} mismatches in {checked} instances (bit-equal loss, identical assignment)"),
    );
    let (checked, violations) = dominance(seed, 1000, &[4, 8, 20])?;
    report.push(
        "maxpool_dominance",
        violations == 0,
        format!("{violations} violations in {checked} triples"),
    );
    let scaled = joint_loss(0.19, 0.0, 20.0)?;
    report.push("loss_scale", scaled == 3.8, format!("20 * 0.19 + 0 = {scaled}"));
    Ok(report)
}
