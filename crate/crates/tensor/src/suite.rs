//! Randomized finite-difference cases covering every differentiable
//! primitive. Each case feeds random inputs (as parameters) through one op
//! and contracts the result with a fixed random weighting into a scalar.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::Result;
use crate::gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport, Objective, Oracle, Probes};
use crate::kernels::{Conv2dSpec, Pool2dSpec, PoolMode};
use crate::params::ParamStore;
use crate::tape::{ReduceMode, Tape, Unary, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum Primitive {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Pointwise(Unary),
    LogClamped,
    Conv2d { spec: Conv2dSpec, kernel: (usize, usize), out_channels: usize, bias: bool },
    Pool2d(Pool2dSpec),
    Upsample2x,
    Affine { out: usize },
    Softmax { axis: usize },
    ChannelMax,
    Reduce { mode: ReduceMode, axes: Vec<usize> },
    Narrow { axis: usize, start: usize, len: usize },
    Pad { axis: usize, before: usize, after: usize },
    Concat { axis: usize },
    Transpose,
}

impl Primitive {
    pub fn name(&self) -> String {
        match self {
            Primitive::Pointwise(u) => format!("pointwise/{u:?}").to_lowercase(),
            Primitive::Conv2d { spec, .. } => format!("conv2d/d{}x{}", spec.dilation.0, spec.dilation.1),
            Primitive::Pool2d(p) => format!("pool2d/{:?}", p.mode).to_lowercase(),
            Primitive::Reduce { mode, .. } => format!("reduce/{mode:?}").to_lowercase(),
            other => format!("{other:?}")
                .split(|c: char| !c.is_alphanumeric())
                .next()
                .unwrap_or_default()
                .to_lowercase(),
        }
    }
}

/// One primitive applied to concrete input shapes.
#[derive(Debug, Clone)]
pub struct PrimitiveCase {
    pub primitive: Primitive,
    pub inputs: Vec<Vec<usize>>,
    pub seed: u64,
}

impl Objective for PrimitiveCase {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var> {
        let xs: Vec<Var> = params.ids().map(|id| tape.param(params, id)).collect();
        let y = match &self.primitive {
            Primitive::Add => tape.add(xs[0], xs[1])?,
            Primitive::Sub => tape.sub(xs[0], xs[1])?,
            Primitive::Mul => tape.mul(xs[0], xs[1])?,
            Primitive::Scale(c) => tape.scale(xs[0], *c)?,
            Primitive::Pointwise(u) => tape.unary(*u, xs[0])?,
            Primitive::LogClamped => tape.log_clamped(xs[0], 1e-12)?,
            Primitive::Conv2d { spec, .. } => tape.conv2d(xs[0], xs[1], xs.get(2).copied(), *spec)?,
            Primitive::Pool2d(spec) => tape.pool2d(xs[0], *spec)?,
            Primitive::Upsample2x => tape.upsample2x(xs[0])?,
            Primitive::Affine { .. } => tape.affine(xs[0], xs[1], xs.get(2).copied())?,
            Primitive::Softmax { axis } => tape.softmax(xs[0], *axis)?,
            Primitive::ChannelMax => tape.channel_max(xs[0])?,
            Primitive::Reduce { mode, axes } => tape.reduce(xs[0], *mode, axes)?,
            Primitive::Narrow { axis, start, len } => tape.narrow(xs[0], *axis, *start, *len)?,
            Primitive::Pad { axis, before, after } => tape.pad(xs[0], *axis, *before, *after)?,
            Primitive::Concat { axis } => tape.concat(&xs, *axis)?,
            Primitive::Transpose => tape.transpose(xs[0])?,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        let shape = tape.shape(y).to_vec();
        let w = Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)));
        let w = tape.constant(w);
        let p = tape.mul(y, w)?;
        tape.sum_all(p)
    }
}

impl PrimitiveCase {
    /// Random inputs in a range valid for the primitive's domain.
    pub fn params<T: Element>(&self) -> ParamStore<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let (lo, hi) = match self.primitive {
            Primitive::Pointwise(Unary::Log1p) => (-0.5, 2.0),
            Primitive::LogClamped => (0.2, 2.0),
            _ => (-1.0, 1.0),
        };
        let mut store = ParamStore::new();
        for (k, shape) in self.inputs.iter().enumerate() {
            let t = Tensor::from_fn(shape.clone(), |_| T::of(rng.gen_range(lo..hi)));
            store.add(format!("in{k}"), t);
        }
        store
    }

    pub fn check<T: Element>(&self, opts: &GradCheckOptions) -> Result<GradCheckReport> {
        finite_diff_check(self, &self.params::<T>(), opts)
    }
}

/// Options used for the 64-bit primitive suite.
pub fn primitive_options() -> GradCheckOptions {
    GradCheckOptions {
        eps: 1e-5,
        probes: Probes::All,
        oracle: Oracle::Same,
        floor: 1e-3,
    }
}

/// `per_primitive` random shape draws for each differentiable primitive.
pub fn primitive_cases(seed: u64, per_primitive: usize) -> Vec<PrimitiveCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cases = Vec::new();
    let mut push = |primitive: Primitive, inputs: Vec<Vec<usize>>, rng: &mut ChaCha8Rng| {
        cases.push(PrimitiveCase {
            primitive,
            inputs,
            seed: rng.gen(),
        })
    };
    for _ in 0..per_primitive {
        let r = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
        let s = vec![r(&mut rng, 1, 4), r(&mut rng, 1, 5), r(&mut rng, 1, 5)];
        push(Primitive::Add, vec![s.clone(), s.clone()], &mut rng);
        push(Primitive::Sub, vec![s.clone(), s.clone()], &mut rng);
        push(Primitive::Mul, vec![s.clone(), s.clone()], &mut rng);
        push(Primitive::Scale(rng.gen_range(-2.0..2.0)), vec![s.clone()], &mut rng);
        for u in Unary::ALL {
            push(Primitive::Pointwise(u), vec![s.clone()], &mut rng);
        }
        push(Primitive::LogClamped, vec![s.clone()], &mut rng);

        let cin = r(&mut rng, 1, 3);
        let cout = r(&mut rng, 1, 3);
        let k = [1, 3][r(&mut rng, 0, 1)];
        let dil = [1, 2, 4][r(&mut rng, 0, 2)];
        let spec = if r(&mut rng, 0, 2) == 0 {
            Conv2dSpec::strided(2, 1)
        } else {
            Conv2dSpec::same((k, k), (dil, dil))
        };
        let (h, w) = (r(&mut rng, 3, 9), r(&mut rng, 3, 9));
        let bias = rng.gen_bool(0.7);
        let mut inputs = vec![vec![cin, h, w], vec![cout, cin, k, k]];
        if bias {
            inputs.push(vec![cout]);
        }
        push(
            Primitive::Conv2d {
                spec,
                kernel: (k, k),
                out_channels: cout,
                bias,
            },
            inputs,
            &mut rng,
        );

        let win = r(&mut rng, 1, 3);
        let pool_in = vec![r(&mut rng, 1, 3), r(&mut rng, win, 8), r(&mut rng, win, 8)];
        let mode = if rng.gen_bool(0.5) { PoolMode::Max } else { PoolMode::Avg };
        push(
            Primitive::Pool2d(Pool2dSpec {
                mode,
                window: (win, win),
                stride: (win, win),
            }),
            vec![pool_in],
            &mut rng,
        );
        push(Primitive::Upsample2x, vec![s.clone()], &mut rng);

        let (n, din, dout) = (r(&mut rng, 1, 4), r(&mut rng, 1, 5), r(&mut rng, 1, 5));
        let mut inputs = vec![vec![n, din], vec![din, dout]];
        if rng.gen_bool(0.7) {
            inputs.push(vec![dout]);
        }
        push(Primitive::Affine { out: dout }, inputs, &mut rng);

        push(Primitive::Softmax { axis: r(&mut rng, 0, 2) }, vec![s.clone()], &mut rng);
        push(Primitive::ChannelMax, vec![vec![r(&mut rng, 1, 4), r(&mut rng, 1, 6)]], &mut rng);
        let axes: Vec<usize> = (0..3).filter(|_| rng.gen_bool(0.5)).collect();
        let axes = if axes.is_empty() { vec![1] } else { axes };
        let mode = if rng.gen_bool(0.5) { ReduceMode::Sum } else { ReduceMode::Mean };
        push(Primitive::Reduce { mode, axes }, vec![s.clone()], &mut rng);

        let axis = r(&mut rng, 0, 2);
        let start = r(&mut rng, 0, s[axis] - 1);
        let len = r(&mut rng, 1, s[axis] - start);
        push(Primitive::Narrow { axis, start, len }, vec![s.clone()], &mut rng);
        push(
            Primitive::Pad {
                axis,
                before: r(&mut rng, 0, 2),
                after: r(&mut rng, 0, 2),
            },
            vec![s.clone()],
            &mut rng,
        );
        let mut other = s.clone();
        other[axis] = r(&mut rng, 1, 3);
        push(Primitive::Concat { axis }, vec![s.clone(), other], &mut rng);
        push(Primitive::Transpose, vec![vec![s[0], s[1]]], &mut rng);
    }
    cases
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_cover_every_primitive_kind() {
        let names: std::collections::BTreeSet<String> =
            primitive_cases(1, 3).iter().map(|c| c.primitive.name()).collect();
        for expected in ["add", "mul", "affine", "softmax", "channelmax", "upsample2x", "pointwise/softplus"] {
            assert!(names.contains(expected), "{expected} missing from {names:?}");
        }
    }
}
