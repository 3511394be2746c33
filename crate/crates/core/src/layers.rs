//! Parameterized layers. Layers hold only parameter ids; values live in a
//! [`ParamStore`] passed at forward time, so the same layer graph can be run
//! at any precision.

use std::collections::HashMap;

use cocktail_tensor::{Conv2dSpec, Element, ParamId, ParamStore, Tape, Var};
use rand::Rng;

use crate::error::Result;

/// A tape plus the store its parameters come from. Each parameter is put
/// on the tape once per context.
pub struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    store: &'a ParamStore<T>,
    bound: HashMap<ParamId, Var>,
}

impl<'a, T: Element> Ctx<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, store: &'a ParamStore<T>) -> Self {
        Ctx {
            tape,
            store,
            bound: HashMap::new(),
        }
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.tape.param(self.store, id);
        self.bound.insert(id, v);
        v
    }
}

/// Variance-1/fan_in uniform initialisation.
pub fn fan_in_bound(fan_in: usize) -> f64 {
    (3.0 / fan_in as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub spec: Conv2dSpec,
}

impl Conv {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        (cin, cout): (usize, usize),
        kernel: usize,
        spec: Conv2dSpec,
    ) -> Self {
        let bound = fan_in_bound(cin * kernel * kernel);
        Conv {
            weight: store.add_uniform(format!("{name}.weight"), &[cout, cin, kernel, kernel], bound, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[cout]),
            spec,
        }
    }

    /// Stride 1, same padding.
    pub fn same<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        channels: (usize, usize),
        kernel: usize,
        dilation: usize,
    ) -> Self {
        let spec = Conv2dSpec::same((kernel, kernel), (dilation, dilation));
        Self::new(store, rng, name, channels, kernel, spec)
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        Ok(cx.tape.conv2d(x, w, Some(b), self.spec)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Element>(store: &mut ParamStore<T>, rng: &mut impl Rng, name: &str, din: usize, dout: usize) -> Self {
        Dense {
            weight: store.add_uniform(format!("{name}.weight"), &[din, dout], fan_in_bound(din), rng),
            bias: store.add_zeros(format!("{name}.bias"), &[dout]),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let (w, b) = (cx.p(self.weight), cx.p(self.bias));
        Ok(cx.tape.affine(x, w, Some(b))?)
    }
}

/// `x + conv(relu(conv(x)))`, with a 1x1 projection on the skip path when
/// the channel count changes.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub conv1: Conv,
    pub conv2: Conv,
    pub proj: Option<Conv>,
}

impl ResidualBlock {
    pub fn new<T: Element>(
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
    ) -> Self {
        ResidualBlock {
            conv1: Conv::same(store, rng, &format!("{name}.conv1"), (cin, cout), kernel, 1),
            conv2: Conv::same(store, rng, &format!("{name}.conv2"), (cout, cout), kernel, 1),
            proj: (cin != cout).then(|| Conv::same(store, rng, &format!("{name}.proj"), (cin, cout), 1, 1)),
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<T>, x: Var) -> Result<Var> {
        let h = self.conv1.forward(cx, x)?;
        let h = cx.tape.relu(h)?;
        let h = self.conv2.forward(cx, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(cx, x)?,
            None => x,
        };
        Ok(cx.tape.add(skip, h)?)
    }
}
