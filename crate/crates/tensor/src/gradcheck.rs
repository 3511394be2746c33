//! Central-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::element::Element;
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

/// A scalar function of a parameter store, evaluable at any precision.
pub trait Objective {
    fn eval<T: Element>(&self, tape: &mut Tape<T>, params: &ParamStore<T>) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probes {
    /// Every scalar of every trainable parameter.
    All,
    /// `count` coordinates drawn uniformly over all trainable scalars.
    Random { count: usize, seed: u64 },
}

/// Precision used to evaluate the finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Oracle {
    /// Same precision as the analytic gradient.
    Same,
    /// Differences taken on an f64 copy of the parameters.
    F64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub eps: f64,
    pub probes: Probes,
    pub oracle: Oracle,
    /// Denominator floor of the relative error, so coordinates with a
    /// vanishing gradient are compared in absolute terms.
    pub floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            eps: 1e-6,
            probes: Probes::All,
            oracle: Oracle::Same,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ProbeResult {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub probes: Vec<ProbeResult>,
}

impl GradCheckReport {
    pub fn worst(&self) -> Option<&ProbeResult> {
        self.probes
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let diff = (a - b).abs();
    if diff == 0.0 {
        return 0.0;
    }
    diff / a.abs().max(b.abs()).max(floor)
}

fn loss_value<T: Element, O: Objective>(obj: &O, store: &ParamStore<T>) -> Result<f64> {
    let mut tape = Tape::new();
    let loss = obj.eval(&mut tape, store)?;
    Ok(tape.value(loss).sum_f64())
}

fn central_difference<U: Element, O: Objective>(
    obj: &O,
    store: &mut ParamStore<U>,
    id: ParamId,
    index: usize,
    eps: f64,
) -> Result<f64> {
    let orig = store.value(id).data()[index];
    store.value_mut(id).data_mut()[index] = U::of(orig.as_f64() + eps);
    let plus = loss_value(obj, store)?;
    store.value_mut(id).data_mut()[index] = U::of(orig.as_f64() - eps);
    let minus = loss_value(obj, store)?;
    store.value_mut(id).data_mut()[index] = orig;
    Ok((plus - minus) / (2.0 * eps))
}

/// Compares the tape's gradient of `obj` against central differences
/// `(f(p+eps) − f(p−eps)) / 2eps` on the selected coordinates.
pub fn finite_diff_check<T: Element, O: Objective>(
    obj: &O,
    store: &ParamStore<T>,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let mut analytic_store = store.clone();
    analytic_store.zero_grad();
    let mut tape = Tape::new();
    let loss = obj.eval(&mut tape, &analytic_store)?;
    let grads = tape.backward(loss)?;
    analytic_store.accumulate(&grads);

    let coords: Vec<(ParamId, usize)> = {
        let all: Vec<(ParamId, usize)> = store
            .ids()
            .filter(|&id| store.is_trainable(id))
            .flat_map(|id| (0..store.value(id).len()).map(move |i| (id, i)))
            .collect();
        match opts.probes {
            Probes::All => all,
            Probes::Random { count, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..count.min(all.len()))
                    .map(|_| all[rng.gen_range(0..all.len())])
                    .collect()
            }
        }
    };

    let mut same = store.clone();
    let mut wide = match opts.oracle {
        Oracle::F64 => Some(store.cast::<f64>()),
        Oracle::Same => None,
    };
    let mut probes = Vec::with_capacity(coords.len());
    for (id, index) in coords {
        let analytic = analytic_store.grad(id).data()[index].as_f64();
        let numeric = match wide.as_mut() {
            Some(w) => central_difference(obj, w, id, index, opts.eps)?,
            None => central_difference(obj, &mut same, id, index, opts.eps)?,
        };
        probes.push(ProbeResult {
            param: store.get(id).name.clone(),
            index,
            analytic,
            numeric,
            rel_err: relative_error(analytic, numeric, opts.floor),
        });
    }
    let max_rel_err = probes.iter().map(|p| p.rel_err).fold(0.0, f64::max);
    Ok(GradCheckReport { max_rel_err, probes })
}
