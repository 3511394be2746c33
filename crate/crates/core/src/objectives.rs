//! Losses and metrics: permutation-invariant MSE, channel-max-pooled
//! cross entropy, the joint loss and M-of-N identification accuracy.

use cocktail_tensor::{Element, Tape, Var};

use crate::classifier::PredictionMatrix;
use crate::error::{Error, Result};

/// Lower clamp applied inside every log.
pub const LOG_FLOOR: f64 = 1e-12;

/// Largest source count handled by exhaustive permutation search.
pub const MAX_SOURCES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    /// Mean squared error per element under the best assignment.
    pub loss: f64,
    /// `permutation[i]` is the estimate channel assigned to reference `i`.
    pub permutation: Vec<usize>,
    /// `table[i][c]`: summed squared error between reference `i` and
    /// channel `c`.
    pub table: Vec<Vec<f64>>,
}

/// Sum of squared differences, accumulated in index order.
pub fn squared_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + (x - y) * (x - y))
}

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut p: Vec<usize> = (0..n).collect();
    let mut out = vec![p.clone()];
    loop {
        let Some(i) = (1..n).rev().find(|&i| p[i - 1] < p[i]) else {
            return out;
        };
        let j = (i..n).rev().find(|&j| p[j] > p[i - 1]).expect("successor exists");
        p.swap(i - 1, j);
        p[i..].reverse();
        out.push(p.clone());
    }
}

/// Exhaustive minimum over assignments; ties keep the lexicographically
/// first permutation.
pub fn pit_mse(estimates: &[&[f64]], references: &[&[f64]]) -> Result<PitResult> {
    let n = references.len();
    if n == 0 || n > MAX_SOURCES || estimates.len() != n {
        return Err(Error::invalid(format!(
            "pit_mse needs 1..={MAX_SOURCES} channels per side, got {} estimates for {n} references",
            estimates.len()
        )));
    }
    let len = references[0].len();
    if estimates.iter().chain(references).any(|s| s.len() != len) || len == 0 {
        return Err(Error::invalid("pit_mse spectrogram sizes differ"));
    }
    let table: Vec<Vec<f64>> = references
        .iter()
        .map(|r| estimates.iter().map(|e| squared_error(e, r)).collect())
        .collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in permutations(n) {
        let total = (0..n).fold(0.0, |acc, i| acc + table[i][perm[i]]);
        if best.as_ref().map_or(true, |(b, _)| total < *b) {
            best = Some((total, perm));
        }
    }
    let (total, permutation) = best.expect("at least one permutation");
    Ok(PitResult {
        loss: total / (n * len) as f64,
        permutation,
        table,
    })
}

/// Differentiable PIT-MSE between `[n, F, T]` estimates and references.
/// The assignment is chosen on the recorded values; the gradient flows
/// only through the selected pairs.
pub fn pit_mse_tape<T: Element>(tape: &mut Tape<T>, estimates: Var, references: Var) -> Result<(Var, PitResult)> {
    let (es, rs) = (tape.shape(estimates).to_vec(), tape.shape(references).to_vec());
    if es != rs {
        return Err(Error::invalid(format!("pit_mse shape mismatch {es:?} vs {rs:?}")));
    }
    let n = es[0];
    let per = tape.value(estimates).len() / n;
    let ev = tape.value(estimates).to_f64_vec();
    let rv = tape.value(references).to_f64_vec();
    let e: Vec<&[f64]> = ev.chunks(per).collect();
    let r: Vec<&[f64]> = rv.chunks(per).collect();
    let result = pit_mse(&e, &r)?;
    let ordered = if result.permutation.iter().enumerate().all(|(i, &c)| i == c) {
        estimates
    } else {
        let parts = result
            .permutation
            .iter()
            .map(|&c| tape.narrow(estimates, 0, c, 1))
            .collect::<Result<Vec<_>, _>>()?;
        tape.concat(&parts, 0)?
    };
    let d = tape.sub(ordered, references)?;
    let sq = tape.mul(d, d)?;
    let total = tape.sum_all(sq)?;
    let loss = tape.scale(total, 1.0 / (n * per) as f64)?;
    Ok((loss, result))
}

fn check_targets(targets: &[f64], n_speakers: usize) -> Result<()> {
    if targets.len() != n_speakers {
        return Err(Error::invalid(format!("{} targets for {n_speakers} speakers", targets.len())));
    }
    if !targets.iter().any(|&y| y > 0.0) {
        return Err(Error::invalid("empty target set"));
    }
    Ok(())
}

/// `-sum_i y_i log(max(max_c yhat[i][c], 1e-12))`.
pub fn maxpool_cce(pred: &PredictionMatrix, targets: &[f64]) -> Result<f64> {
    check_targets(targets, pred.n_speakers())?;
    Ok(pred
        .pooled()
        .iter()
        .zip(targets)
        .fold(0.0, |acc, (&p, &y)| acc - y * p.max(LOG_FLOOR).ln()))
}

/// Differentiable max-pool CCE of `[C, S]` probabilities.
pub fn maxpool_cce_tape<T: Element>(tape: &mut Tape<T>, probs: Var, targets: &[f64]) -> Result<Var> {
    let s = tape.shape(probs)[1];
    check_targets(targets, s)?;
    let pooled = tape.channel_max(probs)?;
    let logs = tape.log_clamped(pooled, LOG_FLOOR)?;
    let neg_y = tape.constant(cocktail_tensor::Tensor::from_fn(vec![s], |i| T::of(-targets[i])));
    let terms = tape.mul(logs, neg_y)?;
    Ok(tape.sum_all(terms)?)
}

/// CCE under a fixed assignment: target `speakers[j]` is read from channel
/// `sigma[j]`.
pub fn assigned_cce(pred: &PredictionMatrix, speakers: &[usize], sigma: &[usize]) -> f64 {
    speakers
        .iter()
        .zip(sigma)
        .fold(0.0, |acc, (&i, &c)| acc - pred.values[i][c].max(LOG_FLOOR).ln())
}

/// `alpha * mse + cce`.
pub fn joint_loss(mse: f64, cce: f64, alpha: f64) -> Result<f64> {
    if !(alpha > 0.0) {
        return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
    }
    Ok(alpha * mse + cce)
}

/// Tape version of [`joint_loss`]; `alpha = 0` is allowed for diagnostics.
pub fn joint_loss_tape<T: Element>(tape: &mut Tape<T>, mse: Var, cce: Var, alpha: f64) -> Result<Var> {
    let scaled = tape.scale(mse, alpha)?;
    Ok(tape.add(scaled, cce)?)
}

/// Indices of the `n` largest entries; ties go to the lower index.
pub fn top_n(p: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx
}

/// Whether at least `m` of the top-`n` pooled scores are targets.
pub fn identifies(pooled: &[f64], targets: &[usize], m: usize, n: usize) -> bool {
    top_n(pooled, n).iter().filter(|i| targets.contains(i)).count() >= m
}

/// Percentage of samples where at least `m` of the `n` targets are among
/// the `n` highest pooled scores.
pub fn mn_accuracy(pooled: &[Vec<f64>], targets: &[Vec<usize>], m: usize, n: usize) -> Result<f64> {
    if m > n || m == 0 {
        return Err(Error::invalid(format!("M-of-N accuracy needs 1 <= M <= N, got {m}/{n}")));
    }
    if pooled.is_empty() || pooled.len() != targets.len() {
        return Err(Error::invalid("mn_accuracy needs one target set per prediction"));
    }
    if let Some(t) = targets.iter().find(|t| t.len() != n) {
        return Err(Error::invalid(format!("target set {t:?} does not have {n} speakers")));
    }
    let hits = pooled.iter().zip(targets).filter(|(p, t)| identifies(p, t, m, n)).count();
    Ok(100.0 * hits as f64 / pooled.len() as f64)
}
