//! Dense tensors, reverse-mode differentiation, and a finite-difference
//! gradient checker.

mod tape;
mod tensor;

pub use tape::{argmax_excluding, Gradients, Tape, Var, SQRT_GRAD_FLOOR};
pub use tensor::Tensor;

use rand::Rng;

use crate::error::{Error, Result};

/// Tolerance for accepting an externally supplied vector as a distribution.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Class probabilities for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates that `probs` lies on the simplex within [`SIMPLEX_TOLERANCE`].
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::Domain("need at least two classes".into()));
        }
        if probs
            .iter()
            .any(|p| !p.is_finite() || *p < -SIMPLEX_TOLERANCE || *p > 1.0 + SIMPLEX_TOLERANCE)
        {
            return Err(Error::Domain(format!("{probs:?} is not a distribution")));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Domain(format!("probabilities sum to {total}")));
        }
        Ok(Self(probs))
    }

    pub fn uniform(classes: usize) -> Self {
        Self(vec![1.0 / classes as f64; classes])
    }

    pub fn one_hot(classes: usize, at: usize) -> Self {
        let mut v = vec![0.0; classes];
        v[at] = 1.0;
        Self(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn num_classes(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl std::ops::Index<usize> for ProbVector {
    type Output = f64;

    fn index(&self, k: usize) -> &f64 {
        &self.0[k]
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Max-shifted softmax of a logit vector.
pub fn softmax(logits: &[f64]) -> Result<ProbVector> {
    if logits.len() < 2 {
        return Err(Error::Domain("softmax needs at least two classes".into()));
    }
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::Numeric("softmax input contains NaN or Inf".into()));
    }
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    Ok(ProbVector(p))
}

/// Row-wise softmax of a logit matrix.
pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    logits.check_finite("softmax input")?;
    let mut out = logits.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i));
    }
    Ok(out)
}

/// Value of a scalar expression plus its gradient with respect to each input.
///
/// `grads[i]` has the shape of the `i`-th tensor passed to [`value_and_grad`].
#[derive(Clone, Debug)]
pub struct GradResult {
    pub value: f64,
    pub grads: Vec<Tensor>,
}

/// Evaluates `expr` on a fresh tape with every tensor in `wrt` as a leaf and
/// differentiates the scalar result.
pub fn value_and_grad<F>(wrt: &[Tensor], expr: F) -> Result<GradResult>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = wrt
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = expr(&mut tape, &vars)?;
    let value = tape.value(out).item()?;
    let mut g = tape.backward(out)?;
    Ok(GradResult {
        value,
        grads: vars.iter().map(|&v| g.take(v)).collect(),
    })
}

/// Evaluates `expr` without differentiating.
pub fn evaluate<F>(inputs: &[Tensor], expr: F) -> Result<f64>
where
    F: FnOnce(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = expr(&mut tape, &vars)?;
    tape.value(out).item()
}

/// Error between an analytic and a numeric derivative: relative to the larger
/// magnitude, or absolute when both are below `1e-8`.
pub fn derivative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    let diff = (analytic - numeric).abs();
    if scale < 1e-8 {
        diff
    } else {
        diff / scale
    }
}

/// Compares the analytic gradient of `expr` against central differences on
/// `samples` randomly chosen coordinates and returns the largest error
/// (see [`derivative_error`]).
pub fn check_gradient<F, R>(
    wrt: &[Tensor],
    expr: F,
    h: f64,
    samples: usize,
    rng: &mut R,
) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
    R: Rng + ?Sized,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain(format!("step h must be positive, got {h}")));
    }
    let total: usize = wrt.iter().map(Tensor::len).sum();
    if total == 0 {
        return Ok(0.0);
    }
    let analytic = value_and_grad(wrt, &expr)?;
    let mut point = wrt.to_vec();
    let mut worst = 0.0f64;
    for _ in 0..samples {
        let mut flat = rng.random_range(0..total);
        let mut which = 0;
        while flat >= point[which].len() {
            flat -= point[which].len();
            which += 1;
        }
        let orig = point[which].data()[flat];
        point[which].data_mut()[flat] = orig + h;
        let plus = evaluate(&point, &expr)?;
        point[which].data_mut()[flat] = orig - h;
        let minus = evaluate(&point, &expr)?;
        point[which].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let err = derivative_error(analytic.grads[which].data()[flat], numeric);
        worst = worst.max(err);
    }
    Ok(worst)
}
