//! Losses and measures on class-probability vectors.
//!
//! Each quantity comes in two forms: a plain scalar function on one
//! [`ProbVector`], and a batched, differentiable form that records onto a
//! [`Tape`] and returns one value per row. The batched forms are what the
//! attacks and training loops differentiate; the scalar forms are the
//! reference values.

use std::cell::Cell;

use crate::error::{Error, Result};
use crate::numerics::{argmax_excluding, ProbVector, Tape, Tensor, Var};

/// Floor applied to probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

thread_local! {
    static GATE_EVALUATIONS: Cell<u64> = const { Cell::new(0) };
}

/// Number of margin evaluations performed on the current thread.
pub fn gate_evaluations() -> u64 {
    GATE_EVALUATIONS.with(Cell::get)
}

fn count_gate(n: usize) {
    GATE_EVALUATIONS.with(|c| c.set(c.get() + n as u64));
}

/// Weights of the regularized objectives.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    /// Weight of the gated SDI term.
    pub beta: f64,
    /// Weight of the natural/adversarial KL term (`1/λ`).
    pub lambda_inv: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            beta: 3.0,
            lambda_inv: 6.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Domain(format!(
                "beta must be >= 0, got {}",
                self.beta
            )));
        }
        if !(self.lambda_inv >= 0.0 && self.lambda_inv.is_finite()) {
            return Err(Error::Domain(format!(
                "lambda_inv must be >= 0, got {}",
                self.lambda_inv
            )));
        }
        Ok(())
    }
}

/// A probability vector paired with its true label.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleLossInput {
    pub probs: ProbVector,
    pub label: usize,
}

impl SampleLossInput {
    pub fn new(probs: ProbVector, label: usize) -> Result<Self> {
        if label >= probs.num_classes() {
            return Err(Error::Domain(format!(
                "label {label} out of range for {} classes",
                probs.num_classes()
            )));
        }
        Ok(Self { probs, label })
    }
}

/// Sample standard deviation with the `N − 1` denominator.
pub fn vanilla_sd(data: &[f64]) -> Result<f64> {
    if data.len() < 2 {
        return Err(Error::Domain(format!(
            "standard deviation needs at least two points, got {}",
            data.len()
        )));
    }
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let ss: f64 = data.iter().map(|x| (x - mean) * (x - mean)).sum();
    Ok((ss / (n - 1.0)).sqrt())
}

pub fn cross_entropy(p: &ProbVector, label: usize) -> f64 {
    -p[label].max(PROB_FLOOR).ln()
}

/// `KL(p ‖ q)` with both arguments floored inside the log.
pub fn kl_divergence(p: &ProbVector, q: &ProbVector) -> f64 {
    p.as_slice()
        .iter()
        .zip(q.as_slice())
        .map(|(&pk, &qk)| pk * (pk.max(PROB_FLOOR).ln() - qk.max(PROB_FLOOR).ln()))
        .sum()
}

/// Largest wrong-class logit minus the true-class logit.
pub fn cw_margin(logits: &[f64], label: usize) -> f64 {
    logits[argmax_excluding(logits, label)] - logits[label]
}

/// Root-mean-square deviation of every class probability from the
/// true-class probability, with denominator `C − 1`.
pub fn m_sdi(p: &ProbVector, label: usize) -> f64 {
    let py = p[label];
    let ss: f64 = p.as_slice().iter().map(|&pk| (pk - py) * (pk - py)).sum();
    (ss / (p.num_classes() - 1) as f64).sqrt()
}

/// True-class probability minus the largest other-class probability.
pub fn margin_dm(p: &ProbVector, label: usize) -> f64 {
    count_gate(1);
    let s = p.as_slice();
    s[label] - s[argmax_excluding(s, label)]
}

/// [`m_sdi`] where the margin is non-negative, zero elsewhere.
pub fn l_sdi(p: &ProbVector, label: usize) -> f64 {
    if margin_dm(p, label) >= 0.0 {
        m_sdi(p, label)
    } else {
        0.0
    }
}

/// Per-sample AT-SDI loss: CE on the adversarial probabilities minus
/// `β · L_SDI`.
pub fn at_sdi_objective(probs_adv: &ProbVector, label: usize, cfg: &ObjectiveConfig) -> f64 {
    cross_entropy(probs_adv, label) - cfg.beta * l_sdi(probs_adv, label)
}

/// Per-sample TRADES-SDI loss.
pub fn trades_sdi_objective(
    probs_nat: &ProbVector,
    probs_adv: &ProbVector,
    label: usize,
    cfg: &ObjectiveConfig,
) -> f64 {
    cross_entropy(probs_nat, label) + cfg.lambda_inv * kl_divergence(probs_nat, probs_adv)
        - cfg.beta * l_sdi(probs_adv, label)
}

/// Plain TRADES loss, i.e. [`trades_sdi_objective`] without the SDI term.
pub fn trades_objective(
    probs_nat: &ProbVector,
    probs_adv: &ProbVector,
    label: usize,
    lambda_inv: f64,
) -> f64 {
    cross_entropy(probs_nat, label) + lambda_inv * kl_divergence(probs_nat, probs_adv)
}

fn batch_mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len();
    values.sum::<f64>() / n as f64
}

/// Mean AT-SDI loss over a batch.
pub fn at_sdi_batch(probs_adv: &[ProbVector], labels: &[usize], cfg: &ObjectiveConfig) -> f64 {
    batch_mean(
        probs_adv
            .iter()
            .zip(labels)
            .map(|(p, &y)| at_sdi_objective(p, y, cfg)),
    )
}

/// Mean TRADES-SDI loss over a batch.
pub fn trades_sdi_batch(
    probs_nat: &[ProbVector],
    probs_adv: &[ProbVector],
    labels: &[usize],
    cfg: &ObjectiveConfig,
) -> f64 {
    batch_mean(
        probs_nat
            .iter()
            .zip(probs_adv)
            .zip(labels)
            .map(|((p, q), &y)| trades_sdi_objective(p, q, y, cfg)),
    )
}

/// Differentiable, row-batched versions of the losses above. Inputs are
/// `[batch × C]` probability (or logit) nodes; outputs are `[batch]` nodes.
pub mod batched {
    use super::*;

    pub fn cross_entropy(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
        let py = tape.gather(probs, labels)?;
        let log_py = tape.log_clamped(py, PROB_FLOOR)?;
        tape.scale(log_py, -1.0)
    }

    pub fn kl_divergence(tape: &mut Tape, p: Var, q: Var) -> Result<Var> {
        let log_p = tape.log_clamped(p, PROB_FLOOR)?;
        let log_q = tape.log_clamped(q, PROB_FLOOR)?;
        let diff = tape.sub(log_p, log_q)?;
        let terms = tape.mul(p, diff)?;
        tape.sum_rows(terms)
    }

    pub fn cw_margin(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
        let other = tape.max_excluding(logits, labels)?;
        let own = tape.gather(logits, labels)?;
        tape.sub(other, own)
    }

    pub fn m_sdi(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<Var> {
        let classes = tape.value(probs).cols();
        if classes < 2 {
            return Err(Error::Domain(
                "SDI measure needs at least two classes".into(),
            ));
        }
        let py = tape.gather(probs, labels)?;
        let dev = tape.sub_col(probs, py)?;
        let sq = tape.square(dev)?;
        let ss = tape.sum_rows(sq)?;
        let var = tape.scale(ss, 1.0 / (classes - 1) as f64)?;
        tape.sqrt(var)
    }

    /// Gate of the SDI regularizer per row (`margin >= 0`), read from the
    /// current values of `probs`.
    pub fn gate(tape: &Tape, probs: Var, labels: &[usize]) -> Vec<bool> {
        let p = tape.value(probs);
        count_gate(labels.len());
        labels
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let row = p.row(i);
                row[y] - row[argmax_excluding(row, y)] >= 0.0
            })
            .collect()
    }

    /// Gated SDI term; the gate enters as a constant 0/1 mask. Returns the
    /// per-row values and the gate.
    pub fn l_sdi(tape: &mut Tape, probs: Var, labels: &[usize]) -> Result<(Var, Vec<bool>)> {
        let open = gate(tape, probs, labels);
        let m = m_sdi(tape, probs, labels)?;
        let mask = tape.constant(Tensor::vector(
            open.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect(),
        ))?;
        Ok((tape.mul(m, mask)?, open))
    }

    /// Mean AT-SDI objective; returns the scalar node and the gate.
    pub fn at_sdi(
        tape: &mut Tape,
        probs_adv: Var,
        labels: &[usize],
        beta: f64,
    ) -> Result<(Var, Vec<bool>)> {
        let ce = cross_entropy(tape, probs_adv, labels)?;
        let (reg, open) = l_sdi(tape, probs_adv, labels)?;
        let weighted = tape.scale(reg, beta)?;
        let per_sample = tape.sub(ce, weighted)?;
        Ok((tape.mean(per_sample)?, open))
    }

    /// Mean TRADES objective `CE(p_nat) + (1/λ)·KL(p_nat ‖ p_adv)`.
    pub fn trades(
        tape: &mut Tape,
        probs_nat: Var,
        probs_adv: Var,
        labels: &[usize],
        lambda_inv: f64,
    ) -> Result<Var> {
        let per_sample = trades_terms(tape, probs_nat, probs_adv, labels, lambda_inv)?;
        tape.mean(per_sample)
    }

    fn trades_terms(
        tape: &mut Tape,
        probs_nat: Var,
        probs_adv: Var,
        labels: &[usize],
        lambda_inv: f64,
    ) -> Result<Var> {
        let ce = cross_entropy(tape, probs_nat, labels)?;
        let kl = kl_divergence(tape, probs_nat, probs_adv)?;
        let kl = tape.scale(kl, lambda_inv)?;
        tape.add(ce, kl)
    }

    /// Mean TRADES-SDI objective; returns the scalar node and the gate.
    pub fn trades_sdi(
        tape: &mut Tape,
        probs_nat: Var,
        probs_adv: Var,
        labels: &[usize],
        cfg: &ObjectiveConfig,
    ) -> Result<(Var, Vec<bool>)> {
        let base = trades_terms(tape, probs_nat, probs_adv, labels, cfg.lambda_inv)?;
        let (reg, open) = l_sdi(tape, probs_adv, labels)?;
        let weighted = tape.scale(reg, cfg.beta)?;
        let per_sample = tape.sub(base, weighted)?;
        Ok((tape.mean(per_sample)?, open))
    }
}
