//! Finite-difference check of every training and attack objective, composed
//! with softmax and a small random MLP.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{forward_logits, forward_on_tape, init_params, ModelSpec, ParamSet};
use crate::numerics::{
    argmax_excluding, derivative_error, evaluate, softmax_rows, value_and_grad, ProbVector, Tape,
    Tensor, Var,
};
use crate::objectives::{batched, m_sdi, ObjectiveConfig};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Minimum distance of a checked point from gate ties, argmax ties, ReLU
/// kinks and the zero of the SDI measure.
pub const CLEARANCE: f64 = 1e-3;

const INPUT_DIM: usize = 8;
const HIDDEN: usize = 16;
const CLASSES: usize = 4;
const BATCH: usize = 6;
const MAX_DRAWS: usize = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckedObjective {
    CrossEntropy,
    Kl,
    CwMargin,
    MSdi,
    LSdi,
    AtSdi,
    Trades,
    TradesSdi,
}

impl CheckedObjective {
    pub const ALL: [CheckedObjective; 8] = [
        CheckedObjective::CrossEntropy,
        CheckedObjective::Kl,
        CheckedObjective::CwMargin,
        CheckedObjective::MSdi,
        CheckedObjective::LSdi,
        CheckedObjective::AtSdi,
        CheckedObjective::Trades,
        CheckedObjective::TradesSdi,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckedObjective::CrossEntropy => "cross_entropy",
            CheckedObjective::Kl => "kl_divergence",
            CheckedObjective::CwMargin => "cw_margin",
            CheckedObjective::MSdi => "m_sdi",
            CheckedObjective::LSdi => "l_sdi",
            CheckedObjective::AtSdi => "at_sdi",
            CheckedObjective::Trades => "trades",
            CheckedObjective::TradesSdi => "trades_sdi",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub objective: CheckedObjective,
    pub coordinates: usize,
    pub max_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_error < TOLERANCE
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradSuiteReport {
    pub checks: Vec<GradCheck>,
    /// Number of random draws rejected for lying too close to a kink.
    pub rejected_draws: usize,
    /// Gate state of the adversarial rows at the accepted point.
    pub gate: Vec<bool>,
}

impl GradSuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(GradCheck::passed)
    }
}

/// Checked point: `[x_nat, x_adv, w0, b0, w1, b1]` plus labels.
struct Point {
    tensors: Vec<Tensor>,
    labels: Vec<usize>,
}

fn params_from(tensors: &[Tensor]) -> ParamSet {
    let spec = ModelSpec::new(INPUT_DIM, vec![HIDDEN], CLASSES).expect("fixed architecture");
    let mut p = ParamSet::zeros(&spec);
    for (dst, src) in p.tensors_mut().zip(tensors) {
        *dst = src.clone();
    }
    p
}

fn hidden_clear(params: &ParamSet, x: &Tensor) -> Result<bool> {
    let first = &params.layers[0];
    let pre = x.matmul(&first.weight.transpose()?)?;
    Ok(pre
        .data()
        .iter()
        .enumerate()
        .all(|(k, v)| (v + first.bias.data()[k % HIDDEN]).abs() >= CLEARANCE))
}

fn output_clear(params: &ParamSet, x: &Tensor, labels: &[usize]) -> Result<bool> {
    let logits = forward_logits(params, x)?;
    let probs = softmax_rows(&logits)?;
    for (i, &y) in labels.iter().enumerate() {
        let (z, p) = (logits.row(i), probs.row(i));
        let top = argmax_excluding(p, y);
        let runner_up = (0..CLASSES)
            .filter(|&k| k != y && k != top)
            .map(|k| p[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let z_runner_up = (0..CLASSES)
            .filter(|&k| k != y && k != top)
            .map(|k| z[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let pv = ProbVector::new(p.to_vec())?;
        if (p[y] - p[top]).abs() < CLEARANCE
            || p[top] - runner_up < CLEARANCE
            || z[top] - z_runner_up < CLEARANCE
            || m_sdi(&pv, y) < CLEARANCE
        {
            return Ok(false);
        }
    }
    Ok(true)
}

fn draw_point(rng: &mut ChaCha8Rng) -> Result<(Point, Vec<bool>)> {
    let spec = ModelSpec::new(INPUT_DIM, vec![HIDDEN], CLASSES)?;
    let params = init_params(&spec, rng.random());
    let x_nat = Tensor::matrix(
        BATCH,
        INPUT_DIM,
        (0..BATCH * INPUT_DIM)
            .map(|_| rng.random::<f64>())
            .collect(),
    )?;
    let shift: Vec<f64> = (0..BATCH * INPUT_DIM)
        .map(|_| rng.random_range(-0.05..0.05))
        .collect();
    let x_adv = x_nat.zip_map(&Tensor::matrix(BATCH, INPUT_DIM, shift)?, |a, b| a + b)?;
    let labels: Vec<usize> = (0..BATCH).map(|_| rng.random_range(0..CLASSES)).collect();
    let probs_adv = softmax_rows(&forward_logits(&params, &x_adv)?)?;
    let gate: Vec<bool> = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let row = probs_adv.row(i);
            row[y] >= row[argmax_excluding(row, y)]
        })
        .collect();
    let mut tensors = vec![x_nat, x_adv];
    tensors.extend(params.tensors().cloned());
    Ok((Point { tensors, labels }, gate))
}

fn acceptable(point: &Point, gate: &[bool]) -> Result<bool> {
    if !(gate.contains(&true) && gate.contains(&false)) {
        return Ok(false);
    }
    let params = params_from(&point.tensors[2..]);
    for x in &point.tensors[..2] {
        if !hidden_clear(&params, x)? || !output_clear(&params, x, &point.labels)? {
            return Ok(false);
        }
    }
    Ok(true)
}

fn record_objective(
    tape: &mut Tape,
    vars: &[Var],
    labels: &[usize],
    objective: CheckedObjective,
    cfg: &ObjectiveConfig,
) -> Result<Var> {
    let layers: Vec<(Var, Var)> = vars[2..].chunks(2).map(|c| (c[0], c[1])).collect();
    let logits_nat = forward_on_tape(tape, &layers, vars[0])?;
    let logits_adv = forward_on_tape(tape, &layers, vars[1])?;
    let p_nat = tape.softmax(logits_nat)?;
    let p_adv = tape.softmax(logits_adv)?;
    let rows = match objective {
        CheckedObjective::CrossEntropy => batched::cross_entropy(tape, p_adv, labels)?,
        CheckedObjective::Kl => batched::kl_divergence(tape, p_nat, p_adv)?,
        CheckedObjective::CwMargin => batched::cw_margin(tape, logits_adv, labels)?,
        CheckedObjective::MSdi => batched::m_sdi(tape, p_adv, labels)?,
        CheckedObjective::LSdi => batched::l_sdi(tape, p_adv, labels)?.0,
        CheckedObjective::AtSdi => return Ok(batched::at_sdi(tape, p_adv, labels, cfg.beta)?.0),
        CheckedObjective::Trades => {
            return batched::trades(tape, p_nat, p_adv, labels, cfg.lambda_inv)
        }
        CheckedObjective::TradesSdi => {
            return Ok(batched::trades_sdi(tape, p_nat, p_adv, labels, cfg)?.0)
        }
    };
    tape.mean(rows)
}

fn check_all_coordinates(point: &Point, objective: CheckedObjective) -> Result<GradCheck> {
    let cfg = ObjectiveConfig::default();
    let labels = &point.labels;
    let expr =
        |tape: &mut Tape, vars: &[Var]| record_objective(tape, vars, labels, objective, &cfg);
    let analytic = value_and_grad(&point.tensors, expr)?;
    let mut probe = point.tensors.clone();
    let mut max_error = 0.0f64;
    let mut coordinates = 0;
    for t in 0..probe.len() {
        for j in 0..probe[t].len() {
            let orig = probe[t].data()[j];
            probe[t].data_mut()[j] = orig + STEP;
            let plus = evaluate(&probe, expr)?;
            probe[t].data_mut()[j] = orig - STEP;
            let minus = evaluate(&probe, expr)?;
            probe[t].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            max_error = max_error.max(derivative_error(analytic.grads[t].data()[j], numeric));
            coordinates += 1;
        }
    }
    Ok(GradCheck {
        objective,
        coordinates,
        max_error,
    })
}

/// Draws a random 8-16-4 MLP and batch clear of every non-differentiable
/// point, then checks each objective on every input and parameter
/// coordinate.
pub fn run_gradient_suite(seed: u64) -> Result<GradSuiteReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rejected_draws = 0;
    let (point, gate) = loop {
        let (point, gate) = draw_point(&mut rng)?;
        if acceptable(&point, &gate)? {
            break (point, gate);
        }
        rejected_draws += 1;
        if rejected_draws >= MAX_DRAWS {
            return Err(Error::Numeric(format!(
                "no draw cleared the kinks after {MAX_DRAWS} attempts"
            )));
        }
    };
    let checks = CheckedObjective::ALL
        .iter()
        .map(|&o| check_all_coordinates(&point, o))
        .collect::<Result<_>>()?;
    Ok(GradSuiteReport {
        checks,
        rejected_draws,
        gate,
    })
}
