//! Outer minimization: AT, TRADES and their SDI-regularized variants,
//! optimized with momentum SGD under a piecewise-constant learning rate.

use std::path::Path;

use crate::attacks::{run_attack_with_ids, AttackConfig, AttackLoss};
use crate::data::{batches, derive_seed, Dataset};
use crate::error::{Error, Result};
use crate::model::{
    argmax, forward_on_tape, init_params, predict, Checkpoint, ModelSpec, ParamSet,
};
use crate::numerics::{Tape, Tensor};
use crate::objectives::{batched, ObjectiveConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Mean cross-entropy on adversarial examples.
    #[default]
    At,
    Trades,
    AtSdi,
    TradesSdi,
}

impl Objective {
    pub fn name(self) -> &'static str {
        match self {
            Objective::At => "at",
            Objective::Trades => "trades",
            Objective::AtSdi => "at_sdi",
            Objective::TradesSdi => "trades_sdi",
        }
    }

    /// Loss the inner maximization ascends.
    pub fn inner_loss(self) -> AttackLoss {
        match self {
            Objective::At | Objective::AtSdi => AttackLoss::Ce,
            Objective::Trades | Objective::TradesSdi => AttackLoss::Kl,
        }
    }

    fn uses_natural_branch(self) -> bool {
        matches!(self, Objective::Trades | Objective::TradesSdi)
    }
}

impl std::str::FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "at" => Ok(Objective::At),
            "trades" => Ok(Objective::Trades),
            "at_sdi" => Ok(Objective::AtSdi),
            "trades_sdi" => Ok(Objective::TradesSdi),
            other => Err(Error::Config(format!("unknown objective '{other}'"))),
        }
    }
}

/// Base learning rate divided by every divisor whose drop epoch has been
/// reached.
#[derive(Clone, Debug, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    /// `(epoch, divisor)` pairs.
    pub drops: Vec<(usize, f64)>,
}

pub fn lr_at(schedule: &LrSchedule, epoch: usize) -> f64 {
    schedule
        .drops
        .iter()
        .filter(|(at, _)| *at <= epoch)
        .fold(schedule.base, |lr, (_, div)| lr / div)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    pub beta: f64,
    pub lambda_inv: f64,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_drops: Vec<(usize, f64)>,
    /// Inner maximization; its `loss` field is overridden by the objective.
    pub attack: AttackConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::At,
            beta: 3.0,
            lambda_inv: 6.0,
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 128,
            epochs: 30,
            lr_drops: vec![(20, 10.0), (25, 10.0)],
            attack: AttackConfig {
                steps: 10,
                ..AttackConfig::default()
            },
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            ));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if let Some((e, d)) = self.lr_drops.iter().find(|(_, d)| d.is_nan() || *d < 1.0) {
            return bad(format!("lr drop at epoch {e} has divisor {d} < 1"));
        }
        self.objective_config()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))?;
        self.attack.validate()
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            base: self.lr,
            drops: self.lr_drops.clone(),
        }
    }

    pub fn objective_config(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            beta: self.beta,
            lambda_inv: self.lambda_inv,
        }
    }
}

/// Momentum buffers, one per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn zeros(params: &ParamSet) -> Self {
        Self {
            velocity: params.tensors().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_train_loss: f64,
    /// Accuracy on the natural training inputs, before each batch's update.
    pub natural_acc: f64,
    /// Accuracy on the generated adversarial inputs, before each update.
    pub robust_acc: f64,
    /// Fraction of adversarial samples with non-negative margin.
    pub gate_open_fraction: f64,
    pub lr_used: f64,
}

/// `v ← momentum·v + (g + wd·θ)`, then `θ ← θ − lr·v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &[Tensor],
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.num_tensors() || state.velocity.len() != params.num_tensors() {
        return Err(Error::Dimension(format!(
            "{} gradients / {} buffers for {} parameter tensors",
            grads.len(),
            state.velocity.len(),
            params.num_tensors()
        )));
    }
    for ((p, g), v) in params.tensors_mut().zip(grads).zip(&mut state.velocity) {
        p.check_same_shape(g)?;
        p.check_same_shape(v)?;
        for ((pv, gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
            *vv = momentum * *vv + (gv + weight_decay * *pv);
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

/// Value and parameter gradient of one batch objective.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub value: f64,
    /// In `[w0, b0, w1, b1, ...]` order.
    pub grads: Vec<Tensor>,
    /// SDI gate per sample, evaluated on the adversarial probabilities.
    pub gate: Vec<bool>,
    /// Predicted class per adversarial input.
    pub adv_predictions: Vec<usize>,
}

/// Differentiates the batch objective selected by `cfg.objective` with
/// respect to the parameters; `x_nat` is only read by the TRADES variants.
pub fn objective_gradient(
    params: &ParamSet,
    x_nat: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    cfg: &TrainConfig,
) -> Result<BatchGradient> {
    let mut tape = Tape::new();
    let layers = params.record(&mut tape, true)?;
    let xa = tape.constant(x_adv.clone())?;
    let logits_adv = forward_on_tape(&mut tape, &layers, xa)?;
    let p_adv = tape.softmax(logits_adv)?;

    let p_nat = if cfg.objective.uses_natural_branch() {
        let xn = tape.constant(x_nat.clone())?;
        let logits_nat = forward_on_tape(&mut tape, &layers, xn)?;
        Some(tape.softmax(logits_nat)?)
    } else {
        None
    };

    let (out, gate) = match (cfg.objective, p_nat) {
        (Objective::At, _) => {
            let ce = batched::cross_entropy(&mut tape, p_adv, y)?;
            let gate = batched::gate(&tape, p_adv, y);
            (tape.mean(ce)?, gate)
        }
        (Objective::AtSdi, _) => batched::at_sdi(&mut tape, p_adv, y, cfg.beta)?,
        (Objective::Trades, Some(p_nat)) => {
            let gate = batched::gate(&tape, p_adv, y);
            (
                batched::trades(&mut tape, p_nat, p_adv, y, cfg.lambda_inv)?,
                gate,
            )
        }
        (Objective::TradesSdi, Some(p_nat)) => {
            batched::trades_sdi(&mut tape, p_nat, p_adv, y, &cfg.objective_config())?
        }
        _ => unreachable!("natural branch recorded for TRADES objectives"),
    };

    let probs = tape.value(p_adv);
    let adv_predictions = (0..probs.rows()).map(|i| argmax(probs.row(i))).collect();
    let value = tape.value(out).item()?;
    let mut g = tape.backward(out)?;
    let grads = layers
        .iter()
        .flat_map(|&(w, b)| [w, b])
        .map(|v| g.take(v))
        .collect();
    Ok(BatchGradient {
        value,
        grads,
        gate,
        adv_predictions,
    })
}

/// Inner-attack settings used at `epoch`.
pub fn epoch_attack(cfg: &TrainConfig, epoch: usize) -> AttackConfig {
    AttackConfig {
        loss: cfg.objective.inner_loss(),
        seed: derive_seed(cfg.attack.seed, epoch as u64),
        ..cfg.attack.clone()
    }
}

/// One pass over `data` in seeded minibatches. `epoch` is 1-based.
pub fn train_epoch(
    params: &mut ParamSet,
    state: &mut OptimizerState,
    data: &Dataset,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<EpochRecord> {
    let lr = lr_at(&cfg.schedule(), epoch);
    let attack = epoch_attack(cfg, epoch);
    let plan = batches(data.len(), cfg.batch_size, cfg.seed, epoch as u64)?;

    let mut loss_sum = 0.0;
    let mut natural_hits = 0usize;
    let mut robust_hits = 0usize;
    let mut gate_open = 0usize;
    for idx in plan.iter() {
        let (x, y) = data.gather(idx);
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let x_adv = run_attack_with_ids(params, &x, &y, &attack, &ids)?.x_adv;

        natural_hits += predict(params, &x)?
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
        let batch = objective_gradient(params, &x, &x_adv, &y, cfg)?;
        robust_hits += batch
            .adv_predictions
            .iter()
            .zip(&y)
            .filter(|(p, t)| p == t)
            .count();
        gate_open += batch.gate.iter().filter(|&&o| o).count();
        loss_sum += batch.value * y.len() as f64;

        sgd_step(
            params,
            &batch.grads,
            state,
            lr,
            cfg.momentum,
            cfg.weight_decay,
        )?;
    }

    let n = data.len().max(1) as f64;
    Ok(EpochRecord {
        epoch,
        mean_train_loss: loss_sum / n,
        natural_acc: natural_hits as f64 / n,
        robust_acc: robust_hits as f64 / n,
        gate_open_fraction: gate_open as f64 / n,
        lr_used: lr,
    })
}

/// Final model and per-epoch history of a training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub records: Vec<EpochRecord>,
}

/// Trains from a seeded initialization, calling `on_epoch` after each epoch.
pub fn train_with<F>(
    spec: &ModelSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord, &ParamSet),
{
    cfg.validate()?;
    spec.validate()?;
    if dataset.input_dim() != spec.input_dim || dataset.num_classes() != spec.num_classes {
        return Err(Error::Config(format!(
            "dataset is {}-dimensional with {} classes, model expects {} and {}",
            dataset.input_dim(),
            dataset.num_classes(),
            spec.input_dim,
            spec.num_classes
        )));
    }
    let mut params = init_params(spec, cfg.seed);
    let mut state = OptimizerState::zeros(&params);
    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let rec = train_epoch(&mut params, &mut state, dataset, cfg, epoch)?;
        on_epoch(&rec, &params);
        records.push(rec);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            spec: spec.clone(),
            params,
            seed: cfg.seed,
            epoch: cfg.epochs as u32,
        },
        records,
    })
}

/// Trains and, when `checkpoint_path` is given, writes the final checkpoint.
pub fn train(
    spec: &ModelSpec,
    dataset: &Dataset,
    cfg: &TrainConfig,
    checkpoint_path: Option<&Path>,
) -> Result<TrainOutcome> {
    let outcome = train_with(spec, dataset, cfg, |_, _| {})?;
    if let Some(path) = checkpoint_path {
        outcome.checkpoint.save(path)?;
    }
    Ok(outcome)
}
