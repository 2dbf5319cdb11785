//! ℓ∞-bounded adversaries: signed-gradient PGD on four losses and a
//! gradient-free SPSA attack.
//!
//! Every PGD variant shares one loop. The start point is the natural input
//! plus Gaussian noise of scale `init_noise_std`, projected into the ball and
//! the valid input range. Each step moves every coordinate by `±step_size`
//! along the sign of the input gradient (a zero derivative gives a zero
//! step) and projects again. Cross-entropy, KL and CW are ascended; the SDI
//! measure is descended.
//!
//! Randomness is drawn per sample from a stream seeded with
//! `seed ^ sample_id`, so a sample's trajectory does not depend on which
//! batch it was attacked in.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::model::{argmax, forward_on_tape, forward_probs, predict, ParamSet};
use crate::numerics::{argmax_excluding, Tape, Tensor, Var};
use crate::objectives::{batched, PROB_FLOOR};

/// Objective driving a PGD attack.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum AttackLoss {
    /// Ascend cross-entropy.
    #[default]
    Ce,
    /// Descend the SDI measure.
    Sdi,
    /// Ascend `KL(f(x) ‖ f(x'))` with the natural branch frozen.
    Kl,
    /// Ascend the logit margin `max_{k≠y} z_k − z_y`.
    Cw,
}

impl AttackLoss {
    pub const ALL: [AttackLoss; 4] = [
        AttackLoss::Ce,
        AttackLoss::Sdi,
        AttackLoss::Kl,
        AttackLoss::Cw,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackLoss::Ce => "ce",
            AttackLoss::Sdi => "sdi",
            AttackLoss::Kl => "kl",
            AttackLoss::Cw => "cw",
        }
    }

    /// `+1` for ascent, `-1` for descent.
    pub fn direction(self) -> f64 {
        match self {
            AttackLoss::Sdi => -1.0,
            _ => 1.0,
        }
    }
}

impl std::str::FromStr for AttackLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(AttackLoss::Ce),
            "sdi" => Ok(AttackLoss::Sdi),
            "kl" => Ok(AttackLoss::Kl),
            "cw" => Ok(AttackLoss::Cw),
            other => Err(Error::Config(format!("unknown attack loss '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackConfig {
    /// ℓ∞ radius.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    /// Scale of the Gaussian random start.
    pub init_noise_std: f64,
    pub loss: AttackLoss,
    pub clip_min: f64,
    pub clip_max: f64,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.1,
            step_size: 0.01,
            steps: 20,
            init_noise_std: 0.001,
            loss: AttackLoss::Ce,
            clip_min: 0.0,
            clip_max: 1.0,
            seed: 0,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be >= 0, got {}", self.epsilon));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step size must be > 0, got {}", self.step_size));
        }
        if self.steps == 0 {
            return bad("attack needs at least one step".into());
        }
        if !(self.init_noise_std >= 0.0 && self.init_noise_std.is_finite()) {
            return bad(format!(
                "init noise must be >= 0, got {}",
                self.init_noise_std
            ));
        }
        if self.clip_min.partial_cmp(&self.clip_max) != Some(std::cmp::Ordering::Less) {
            return bad(format!(
                "clip range [{}, {}] is empty",
                self.clip_min, self.clip_max
            ));
        }
        if self.epsilon > 0.0 && self.step_size > 2.0 * self.epsilon {
            return bad(format!(
                "step size {} exceeds the ball diameter {}",
                self.step_size,
                2.0 * self.epsilon
            ));
        }
        Ok(())
    }

    pub fn with_loss(&self, loss: AttackLoss) -> Self {
        Self {
            loss,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Per sample: the prediction on `x_adv` differs from the label.
    pub success_mask: Vec<bool>,
    /// Mean objective at each iterate, including the final one.
    pub loss_trace: Vec<f64>,
}

impl AttackResult {
    pub fn final_loss(&self) -> f64 {
        self.loss_trace.last().copied().unwrap_or(f64::NAN)
    }
}

/// Clamps `x_adv` into `[x − ε, x + ε]` and then into `[clip_min, clip_max]`.
pub fn project_linf(
    x_adv: &Tensor,
    x: &Tensor,
    epsilon: f64,
    clip_min: f64,
    clip_max: f64,
) -> Result<Tensor> {
    x_adv.zip_map(x, |a, o| {
        a.clamp(o - epsilon, o + epsilon).clamp(clip_min, clip_max)
    })
}

/// Sign with `sign(0) = 0`.
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_batch(params: &ParamSet, x: &Tensor, y: &[usize]) -> Result<()> {
    let (n, d) = x.as_matrix_dims()?;
    if n != y.len() {
        return Err(Error::Dimension(format!(
            "{n} inputs but {} labels",
            y.len()
        )));
    }
    if d != params.input_dim() {
        return Err(Error::Dimension(format!(
            "input width {d}, model expects {}",
            params.input_dim()
        )));
    }
    if let Some(&bad) = y.iter().find(|&&c| c >= params.num_classes()) {
        return Err(Error::Domain(format!("label {bad} out of range")));
    }
    Ok(())
}

/// Natural input plus per-sample Gaussian noise, projected.
fn random_start(x: &Tensor, cfg: &AttackConfig, sample_ids: &[u64]) -> Result<Tensor> {
    let mut start = x.clone();
    if cfg.init_noise_std > 0.0 {
        for (i, &id) in sample_ids.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ id);
            for v in start.row_mut(i) {
                let z: f64 = StandardNormal.sample(&mut rng);
                *v += cfg.init_noise_std * z;
            }
        }
    }
    project_linf(&start, x, cfg.epsilon, cfg.clip_min, cfg.clip_max)
}

/// Per-sample attack objective recorded on `tape`, as a `[batch]` node.
fn loss_rows(
    tape: &mut Tape,
    layers: &[(Var, Var)],
    x_adv: Var,
    y: &[usize],
    loss: AttackLoss,
    natural_probs: Option<&Tensor>,
) -> Result<Var> {
    let logits = forward_on_tape(tape, layers, x_adv)?;
    match loss {
        AttackLoss::Cw => batched::cw_margin(tape, logits, y),
        AttackLoss::Ce => {
            let p = tape.softmax(logits)?;
            batched::cross_entropy(tape, p, y)
        }
        AttackLoss::Sdi => {
            let p = tape.softmax(logits)?;
            batched::m_sdi(tape, p, y)
        }
        AttackLoss::Kl => {
            let nat = natural_probs.expect("KL attack needs natural probabilities");
            let p = tape.constant(nat.clone())?;
            let q = tape.softmax(logits)?;
            batched::kl_divergence(tape, p, q)
        }
    }
}

/// Per-sample value of `loss` at `x_adv`. For [`AttackLoss::Kl`] the
/// reference distribution is the model's output on `x`.
pub fn attack_loss(
    params: &ParamSet,
    x: &Tensor,
    x_adv: &Tensor,
    y: &[usize],
    loss: AttackLoss,
) -> Result<Vec<f64>> {
    check_batch(params, x_adv, y)?;
    let nat = match loss {
        AttackLoss::Kl => Some(forward_probs(params, x)?),
        _ => None,
    };
    let mut tape = Tape::new();
    let layers = params.record(&mut tape, false)?;
    let xv = tape.constant(x_adv.clone())?;
    let rows = loss_rows(&mut tape, &layers, xv, y, loss, nat.as_ref())?;
    Ok(tape.value(rows).data().to_vec())
}

/// Mean loss and input gradient of the summed per-sample loss.
fn loss_and_input_grad(
    params: &ParamSet,
    x_adv: &Tensor,
    y: &[usize],
    loss: AttackLoss,
    natural_probs: Option<&Tensor>,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let layers = params.record(&mut tape, false)?;
    let xv = tape.leaf(x_adv.clone())?;
    let rows = loss_rows(&mut tape, &layers, xv, y, loss, natural_probs)?;
    let values = tape.value(rows);
    let mean = values.data().iter().sum::<f64>() / values.len() as f64;
    let total = tape.sum(rows)?;
    let mut grads = tape.backward(total)?;
    Ok((mean, grads.take(xv)))
}

/// PGD on `cfg.loss`, with explicit per-sample stream ids.
pub fn run_attack_with_ids(
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    sample_ids: &[u64],
) -> Result<AttackResult> {
    cfg.validate()?;
    check_batch(params, x, y)?;
    if sample_ids.len() != y.len() {
        return Err(Error::Dimension("one stream id per sample required".into()));
    }
    let natural_probs = match cfg.loss {
        AttackLoss::Kl => Some(forward_probs(params, x)?),
        _ => None,
    };
    let step = cfg.loss.direction() * cfg.step_size;
    let mut x_adv = random_start(x, cfg, sample_ids)?;
    let mut trace = Vec::with_capacity(cfg.steps + 1);
    for _ in 0..cfg.steps {
        let (mean, grad) =
            loss_and_input_grad(params, &x_adv, y, cfg.loss, natural_probs.as_ref())?;
        trace.push(mean);
        let moved = x_adv.zip_map(&grad, |v, g| v + step * sign(g))?;
        x_adv = project_linf(&moved, x, cfg.epsilon, cfg.clip_min, cfg.clip_max)?;
    }
    let mut tape = Tape::new();
    let layers = params.record(&mut tape, false)?;
    let xv = tape.constant(x_adv.clone())?;
    let rows = loss_rows(&mut tape, &layers, xv, y, cfg.loss, natural_probs.as_ref())?;
    let last = tape.value(rows);
    trace.push(last.data().iter().sum::<f64>() / last.len() as f64);

    let preds = predict(params, &x_adv)?;
    Ok(AttackResult {
        success_mask: preds.iter().zip(y).map(|(p, t)| p != t).collect(),
        x_adv,
        loss_trace: trace,
    })
}

fn default_ids(n: usize) -> Vec<u64> {
    (0..n as u64).collect()
}

/// PGD on whatever loss `cfg.loss` selects.
pub fn run_attack(
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run_attack_with_ids(params, x, y, cfg, &default_ids(y.len()))
}

/// Cross-entropy ascent (`cfg.loss` is ignored).
pub fn pgd_attack(
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(params, x, y, &cfg.with_loss(AttackLoss::Ce))
}

/// Descent on the ungated SDI measure (`cfg.loss` is ignored).
pub fn sdi_pgd_attack(
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(params, x, y, &cfg.with_loss(AttackLoss::Sdi))
}

/// KL ascent away from the frozen natural prediction (`cfg.loss` is ignored).
pub fn kl_pgd_attack(
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(params, x, y, &cfg.with_loss(AttackLoss::Kl))
}

/// Logit-margin ascent (`cfg.loss` is ignored).
pub fn cw_pgd_attack(
    params: &ParamSet,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    run_attack(params, x, y, &cfg.with_loss(AttackLoss::Cw))
}

/// Settings of the SPSA gradient estimator and its ascent loop.
#[derive(Clone, Debug, PartialEq)]
pub struct SpsaConfig {
    /// Perturbation scale of the finite differences.
    pub delta: f64,
    pub lr: f64,
    /// Antithetic perturbation pairs per estimate.
    pub batch: usize,
    pub iters: usize,
}

impl Default for SpsaConfig {
    fn default() -> Self {
        Self {
            delta: 0.001,
            lr: 0.01,
            batch: 256,
            iters: 100,
        }
    }
}

impl SpsaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.lr > 0.0) || self.batch == 0 || self.iters == 0 {
            return Err(Error::Config(format!("invalid SPSA settings {self:?}")));
        }
        Ok(())
    }
}

/// SPSA estimate of `∇L(x)` from `batch` antithetic Rademacher pairs.
///
/// `loss` maps a `[rows × d]` matrix of query points to one value per row.
pub fn spsa_gradient<F, R>(
    mut loss: F,
    x: &[f64],
    delta: f64,
    batch: usize,
    rng: &mut R,
) -> Result<Vec<f64>>
where
    F: FnMut(&Tensor) -> Result<Vec<f64>>,
    R: Rng + ?Sized,
{
    let d = x.len();
    let signs: Vec<f64> = (0..batch * d)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    let mut queries = Vec::with_capacity(2 * batch * d);
    for dir in signs.chunks(d) {
        queries.extend(x.iter().zip(dir).map(|(v, s)| v + delta * s));
        queries.extend(x.iter().zip(dir).map(|(v, s)| v - delta * s));
    }
    let values = loss(&Tensor::matrix(2 * batch, d, queries)?)?;
    if values.len() != 2 * batch {
        return Err(Error::Dimension(format!(
            "loss returned {} values for {} queries",
            values.len(),
            2 * batch
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("black-box loss is not finite".into()));
    }
    let mut grad = vec![0.0; d];
    for (j, dir) in signs.chunks(d).enumerate() {
        let slope = (values[2 * j] - values[2 * j + 1]) / (2.0 * delta);
        // Rademacher entries are their own inverses
        grad.iter_mut().zip(dir).for_each(|(g, s)| *g += slope * s);
    }
    grad.iter_mut().for_each(|g| *g /= batch as f64);
    Ok(grad)
}

/// CW margin recovered from probabilities: `max_{k≠y} ln p_k − ln p_y`.
fn cw_from_probs(probs: &Tensor, label: usize) -> Result<Vec<f64>> {
    if probs.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("black-box output is not finite".into()));
    }
    Ok((0..probs.rows())
        .map(|i| {
            let row = probs.row(i);
            let other = argmax_excluding(row, label);
            row[other].max(PROB_FLOOR).ln() - row[label].max(PROB_FLOOR).ln()
        })
        .collect())
}

/// Gradient-free ascent on the CW margin using only `black_box`, which maps
/// `[rows × d]` inputs to `[rows × C]` probabilities.
pub fn spsa_attack<F>(
    mut black_box: F,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    spsa: &SpsaConfig,
) -> Result<AttackResult>
where
    F: FnMut(&Tensor) -> Result<Tensor>,
{
    cfg.validate()?;
    spsa.validate()?;
    let (n, d) = x.as_matrix_dims()?;
    if n != y.len() {
        return Err(Error::Dimension(format!(
            "{n} inputs but {} labels",
            y.len()
        )));
    }
    let ids = default_ids(n);
    let mut x_adv = random_start(x, cfg, &ids)?;
    let mut trace = vec![0.0; spsa.iters + 1];
    for (i, &label) in y.iter().enumerate() {
        // the start noise used stream `seed ^ i`; the estimator draws from a
        // second stream so the two never overlap
        let mut rng = ChaCha8Rng::seed_from_u64(crate::data::derive_seed(cfg.seed ^ ids[i], 1));
        let origin = x.row(i).to_vec();
        let mut point = x_adv.row(i).to_vec();
        let mut objective = |q: &Tensor| cw_from_probs(&black_box(q)?, label);
        for slot in trace.iter_mut().take(spsa.iters) {
            *slot += objective(&Tensor::matrix(1, d, point.clone())?)?[0];
            let g = spsa_gradient(&mut objective, &point, spsa.delta, spsa.batch, &mut rng)?;
            for ((p, gk), o) in point.iter_mut().zip(&g).zip(&origin) {
                *p = (*p + spsa.lr * gk)
                    .clamp(o - cfg.epsilon, o + cfg.epsilon)
                    .clamp(cfg.clip_min, cfg.clip_max);
            }
        }
        trace[spsa.iters] += objective(&Tensor::matrix(1, d, point.clone())?)?[0];
        x_adv.row_mut(i).copy_from_slice(&point);
    }
    trace.iter_mut().for_each(|t| *t /= n.max(1) as f64);

    let probs = black_box(&x_adv)?;
    let success_mask = (0..n).map(|i| argmax(probs.row(i)) != y[i]).collect();
    Ok(AttackResult {
        x_adv,
        success_mask,
        loss_trace: trace,
    })
}

/// Black-box view of a model: probabilities only.
pub fn model_oracle(params: &ParamSet) -> impl FnMut(&Tensor) -> Result<Tensor> + '_ {
    move |q| forward_probs(params, q)
}
