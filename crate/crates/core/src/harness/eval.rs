//! Natural and robust accuracy measurement, the three-way PGD comparison
//! and β sweeps.

use sha2::{Digest, Sha256};

use crate::attacks::{
    model_oracle, run_attack_with_ids, spsa_attack, AttackConfig, AttackLoss, SpsaConfig,
};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{forward_probs, predict, ModelSpec, ParamSet};
use crate::objectives::PROB_FLOOR;
use crate::training::{train, Objective, TrainConfig};

use super::config::hex;

/// Rows attacked per PGD call. Per-sample noise streams make results
/// independent of this value.
const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum AttackSpec {
    Pgd(AttackConfig),
    Spsa(AttackConfig, SpsaConfig),
}

impl AttackSpec {
    /// `pgd-ce`, `pgd-sdi`, `pgd-kl`, `pgd-cw` or `spsa`.
    pub fn from_name(name: &str, base: &AttackConfig, spsa: &SpsaConfig) -> Result<Self> {
        match name.strip_prefix("pgd-") {
            Some(loss) => Ok(AttackSpec::Pgd(base.with_loss(loss.parse()?))),
            None if name == "spsa" => Ok(AttackSpec::Spsa(
                base.with_loss(AttackLoss::Cw),
                spsa.clone(),
            )),
            None => Err(Error::Config(format!("unknown attack '{name}'"))),
        }
    }

    pub fn name(&self) -> String {
        match self {
            AttackSpec::Pgd(c) => format!("pgd-{}", c.loss.name()),
            AttackSpec::Spsa(..) => "spsa".into(),
        }
    }

    pub fn base(&self) -> &AttackConfig {
        match self {
            AttackSpec::Pgd(c) | AttackSpec::Spsa(c, _) => c,
        }
    }

    pub fn spsa(&self) -> Option<&SpsaConfig> {
        match self {
            AttackSpec::Spsa(_, s) => Some(s),
            AttackSpec::Pgd(_) => None,
        }
    }

    /// PGD steps or SPSA iterations.
    pub fn steps(&self) -> usize {
        match self {
            AttackSpec::Pgd(c) => c.steps,
            AttackSpec::Spsa(_, s) => s.iters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.base().validate()?;
        if let Some(s) = self.spsa() {
            s.validate()?;
        }
        Ok(())
    }
}

/// One row of the eval table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackOutcome {
    pub attack: String,
    pub epsilon: f64,
    pub steps: usize,
    pub robust_acc: f64,
    /// Mean over samples of the attack objective at the final iterate.
    pub mean_final_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub natural_acc: f64,
    /// Mean cross-entropy on the natural inputs.
    pub natural_loss: f64,
    pub attacks: Vec<AttackOutcome>,
    pub samples: usize,
    pub fingerprint: String,
}

impl EvalReport {
    pub fn robust_acc(&self, attack: &str) -> Option<f64> {
        self.attacks
            .iter()
            .find(|a| a.attack == attack)
            .map(|a| a.robust_acc)
    }

    /// The natural row followed by one row per attack.
    pub fn rows(&self) -> Vec<AttackOutcome> {
        let mut rows = vec![AttackOutcome {
            attack: "natural".into(),
            epsilon: 0.0,
            steps: 0,
            robust_acc: self.natural_acc,
            mean_final_loss: self.natural_loss,
        }];
        rows.extend(self.attacks.iter().cloned());
        rows
    }
}

fn fraction(hits: usize, n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}

fn correct(preds: &[usize], labels: &[usize]) -> usize {
    preds.iter().zip(labels).filter(|(p, t)| p == t).count()
}

fn run_pgd(params: &ParamSet, data: &Dataset, cfg: &AttackConfig) -> Result<(AttackOutcome, f64)> {
    let n = data.len();
    let mut hits = 0;
    let mut max_linf = 0.0f64;
    let mut loss_sum = 0.0;
    let all: Vec<usize> = (0..n).collect();
    for idx in all.chunks(CHUNK) {
        let (x, y) = data.gather(idx);
        let ids: Vec<u64> = idx.iter().map(|&i| i as u64).collect();
        let res = run_attack_with_ids(params, &x, &y, cfg, &ids)?;
        hits += res.success_mask.iter().filter(|&&s| !s).count();
        max_linf = max_linf.max(res.x_adv.max_abs_diff(&x)?);
        loss_sum += res.final_loss() * y.len() as f64;
    }
    let outcome = AttackOutcome {
        attack: format!("pgd-{}", cfg.loss.name()),
        epsilon: cfg.epsilon,
        steps: cfg.steps,
        robust_acc: fraction(hits, n),
        mean_final_loss: if n == 0 { 0.0 } else { loss_sum / n as f64 },
    };
    Ok((outcome, max_linf))
}

fn run_spsa(
    params: &ParamSet,
    data: &Dataset,
    cfg: &AttackConfig,
    spsa: &SpsaConfig,
) -> Result<(AttackOutcome, f64)> {
    let n = data.len();
    let res = spsa_attack(
        model_oracle(params),
        data.inputs(),
        data.labels(),
        cfg,
        spsa,
    )?;
    let max_linf = res.x_adv.max_abs_diff(data.inputs())?;
    let outcome = AttackOutcome {
        attack: "spsa".into(),
        epsilon: cfg.epsilon,
        steps: spsa.iters,
        robust_acc: fraction(res.success_mask.iter().filter(|&&s| !s).count(), n),
        mean_final_loss: if n == 0 { 0.0 } else { res.final_loss() },
    };
    Ok((outcome, max_linf))
}

/// Runs one attack over the whole dataset.
pub fn run_attack_spec(
    params: &ParamSet,
    data: &Dataset,
    spec: &AttackSpec,
) -> Result<AttackOutcome> {
    Ok(attack_stats(params, data, spec)?.outcome)
}

/// Natural accuracy plus robust accuracy under each attack. The fingerprint
/// covers the attack settings; callers holding a full manifest may replace
/// it with the manifest's.
pub fn evaluate(params: &ParamSet, data: &Dataset, attacks: &[AttackSpec]) -> Result<EvalReport> {
    if params.input_dim() != data.input_dim() || params.num_classes() != data.num_classes() {
        return Err(Error::Dimension(format!(
            "model is {}->{}, data is {}-dimensional with {} classes",
            params.input_dim(),
            params.num_classes(),
            data.input_dim(),
            data.num_classes()
        )));
    }
    let n = data.len();
    let (natural_acc, natural_loss) = if n == 0 {
        (0.0, 0.0)
    } else {
        let probs = forward_probs(params, data.inputs())?;
        let ce: f64 = data
            .labels()
            .iter()
            .enumerate()
            .map(|(i, &y)| -probs.row(i)[y].max(PROB_FLOOR).ln())
            .sum();
        (
            fraction(correct(&predict(params, data.inputs())?, data.labels()), n),
            ce / n as f64,
        )
    };
    let outcomes = attacks
        .iter()
        .map(|a| run_attack_spec(params, data, a))
        .collect::<Result<_>>()?;
    Ok(EvalReport {
        natural_acc,
        natural_loss,
        attacks: outcomes,
        samples: n,
        fingerprint: hex(&Sha256::digest(format!("{attacks:?}").as_bytes())),
    })
}

/// CE-, KL- and SDI-PGD with the ε, step, iteration count and seed of
/// `base`, in that order.
pub fn attack_comparison(
    params: &ParamSet,
    data: &Dataset,
    base: &AttackConfig,
) -> Result<Vec<AttackOutcome>> {
    [AttackLoss::Ce, AttackLoss::Kl, AttackLoss::Sdi]
        .iter()
        .map(|&l| {
            let (mut row, _) = run_pgd(params, data, &base.with_loss(l))?;
            row.attack = l.name().into();
            Ok(row)
        })
        .collect()
}

/// Trains one SDI-regularized model per β from the same seed and evaluates
/// each. A plain AT or TRADES objective in `cfg` is switched to its SDI
/// variant.
pub fn beta_sweep(
    spec: &ModelSpec,
    train_set: &Dataset,
    eval_set: &Dataset,
    cfg: &TrainConfig,
    betas: &[f64],
    attacks: &[AttackSpec],
) -> Result<Vec<(f64, EvalReport)>> {
    if betas.is_empty() {
        return Err(Error::Config("beta sweep needs at least one beta".into()));
    }
    let objective = match cfg.objective {
        Objective::At | Objective::AtSdi => Objective::AtSdi,
        Objective::Trades | Objective::TradesSdi => Objective::TradesSdi,
    };
    betas
        .iter()
        .map(|&beta| {
            let run = TrainConfig {
                objective,
                beta,
                ..cfg.clone()
            };
            let out = train(spec, train_set, &run, None)?;
            Ok((beta, evaluate(&out.checkpoint.params, eval_set, attacks)?))
        })
        .collect()
}

/// Summary written by the single-attack command.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackStats {
    pub outcome: AttackOutcome,
    pub samples: usize,
    /// Fraction of samples whose post-attack prediction is wrong.
    pub success_rate: f64,
    /// Largest ℓ∞ distance between an adversarial and a natural input.
    pub max_linf: f64,
}

pub fn attack_stats(params: &ParamSet, data: &Dataset, spec: &AttackSpec) -> Result<AttackStats> {
    let (outcome, max_linf) = match spec {
        AttackSpec::Pgd(c) => run_pgd(params, data, c)?,
        AttackSpec::Spsa(c, s) => run_spsa(params, data, c, s)?,
    };
    Ok(AttackStats {
        success_rate: if data.is_empty() {
            0.0
        } else {
            1.0 - outcome.robust_acc
        },
        outcome,
        samples: data.len(),
        max_linf,
    })
}
