//! Deterministic CSV emission: reals with six decimals, comma separated,
//! newline terminated.

use std::path::Path;

use crate::error::{Error, Result};
use crate::training::EpochRecord;

use super::eval::{AttackOutcome, AttackStats, EvalReport};

pub trait CsvRecord {
    fn header() -> &'static [&'static str];
    fn fields(&self) -> Vec<String>;
}

pub fn real(v: f64) -> String {
    format!("{v:.6}")
}

pub fn render_csv<R: CsvRecord>(records: &[R]) -> String {
    let mut out = R::header().join(",");
    out.push('\n');
    for r in records {
        out.push_str(&r.fields().join(","));
        out.push('\n');
    }
    out
}

pub fn write_csv<R: CsvRecord>(records: &[R], path: &Path) -> Result<()> {
    std::fs::write(path, render_csv(records)).map_err(|e| Error::io(path, e))
}

impl CsvRecord for EpochRecord {
    fn header() -> &'static [&'static str] {
        &[
            "epoch",
            "mean_train_loss",
            "natural_acc",
            "robust_acc",
            "gate_open_fraction",
            "lr_used",
        ]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.epoch.to_string(),
            real(self.mean_train_loss),
            real(self.natural_acc),
            real(self.robust_acc),
            real(self.gate_open_fraction),
            real(self.lr_used),
        ]
    }
}

impl CsvRecord for AttackOutcome {
    fn header() -> &'static [&'static str] {
        &[
            "attack",
            "epsilon",
            "steps",
            "robust_acc",
            "mean_final_loss",
        ]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.attack.clone(),
            real(self.epsilon),
            self.steps.to_string(),
            real(self.robust_acc),
            real(self.mean_final_loss),
        ]
    }
}

impl CsvRecord for AttackStats {
    fn header() -> &'static [&'static str] {
        &[
            "attack",
            "epsilon",
            "steps",
            "samples",
            "robust_acc",
            "success_rate",
            "mean_final_loss",
            "max_linf",
        ]
    }

    fn fields(&self) -> Vec<String> {
        let o = &self.outcome;
        vec![
            o.attack.clone(),
            real(o.epsilon),
            o.steps.to_string(),
            self.samples.to_string(),
            real(o.robust_acc),
            real(self.success_rate),
            real(o.mean_final_loss),
            real(self.max_linf),
        ]
    }
}

/// One row per (β, eval row) of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub beta: f64,
    pub outcome: AttackOutcome,
}

impl SweepRow {
    pub fn from_reports(reports: &[(f64, EvalReport)]) -> Vec<SweepRow> {
        reports
            .iter()
            .flat_map(|(beta, r)| {
                r.rows().into_iter().map(move |outcome| SweepRow {
                    beta: *beta,
                    outcome,
                })
            })
            .collect()
    }
}

impl CsvRecord for SweepRow {
    fn header() -> &'static [&'static str] {
        &[
            "beta",
            "attack",
            "epsilon",
            "steps",
            "robust_acc",
            "mean_final_loss",
        ]
    }

    fn fields(&self) -> Vec<String> {
        let mut f = vec![real(self.beta)];
        f.extend(self.outcome.fields());
        f
    }
}
