//! Command-line surface. Exit codes: 0 success, 1 usage or configuration
//! error, 2 failed check.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::training::train_with;

use super::config::{ConfigFile, RunManifest};
use super::csv::{real, write_csv, SweepRow};
use super::eval::{attack_comparison, attack_stats, beta_sweep, evaluate, AttackSpec};
use super::gradsuite::run_gradient_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_CHECK: i32 = 2;

pub const CHECKPOINT_FILE: &str = "checkpoint.sdic";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const EVAL_FILE: &str = "eval.csv";
pub const ATTACK_FILE: &str = "attack.csv";
pub const COMPARE_FILE: &str = "compare.csv";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const GRADCHECK_FILE: &str = "gradcheck.csv";

#[derive(Parser, Debug)]
#[command(
    name = "sdi",
    version,
    about = "Adversarial training with the SDI regularizer"
)]
struct Cli {
    /// Overrides `seed` and the attack seeds of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Suppress progress and summary lines.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model; writes checkpoint, metrics CSV and manifest.
    Train,
    /// Run one attack against a checkpoint on the test set.
    Attack {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// pgd-ce, pgd-sdi, pgd-kl, pgd-cw or spsa.
        #[arg(long, default_value = "pgd-ce")]
        attack: String,
    },
    /// Natural and robust accuracy under the configured attack set.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// CE-, KL- and SDI-PGD side by side.
    Compare {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate one model per configured β.
    Sweep,
    /// Finite-difference check of all objective gradients.
    Gradcheck,
}

enum Failure {
    Config(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Config(e)
    }
}

/// Parses `argv` (program name first) and runs the subcommand.
pub fn cli_main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            EXIT_CONFIG
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            EXIT_CHECK
        }
    }
}

fn manifest(cli: &Cli) -> Result<RunManifest> {
    let mut file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(seed) = cli.seed {
        for key in ["seed", "attack.seed", "eval.seed"] {
            file.set(key, seed.to_string());
        }
    }
    RunManifest::from_config(&file)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    std::fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    Ok(&cli.out)
}

fn eval_set(m: &RunManifest) -> Result<Dataset> {
    let (_, test) = m.dataset.load(m.seed)?;
    Ok(match m.eval_limit {
        Some(n) => test.take(n),
        None => test,
    })
}

fn load_model(cli: &Cli, given: &Option<PathBuf>, m: &RunManifest) -> Result<Checkpoint> {
    let path = given
        .clone()
        .unwrap_or_else(|| cli.out.join(CHECKPOINT_FILE));
    let ck = Checkpoint::load(&path)?;
    if ck.spec.input_dim != m.dataset.input_dim() || ck.spec.num_classes != m.dataset.num_classes()
    {
        return Err(Error::Config(format!(
            "checkpoint {} is {}->{}, dataset is {}->{}",
            path.display(),
            ck.spec.input_dim,
            ck.spec.num_classes,
            m.dataset.input_dim(),
            m.dataset.num_classes()
        )));
    }
    Ok(ck)
}

fn run(cli: &Cli) -> std::result::Result<(), Failure> {
    if let Command::Gradcheck = cli.command {
        return gradcheck(cli);
    }
    let m = manifest(cli)?;
    match &cli.command {
        Command::Train => {
            let out = out_dir(cli)?;
            let (train_set, _) = m.dataset.load(m.seed)?;
            let spec = m.model_spec()?;
            let outcome = train_with(&spec, &train_set, &m.train, |r, _| {
                if cli.quiet {
                    return;
                }
                eprintln!(
                    "epoch {:>3}  loss {:.4}  nat {:.4}  rob {:.4}  gate {:.3}  lr {}",
                    r.epoch,
                    r.mean_train_loss,
                    r.natural_acc,
                    r.robust_acc,
                    r.gate_open_fraction,
                    r.lr_used
                );
            })?;
            outcome.checkpoint.save(&out.join(CHECKPOINT_FILE))?;
            write_csv(&outcome.records, &out.join(METRICS_FILE))?;
            write_manifest(out, &m)?;
        }
        Command::Attack { checkpoint, attack } => {
            let ck = load_model(cli, checkpoint, &m)?;
            let spec = AttackSpec::from_name(attack, &m.eval, &m.spsa)?;
            spec.validate()?;
            let stats = attack_stats(&ck.params, &eval_set(&m)?, &spec)?;
            say(
                cli,
                format!(
                    "{}: robust_acc {} success_rate {} max_linf {}",
                    stats.outcome.attack,
                    real(stats.outcome.robust_acc),
                    real(stats.success_rate),
                    real(stats.max_linf)
                ),
            );
            write_csv(&[stats], &out_dir(cli)?.join(ATTACK_FILE))?;
        }
        Command::Eval { checkpoint } => {
            let ck = load_model(cli, checkpoint, &m)?;
            let mut report = evaluate(&ck.params, &eval_set(&m)?, &m.attack_specs()?)?;
            report.fingerprint = m.fingerprint();
            for row in report.rows() {
                say(
                    cli,
                    format!("{:<8} robust_acc {}", row.attack, real(row.robust_acc)),
                );
            }
            say(cli, format!("fingerprint {}", report.fingerprint));
            let out = out_dir(cli)?;
            write_csv(&report.rows(), &out.join(EVAL_FILE))?;
            write_manifest(out, &m)?;
        }
        Command::Compare { checkpoint } => {
            let ck = load_model(cli, checkpoint, &m)?;
            let rows = attack_comparison(&ck.params, &eval_set(&m)?, &m.eval)?;
            for row in &rows {
                say(
                    cli,
                    format!("{:<4} robust_acc {}", row.attack, real(row.robust_acc)),
                );
            }
            write_csv(&rows, &out_dir(cli)?.join(COMPARE_FILE))?;
        }
        Command::Sweep => {
            let out = out_dir(cli)?;
            let (train_set, _) = m.dataset.load(m.seed)?;
            let reports = beta_sweep(
                &m.model_spec()?,
                &train_set,
                &eval_set(&m)?,
                &m.train,
                &m.sweep_betas,
                &m.attack_specs()?,
            )?;
            write_csv(&SweepRow::from_reports(&reports), &out.join(SWEEP_FILE))?;
            write_manifest(out, &m)?;
        }
        Command::Gradcheck => unreachable!("handled above"),
    }
    Ok(())
}

fn say(cli: &Cli, line: String) {
    if !cli.quiet {
        println!("{line}");
    }
}

fn write_manifest(out: &Path, m: &RunManifest) -> Result<()> {
    let path = out.join(MANIFEST_FILE);
    std::fs::write(&path, m.to_text()).map_err(|e| Error::io(&path, e))
}

fn gradcheck(cli: &Cli) -> std::result::Result<(), Failure> {
    if let Some(p) = &cli.config {
        // only validated; the suite has fixed settings
        manifest(cli).map_err(|e| match e {
            Error::Io { .. } => e,
            other => Error::Config(format!("{}: {other}", p.display())),
        })?;
    }
    let report = run_gradient_suite(cli.seed.unwrap_or(0))?;
    let rows: Vec<GradRow> = report
        .checks
        .iter()
        .map(|c| GradRow {
            name: c.objective.name(),
            coordinates: c.coordinates,
            max_error: c.max_error,
            passed: c.passed(),
        })
        .collect();
    for r in &rows {
        say(
            cli,
            format!(
                "{} {:<14} coords {:>4}  max rel err {:.3e}",
                if r.passed { "PASS" } else { "FAIL" },
                r.name,
                r.coordinates,
                r.max_error
            ),
        );
    }
    write_csv(&rows, &out_dir(cli)?.join(GRADCHECK_FILE))?;
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::Check("gradient suite".into()))
    }
}

struct GradRow {
    name: &'static str,
    coordinates: usize,
    max_error: f64,
    passed: bool,
}

impl super::csv::CsvRecord for GradRow {
    fn header() -> &'static [&'static str] {
        &["objective", "coordinates", "max_error", "passed"]
    }

    fn fields(&self) -> Vec<String> {
        vec![
            self.name.to_string(),
            self.coordinates.to_string(),
            format!("{:e}", self.max_error),
            self.passed.to_string(),
        ]
    }
}
