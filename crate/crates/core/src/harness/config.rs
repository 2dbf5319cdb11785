//! Line-oriented `key = value` configuration and the fully resolved run
//! manifest built from it.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, SpsaConfig};
use crate::data::{gen_blobs, gen_spirals, load_idx, Dataset};
use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::training::TrainConfig;

use super::eval::AttackSpec;

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

/// Raw key/value pairs; later duplicates overwrite earlier ones.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    pub entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::format(origin, format!("line {}: expected 'key = value'", n + 1))
            })?;
            let key = k.trim();
            if key.is_empty() || key.contains(char::is_whitespace) {
                return Err(Error::format(
                    origin,
                    format!("line {}: bad key '{key}'", n + 1),
                ));
            }
            entries.insert(key.to_string(), v.trim().to_string());
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), value.into());
    }
}

/// Consumes keys from a [`ConfigFile`], so leftovers can be reported.
struct Reader {
    entries: BTreeMap<String, String>,
}

impl Reader {
    fn take<T: std::str::FromStr>(&mut self, key: &str, default: T) -> Result<T> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'"))),
        }
    }

    fn take_list<T: std::str::FromStr>(&mut self, key: &str, default: Vec<T>) -> Result<Vec<T>> {
        match self.entries.remove(key) {
            None => Ok(default),
            Some(v) if v.trim().is_empty() => Ok(Vec::new()),
            Some(v) => v
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("{key}: cannot parse '{}'", s.trim())))
                })
                .collect(),
        }
    }

    fn finish(self) -> Result<()> {
        match self.entries.keys().next() {
            None => Ok(()),
            Some(k) => Err(Error::Config(format!("unknown config key '{k}'"))),
        }
    }
}

/// Where the train and test sets come from.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSource {
    /// IDX files `train-*` and `t10k-*` inside `dir`.
    Mnist {
        dir: PathBuf,
        train_limit: Option<usize>,
        test_limit: Option<usize>,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        spread: f64,
        train_fraction: f64,
    },
    Spirals {
        classes: usize,
        per_class: usize,
        noise: f64,
        train_fraction: f64,
    },
}

impl DatasetSource {
    /// Returns `(train, test)`. Synthetic sets are generated and split with
    /// `seed`.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => Ok((
                load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    *train_limit,
                )?,
                load_idx(
                    &dir.join("t10k-images-idx3-ubyte"),
                    &dir.join("t10k-labels-idx1-ubyte"),
                    *test_limit,
                )?,
            )),
            DatasetSource::Blobs {
                classes,
                per_class,
                spread,
                train_fraction,
            } => split(
                gen_blobs(*classes, *per_class, *spread, seed)?,
                *train_fraction,
                seed,
            ),
            DatasetSource::Spirals {
                classes,
                per_class,
                noise,
                train_fraction,
            } => split(
                gen_spirals(*classes, *per_class, *noise, seed)?,
                *train_fraction,
                seed,
            ),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            DatasetSource::Mnist { .. } => 784,
            _ => 2,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            DatasetSource::Mnist { .. } => 10,
            DatasetSource::Blobs { classes, .. } | DatasetSource::Spirals { classes, .. } => {
                *classes
            }
        }
    }
}

fn split(ds: Dataset, train_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    let n_train = (ds.len() as f64 * train_fraction).round() as usize;
    ds.split(n_train.min(ds.len()), seed)
}

/// Everything needed to reproduce a run's outputs byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct RunManifest {
    pub seed: u64,
    pub dataset: DatasetSource,
    pub hidden: Vec<usize>,
    pub train: TrainConfig,
    /// Shared settings of the evaluation attacks; `loss` is ignored.
    pub eval: AttackConfig,
    pub spsa: SpsaConfig,
    /// Names accepted by [`AttackSpec::from_name`].
    pub eval_attacks: Vec<String>,
    /// Evaluate on the first `eval_limit` test samples only.
    pub eval_limit: Option<usize>,
    pub sweep_betas: Vec<f64>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn from_config(file: &ConfigFile) -> Result<Self> {
        let mut r = Reader {
            entries: file.entries.clone(),
        };
        let seed: u64 = r.take("seed", 0)?;

        let kind: String = r.take("data.kind", "blobs".to_string())?;
        let dataset = match kind.as_str() {
            "mnist" => DatasetSource::Mnist {
                dir: r.take("data.dir", PathBuf::from("data/mnist"))?,
                train_limit: optional(r.take("data.train_limit", 0usize)?),
                test_limit: optional(r.take("data.test_limit", 0usize)?),
            },
            "blobs" => DatasetSource::Blobs {
                classes: r.take("data.classes", 3)?,
                per_class: r.take("data.per_class", 100)?,
                spread: r.take("data.spread", 0.08)?,
                train_fraction: r.take("data.train_fraction", 0.8)?,
            },
            "spirals" => DatasetSource::Spirals {
                classes: r.take("data.classes", 2)?,
                per_class: r.take("data.per_class", 200)?,
                noise: r.take("data.noise", 0.1)?,
                train_fraction: r.take("data.train_fraction", 0.8)?,
            },
            other => return Err(Error::Config(format!("unknown data.kind '{other}'"))),
        };

        let default_hidden = match dataset {
            DatasetSource::Mnist { .. } => vec![256, 128],
            _ => vec![32, 32],
        };
        let hidden = r.take_list("model.hidden", default_hidden)?;

        let d = TrainConfig::default();
        let drops: Vec<String> = r.take_list(
            "train.lr_drops",
            d.lr_drops.iter().map(|(e, f)| format!("{e}:{f}")).collect(),
        )?;
        let lr_drops = drops
            .iter()
            .map(|s| {
                let (e, f) = s.split_once(':').ok_or_else(|| {
                    Error::Config(format!("train.lr_drops: '{s}' is not epoch:divisor"))
                })?;
                Ok((
                    e.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("train.lr_drops: bad epoch '{e}'")))?,
                    f.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("train.lr_drops: bad divisor '{f}'")))?,
                ))
            })
            .collect::<Result<Vec<(usize, f64)>>>()?;
        let train = TrainConfig {
            objective: r.take("train.objective", d.objective)?,
            beta: r.take("train.beta", d.beta)?,
            lambda_inv: r.take("train.lambda_inv", d.lambda_inv)?,
            lr: r.take("train.lr", d.lr)?,
            momentum: r.take("train.momentum", d.momentum)?,
            weight_decay: r.take("train.weight_decay", d.weight_decay)?,
            batch_size: r.take("train.batch_size", d.batch_size)?,
            epochs: r.take("train.epochs", d.epochs)?,
            lr_drops,
            attack: read_attack(&mut r, "attack", &d.attack, seed)?,
            seed,
        };

        let eval_base = read_attack(
            &mut r,
            "eval",
            &AttackConfig {
                steps: 20,
                ..train.attack.clone()
            },
            seed,
        )?;
        let ds = SpsaConfig::default();
        let spsa = SpsaConfig {
            delta: r.take("spsa.delta", ds.delta)?,
            lr: r.take("spsa.lr", ds.lr)?,
            batch: r.take("spsa.batch", ds.batch)?,
            iters: r.take("spsa.iters", ds.iters)?,
        };
        let eval_attacks: Vec<String> = r.take_list(
            "eval.attacks",
            vec![
                "pgd-ce".into(),
                "pgd-sdi".into(),
                "pgd-kl".into(),
                "pgd-cw".into(),
            ],
        )?;
        let eval_limit = optional(r.take("eval.limit", 0usize)?);
        let sweep_betas = r.take_list("sweep.betas", vec![0.0, 1.0, 3.0, 6.0])?;
        // written into every manifest for the record; the running binary's
        // own version is what gets stored
        let _: String = r.take("tool_version", String::new())?;
        r.finish()?;

        let m = Self {
            seed,
            dataset,
            hidden,
            train,
            eval: eval_base,
            spsa,
            eval_attacks,
            eval_limit,
            sweep_betas,
            tool_version: TOOL_VERSION.to_string(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_spec()?;
        self.train.validate()?;
        for a in self.attack_specs()? {
            a.validate()?;
        }
        let frac = match &self.dataset {
            DatasetSource::Blobs { train_fraction, .. }
            | DatasetSource::Spirals { train_fraction, .. } => *train_fraction,
            DatasetSource::Mnist { .. } => 0.5,
        };
        if !(0.0..=1.0).contains(&frac) {
            return Err(Error::Config(format!(
                "data.train_fraction {frac} outside [0, 1]"
            )));
        }
        Ok(())
    }

    pub fn model_spec(&self) -> Result<ModelSpec> {
        ModelSpec::new(
            self.dataset.input_dim(),
            self.hidden.clone(),
            self.dataset.num_classes(),
        )
        .map_err(|e| Error::Config(e.to_string()))
    }

    pub fn attack_specs(&self) -> Result<Vec<AttackSpec>> {
        self.eval_attacks
            .iter()
            .map(|n| AttackSpec::from_name(n, &self.eval, &self.spsa))
            .collect()
    }

    /// Canonical text form; parsing it back yields an equal manifest.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        match &self.dataset {
            DatasetSource::Mnist {
                dir,
                train_limit,
                test_limit,
            } => {
                kv("data.kind", "mnist".into());
                kv("data.dir", dir.display().to_string());
                kv("data.train_limit", train_limit.unwrap_or(0).to_string());
                kv("data.test_limit", test_limit.unwrap_or(0).to_string());
            }
            DatasetSource::Blobs {
                classes,
                per_class,
                spread,
                train_fraction,
            } => {
                kv("data.kind", "blobs".into());
                kv("data.classes", classes.to_string());
                kv("data.per_class", per_class.to_string());
                kv("data.spread", spread.to_string());
                kv("data.train_fraction", train_fraction.to_string());
            }
            DatasetSource::Spirals {
                classes,
                per_class,
                noise,
                train_fraction,
            } => {
                kv("data.kind", "spirals".into());
                kv("data.classes", classes.to_string());
                kv("data.per_class", per_class.to_string());
                kv("data.noise", noise.to_string());
                kv("data.train_fraction", train_fraction.to_string());
            }
        }
        kv("model.hidden", join(&self.hidden));
        let t = &self.train;
        kv("train.objective", t.objective.name().into());
        kv("train.beta", t.beta.to_string());
        kv("train.lambda_inv", t.lambda_inv.to_string());
        kv("train.lr", t.lr.to_string());
        kv("train.momentum", t.momentum.to_string());
        kv("train.weight_decay", t.weight_decay.to_string());
        kv("train.batch_size", t.batch_size.to_string());
        kv("train.epochs", t.epochs.to_string());
        kv(
            "train.lr_drops",
            t.lr_drops
                .iter()
                .map(|(e, f)| format!("{e}:{f}"))
                .collect::<Vec<_>>()
                .join(","),
        );
        write_attack(&mut kv, "attack", &t.attack);
        write_attack(&mut kv, "eval", &self.eval);
        kv("spsa.delta", self.spsa.delta.to_string());
        kv("spsa.lr", self.spsa.lr.to_string());
        kv("spsa.batch", self.spsa.batch.to_string());
        kv("spsa.iters", self.spsa.iters.to_string());
        kv("eval.attacks", self.eval_attacks.join(","));
        kv("eval.limit", self.eval_limit.unwrap_or(0).to_string());
        kv("sweep.betas", join(&self.sweep_betas));
        kv("tool_version", self.tool_version.clone());
        s
    }

    /// SHA-256 of [`RunManifest::to_text`], hex encoded.
    pub fn fingerprint(&self) -> String {
        hex(&Sha256::digest(self.to_text().as_bytes()))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn optional(n: usize) -> Option<usize> {
    (n > 0).then_some(n)
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn read_attack(r: &mut Reader, prefix: &str, d: &AttackConfig, seed: u64) -> Result<AttackConfig> {
    let key = |k: &str| format!("{prefix}.{k}");
    Ok(AttackConfig {
        epsilon: r.take(&key("epsilon"), d.epsilon)?,
        step_size: r.take(&key("step_size"), d.step_size)?,
        steps: r.take(&key("steps"), d.steps)?,
        init_noise_std: r.take(&key("init_noise_std"), d.init_noise_std)?,
        loss: r.take(&key("loss"), d.loss)?,
        clip_min: r.take(&key("clip_min"), d.clip_min)?,
        clip_max: r.take(&key("clip_max"), d.clip_max)?,
        seed: r.take(&key("seed"), seed)?,
    })
}

fn write_attack(kv: &mut impl FnMut(&str, String), prefix: &str, a: &AttackConfig) {
    let key = |k: &str| format!("{prefix}.{k}");
    kv(&key("epsilon"), a.epsilon.to_string());
    kv(&key("step_size"), a.step_size.to_string());
    kv(&key("steps"), a.steps.to_string());
    kv(&key("init_noise_std"), a.init_noise_std.to_string());
    kv(&key("loss"), a.loss.name().into());
    kv(&key("clip_min"), a.clip_min.to_string());
    kv(&key("clip_max"), a.clip_max.to_string());
    kv(&key("seed"), a.seed.to_string());
}

impl Default for RunManifest {
    fn default() -> Self {
        Self::from_config(&ConfigFile::default()).expect("defaults are valid")
    }
}
