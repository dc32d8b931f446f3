//! Flat `key = value` experiment configuration with dotted keys.
//!
//! Every key has a default; unknown keys are rejected. Values are normalized
//! on entry, so the canonical text (all keys, sorted) is stable and
//! parse → serialize → parse is a fixed point. Per-block SSIA overrides use
//! `ssia.block.<n>.<key>` and are only emitted when set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use sha2::{Digest, Sha256};

use crate::data::{LabelFormat, Normalization};
use crate::error::{Error, Result};
use crate::loss::LossWeights;
use crate::models::{Arch, ConnectionScheme, TargetSpatial};
use crate::ssia::BlockConfig;

#[derive(Debug, Clone, Copy)]
enum Kind {
    NonNegFloat,
    PosInt,
    Int,
    Bool,
    Text,
    FloatList(usize),
    Choice(&'static [&'static str]),
    Spatial,
}

struct Key {
    name: &'static str,
    default: &'static str,
    kind: Kind,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key {
        name,
        default,
        kind,
        help,
    }
}

const KEYS: &[Key] = &[
    key("arch", "resnet-18-like", Kind::Choice(&["resnet-tiny-8", "resnet-18-like"]), "backbone"),
    key("num_classes", "10", Kind::PosInt, "classifier width"),
    key("data.format", "cifar10", Kind::Choice(&["cifar10", "cifar100", "synthetic"]), "dataset layout"),
    key("data.dir", "data/cifar-10-batches-bin", Kind::Text, "dataset directory"),
    key("data.strict", "true", Kind::Bool, "require canonical file sizes"),
    key("data.train_limit", "0", Kind::Int, "use only the first N training records (0 = all)"),
    key("data.test_limit", "0", Kind::Int, "use only the first N test records (0 = all)"),
    key("data.synthetic_train", "1000", Kind::PosInt, "synthetic training records"),
    key("data.synthetic_test", "200", Kind::PosInt, "synthetic test records"),
    key("data.augment", "true", Kind::Bool, "pad-crop-flip augmentation"),
    key("data.mean", "0.4914,0.4822,0.4465", Kind::FloatList(3), "per-channel mean"),
    key("data.std", "0.247,0.2435,0.2616", Kind::FloatList(3), "per-channel std"),
    key("out.dir", "runs/default", Kind::Text, "run directory"),
    key("train.epochs", "30", Kind::PosInt, "epochs"),
    key("train.batch_size", "32", Kind::PosInt, "mini-batch size"),
    key("train.eval_batch_size", "250", Kind::PosInt, "evaluation batch size"),
    key("train.lr0", "0.1", Kind::NonNegFloat, "initial learning rate"),
    key("train.momentum", "0.9", Kind::NonNegFloat, "SGD momentum"),
    key("train.weight_decay", "4e-5", Kind::NonNegFloat, "L2 weight decay on weights"),
    key("train.lr_schedule", "epoch", Kind::Choice(&["epoch", "iteration"]), "cosine granularity"),
    key("train.seed", "0", Kind::Int, "random seed"),
    key("train.checkpoint_every", "1", Kind::Int, "checkpoint cadence in epochs (0 = final only)"),
    key("train.resume", "", Kind::Text, "checkpoint to resume from"),
    key("train.stop_after_epoch", "0", Kind::Int, "stop early after this epoch (0 = run all)"),
    key("loss.lambda_task", "1", Kind::NonNegFloat, "task loss weight"),
    key("loss.lambda_sb", "0.2", Kind::NonNegFloat, "SSIA loss weight"),
    key("loss.per_block", "1,2,3", Kind::FloatList(0), "per-block SSIA weights"),
    key("ssia.enabled", "true", Kind::Bool, "attach SSIA blocks"),
    key("ssia.scheme", "cascaded", Kind::Choice(&["final", "cascaded", "identity"]), "signal-side wiring"),
    key("ssia.hidden", "64", Kind::PosInt, "MLP hidden width"),
    key("ssia.eta", "0.5", Kind::NonNegFloat, "lower |g| threshold"),
    key("ssia.upper_bound", "10", Kind::NonNegFloat, "upper |g| threshold"),
    key("ssia.eps_loss", "1e-8", Kind::NonNegFloat, "loss denominator epsilon"),
    key("ssia.eps_norm", "1e-5", Kind::NonNegFloat, "standardization epsilon"),
    key("ssia.lambda_s", "1", Kind::NonNegFloat, "spatial loss weight"),
    key("ssia.lambda_c", "3", Kind::NonNegFloat, "channel loss weight"),
    key("ssia.normalize_descriptors", "true", Kind::Bool, "standardize prediction-side descriptors"),
    key("ssia.target_spatial", "auto", Kind::Spatial, "spatial signal sizes: auto or HxW,HxW,HxW"),
    key("ssia.warmup_skip", "false", Kind::Bool, "ignore the SSIA loss for the first skip_iters iterations"),
    key("ssia.skip_iters", "200", Kind::Int, "iterations skipped when warmup_skip is on"),
];

/// Keys a per-block override may set.
const BLOCK_KEYS: &[&str] = &["hidden", "eta", "upper_bound", "eps_loss", "eps_norm", "lambda_s", "lambda_c"];

/// Keys that do not change what is trained: excluded from the digest.
const VOLATILE: &[&str] = &["out.dir", "train.resume", "train.stop_after_epoch"];

fn lookup(name: &str) -> Result<(Kind, String)> {
    if let Some(k) = KEYS.iter().find(|k| k.name == name) {
        return Ok((k.kind, name.to_string()));
    }
    if let Some(rest) = name.strip_prefix("ssia.block.") {
        if let Some((n, field)) = rest.split_once('.') {
            if let Ok(n) = n.parse::<usize>() {
                if n >= 1 && BLOCK_KEYS.contains(&field) {
                    let base = KEYS.iter().find(|k| k.name == format!("ssia.{field}")).unwrap();
                    return Ok((base.kind, format!("ssia.block.{n}.{field}")));
                }
            }
        }
    }
    Err(Error::Config(format!("unknown key {name:?}")))
}

fn normalize(name: &str, kind: Kind, raw: &str) -> Result<String> {
    let raw = raw.trim();
    let bad = |what: &str| Error::Config(format!("{name}: expected {what}, got {raw:?}"));
    let float = |s: &str| -> Result<f64> {
        s.trim()
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .ok_or_else(|| bad("a finite number"))
    };
    Ok(match kind {
        Kind::NonNegFloat => {
            let v = float(raw)?;
            if v < 0.0 {
                return Err(bad("a non-negative number"));
            }
            v.to_string()
        }
        Kind::PosInt => match raw.parse::<u64>() {
            Ok(v) if v >= 1 => v.to_string(),
            _ => return Err(bad("a positive integer")),
        },
        Kind::Int => raw.parse::<u64>().map_err(|_| bad("a non-negative integer"))?.to_string(),
        Kind::Bool => match raw {
            "true" | "1" | "yes" | "on" => "true".into(),
            "false" | "0" | "no" | "off" => "false".into(),
            _ => return Err(bad("true or false")),
        },
        Kind::Text => raw.to_string(),
        Kind::FloatList(n) => {
            let vals = if raw.is_empty() {
                Vec::new()
            } else {
                raw.split(',').map(float).collect::<Result<Vec<_>>>()?
            };
            if n > 0 && vals.len() != n {
                return Err(bad(&format!("{n} comma-separated numbers")));
            }
            if vals.iter().any(|v| *v < 0.0) {
                return Err(bad("non-negative numbers"));
            }
            vals.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        }
        Kind::Choice(opts) => {
            if !opts.contains(&raw) {
                return Err(bad(&format!("one of {}", opts.join(", "))));
            }
            raw.to_string()
        }
        Kind::Spatial => {
            if raw == "auto" {
                raw.to_string()
            } else {
                parse_spatial(raw)
                    .ok_or_else(|| bad("auto or a list like 16x16,8x8,4x4"))?
                    .iter()
                    .map(|(h, w)| format!("{h}x{w}"))
                    .collect::<Vec<_>>()
                    .join(",")
            }
        }
    })
}

fn parse_spatial(raw: &str) -> Option<Vec<(usize, usize)>> {
    raw.split(',')
        .map(|p| {
            let (h, w) = p.trim().split_once('x')?;
            let (h, w) = (h.parse().ok()?, w.parse().ok()?);
            (h > 0 && w > 0).then_some((h, w))
        })
        .collect()
}

/// The raw, normalized key-value document.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|k| {
                    let v = normalize(k.name, k.kind, k.default).expect("valid default");
                    (k.name.to_string(), v)
                })
                .collect(),
        }
    }
}

impl Config {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {}", i + 1, strip_prefix(e))))?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        let (kind, canonical) = lookup(name)?;
        let v = normalize(name, kind, value)?;
        self.values.insert(canonical, v);
        Ok(())
    }

    /// Applies a `key=value` override string.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    /// Applies `SSIA_<KEY>` variables, where the key is upper-cased with
    /// `.` written as `__` (e.g. `SSIA_TRAIN__SEED`).
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut pending: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| Some((k.strip_prefix("SSIA_")?.to_string(), v)))
            .filter(|(k, _)| !k.is_empty())
            .map(|(k, v)| (k.to_lowercase().replace("__", "."), v))
            .collect();
        pending.sort();
        for (k, v) in pending {
            // variables outside the schema (e.g. SSIA_CIFAR10_DIR) are not config
            if lookup(&k).is_ok() {
                self.set(&k, &v)?;
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }

    pub fn canonical(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }

    /// SHA-256 over the canonical text minus volatile keys, as lowercase hex.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.values {
            if !VOLATILE.contains(&k.as_str()) {
                h.update(format!("{k} = {v}\n"));
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// One line per key with its default and description.
    pub fn documentation() -> String {
        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}    # {}", k.name, k.default, k.help);
        }
        let _ = writeln!(
            out,
            "ssia.block.<n>.<{}>    # per-block override, block 1 is the lowest",
            BLOCK_KEYS.join("|")
        );
        out
    }

    fn str(&self, k: &str) -> &str {
        &self.values[k]
    }

    fn f64(&self, k: &str) -> f64 {
        self.values[k].parse().expect("normalized float")
    }

    fn u64(&self, k: &str) -> u64 {
        self.values[k].parse().expect("normalized integer")
    }

    fn bool(&self, k: &str) -> bool {
        self.values[k] == "true"
    }

    fn list(&self, k: &str) -> Vec<f64> {
        let v = &self.values[k];
        if v.is_empty() {
            return Vec::new();
        }
        v.split(',').map(|x| x.parse().expect("normalized list")).collect()
    }

    fn block_value(&self, n: usize, field: &str) -> f64 {
        self.values
            .get(&format!("ssia.block.{n}.{field}"))
            .unwrap_or(&self.values[&format!("ssia.{field}")])
            .parse()
            .expect("normalized number")
    }

    /// Typed view, with cross-key validation.
    pub fn resolve(&self) -> Result<ExperimentConfig> {
        let arch: Arch = self.str("arch").parse()?;
        let scheme: ConnectionScheme = self.str("ssia.scheme").parse()?;
        let format = match self.str("data.format") {
            "cifar10" => DataFormat::Cifar(LabelFormat::Cifar10),
            "cifar100" => DataFormat::Cifar(LabelFormat::Cifar100),
            _ => DataFormat::Synthetic,
        };
        let num_classes = self.u64("num_classes") as usize;
        let data_classes = match format {
            DataFormat::Cifar(f) => f.num_classes(),
            DataFormat::Synthetic => 10,
        };
        if num_classes != data_classes {
            return Err(Error::Config(format!(
                "num_classes = {num_classes} but data.format {} has {data_classes} classes",
                self.str("data.format")
            )));
        }
        let n_blocks = 3;
        let blocks = (1..=n_blocks)
            .map(|n| {
                let b = BlockConfig {
                    hidden: self.block_value(n, "hidden") as usize,
                    eta: self.block_value(n, "eta"),
                    upper_bound: self.block_value(n, "upper_bound"),
                    eps_loss: self.block_value(n, "eps_loss"),
                    eps_norm: self.block_value(n, "eps_norm"),
                    lambda_s: self.block_value(n, "lambda_s"),
                    lambda_c: self.block_value(n, "lambda_c"),
                    target_spatial: (1, 1),
                    normalize_descriptors: self.bool("ssia.normalize_descriptors"),
                };
                b.validate().map_err(|e| Error::Config(format!("ssia block {n}: {}", strip_prefix(e))))?;
                Ok(b)
            })
            .collect::<Result<Vec<_>>>()?;
        if let Some(k) = self.values.keys().find(|k| {
            k.strip_prefix("ssia.block.")
                .and_then(|r| r.split('.').next())
                .and_then(|n| n.parse::<usize>().ok())
                .is_some_and(|n| n > n_blocks)
        }) {
            return Err(Error::Config(format!("{k}: only blocks 1..={n_blocks} exist")));
        }
        let per_block = self.list("loss.per_block");
        let ssia_enabled = self.bool("ssia.enabled");
        if ssia_enabled && per_block.len() != n_blocks {
            return Err(Error::Config(format!(
                "loss.per_block has {} weights for {n_blocks} blocks",
                per_block.len()
            )));
        }
        let target = match self.str("ssia.target_spatial") {
            "auto" => TargetSpatial::Auto,
            s => TargetSpatial::Explicit(parse_spatial(s).expect("normalized sizes")),
        };
        let mean = self.list("data.mean");
        let std = self.list("data.std");
        if std.iter().any(|&s| s <= 0.0) {
            return Err(Error::Config("data.std entries must be positive".into()));
        }
        let resume = self.str("train.resume");
        let stop = self.u64("train.stop_after_epoch");
        Ok(ExperimentConfig {
            arch,
            num_classes,
            data: DataConfig {
                format,
                dir: PathBuf::from(self.str("data.dir")),
                strict: self.bool("data.strict"),
                train_limit: self.u64("data.train_limit") as usize,
                test_limit: self.u64("data.test_limit") as usize,
                synthetic_train: self.u64("data.synthetic_train") as usize,
                synthetic_test: self.u64("data.synthetic_test") as usize,
                augment: self.bool("data.augment"),
                norm: Normalization {
                    mean: [mean[0], mean[1], mean[2]],
                    std: [std[0], std[1], std[2]],
                },
            },
            out_dir: PathBuf::from(self.str("out.dir")),
            train: TrainConfig {
                epochs: self.u64("train.epochs"),
                batch_size: self.u64("train.batch_size") as usize,
                eval_batch_size: self.u64("train.eval_batch_size") as usize,
                lr0: self.f64("train.lr0"),
                momentum: self.f64("train.momentum"),
                weight_decay: self.f64("train.weight_decay"),
                per_iteration_lr: self.str("train.lr_schedule") == "iteration",
                seed: self.u64("train.seed"),
                checkpoint_every: self.u64("train.checkpoint_every"),
                resume: (!resume.is_empty()).then(|| PathBuf::from(resume)),
                stop_after_epoch: (stop > 0).then_some(stop),
            },
            loss: LossWeights {
                lambda_task: self.f64("loss.lambda_task"),
                lambda_sb: self.f64("loss.lambda_sb"),
                per_block,
            },
            ssia: SsiaConfig {
                enabled: ssia_enabled,
                scheme,
                blocks,
                target,
                warmup_skip: self.bool("ssia.warmup_skip"),
                skip_iters: self.u64("ssia.skip_iters"),
            },
        })
    }
}

fn strip_prefix(e: Error) -> String {
    match e {
        Error::Config(m) => m,
        other => other.to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    Cifar(LabelFormat),
    /// Generated in memory from the seed.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    pub format: DataFormat,
    pub dir: PathBuf,
    pub strict: bool,
    pub train_limit: usize,
    pub test_limit: usize,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub augment: bool,
    pub norm: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub per_iteration_lr: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub resume: Option<PathBuf>,
    pub stop_after_epoch: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SsiaConfig {
    pub enabled: bool,
    pub scheme: ConnectionScheme,
    /// One per block, lowest prediction stage first.
    pub blocks: Vec<BlockConfig>,
    pub target: TargetSpatial,
    pub warmup_skip: bool,
    pub skip_iters: u64,
}

/// Typed configuration consumed by the trainer and the CLI.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub arch: Arch,
    pub num_classes: usize,
    pub data: DataConfig,
    pub out_dir: PathBuf,
    pub train: TrainConfig,
    pub loss: LossWeights,
    pub ssia: SsiaConfig,
}
