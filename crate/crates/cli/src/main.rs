//! `ssia` command-line entry point.
//!
//! Exit codes: 0 success, 1 user error (bad config, missing or malformed
//! files), 2 internal failure (failed gradient checks, non-finite training).

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ssia::config::Config;
use ssia::data::{self, Dataset, LabelFormat};
use ssia::gradcheck::{self, THRESHOLD};
use ssia::tensor::OpKind;
use ssia::train::{self, Checkpoint};
use ssia::viz;

#[derive(Parser)]
#[command(name = "ssia", version, about = "Train and inspect networks with SSIA blocks")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model; writes metrics, checkpoints and the config into out.dir.
    Train(ConfigArgs),
    /// Evaluate a checkpoint on its test split.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and the block loss.
    Gradcheck(GradcheckArgs),
    /// Write class activation maps.
    Cam(VizArgs),
    /// Write the spatial predictions of each SSIA block.
    Mpp(VizArgs),
    /// Write a synthetic dataset in CIFAR-10 binary format.
    Synth(SynthArgs),
    /// Print the canonical config (defaults with overrides applied).
    Config(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key; repeatable, applied after SSIA_* environment variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// List every key with its default and exit.
    #[arg(long)]
    keys: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Override data keys of the stored config (e.g. data.dir=...).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// JSON-lines file to append the result to [default: eval.jsonl next to the checkpoint].
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, hide = true)]
    inject_fault: Option<String>,
}

#[derive(Args)]
struct VizArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Output directory; files go to <out>/<split>/<sample>_<source>.ppm.
    #[arg(long)]
    out: PathBuf,
    /// Dataset split to read images from.
    #[arg(long, default_value = "test", value_parser = ["train", "test"])]
    split: String,
    /// Comma-separated sample indices.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    samples: Vec<usize>,
    /// Read images from this CIFAR-10 record file instead of the dataset.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Class for CAM [default: the sample's label].
    #[arg(long)]
    class: Option<usize>,
    /// Override data keys of the stored config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    train: usize,
    #[arg(long, default_value_t = 200)]
    test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Failure that should exit with status 2.
#[derive(Debug)]
struct Internal(String);

impl std::fmt::Display for Internal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Internal {}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}

/// Error chain joined with ": ", skipping causes already quoted by their parent.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if !out.ends_with(&msg) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&msg);
        }
    }
    out
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Internal>().is_some() {
        return 2;
    }
    match e.downcast_ref::<ssia::Error>() {
        Some(ssia::Error::Shape(_) | ssia::Error::NonScalarLoss(_) | ssia::Error::NonFinite(_)) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Gradcheck(a) => cmd_gradcheck(a),
        Cmd::Cam(a) => cmd_viz(a, false),
        Cmd::Mpp(a) => cmd_viz(a, true),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::Config(a) => {
            if a.keys {
                print!("{}", Config::documentation());
            } else {
                print!("{}", load_config(&a)?.canonical());
            }
            Ok(())
        }
    }
}

/// File, then environment, then `--set`.
fn load_config(a: &ConfigArgs) -> anyhow::Result<Config> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            Config::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => Config::default(),
    };
    cfg.apply_env(std::env::vars()).context("in SSIA_* environment overrides")?;
    for s in &a.sets {
        cfg.set_pair(s).with_context(|| format!("in --set {s}"))?;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn cmd_train(a: ConfigArgs) -> anyhow::Result<()> {
    if a.keys {
        print!("{}", Config::documentation());
        return Ok(());
    }
    let config = load_config(&a)?;
    let cfg = config.resolve()?;
    let (train_set, test_set) = train::load_datasets(&cfg)?;
    eprintln!(
        "training {} ({}) on {} samples, testing on {}; run directory {}",
        cfg.arch,
        if cfg.ssia.enabled { format!("ssia {}", cfg.ssia.scheme) } else { "baseline".into() },
        train_set.len(),
        test_set.len(),
        cfg.out_dir.display()
    );
    let report = train::train(&config, &train_set, &test_set)?;
    for r in &report.rows {
        eprintln!(
            "epoch {:>3} {:<5} top1 {:6.2} top5 {:6.2} task {:.4} ssia {:.4} lr {:.5}",
            r.epoch, r.split, r.metrics.top1, r.metrics.top5, r.metrics.task_loss, r.metrics.ssia_total, r.lr
        );
    }
    println!("metrics: {}", report.metrics_csv.display());
    if let Some(p) = &report.checkpoint {
        println!("checkpoint: {}", p.display());
    }
    if let Some(p) = &report.stripped {
        println!("stripped: {}", p.display());
    }
    Ok(())
}

fn load_checkpoint_config(ck: &Checkpoint, sets: &[String]) -> anyhow::Result<Config> {
    let mut config = Config::parse(&ck.text("meta.config")?)?;
    config.apply_env(std::env::vars().filter(|(k, _)| k.starts_with("SSIA_DATA__")))?;
    for s in sets {
        let key = s.split('=').next().unwrap_or("");
        if !key.trim().starts_with("data.") {
            bail!("--set {s}: only data.* keys can be changed for a trained checkpoint");
        }
        config.set_pair(s).with_context(|| format!("in --set {s}"))?;
    }
    Ok(config)
}

fn cmd_eval(a: EvalArgs) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let (stored, mut model) = train::load_backbone(&ck)?;
    let config = load_checkpoint_config(&ck, &a.sets)?;
    let cfg = config.resolve()?;
    let (_, test_set) = train::load_datasets(&cfg)?;
    let m = train::evaluate(&mut model, &test_set, cfg.train.eval_batch_size, cfg.data.norm)?;
    println!("top1 {} top5 {} task_loss {} samples {}", m.top1, m.top5, m.task_loss, m.samples);
    let record = json!({
        "checkpoint": a.checkpoint.display().to_string(),
        "kind": ck.text("meta.kind")?,
        "epoch": ck.u64s("meta.epoch")?[0],
        "config_digest": stored.digest(),
        "top1": m.top1,
        "top5": m.top5,
        "task_loss": m.task_loss,
        "samples": m.samples,
    });
    let out = a
        .out
        .unwrap_or_else(|| a.checkpoint.parent().unwrap_or(Path::new(".")).join("eval.jsonl"));
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&out)
        .with_context(|| format!("opening {}", out.display()))?;
    writeln!(f, "{record}").with_context(|| format!("writing {}", out.display()))?;
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> anyhow::Result<()> {
    let fault = match a.inject_fault.as_deref() {
        None => None,
        Some(name) => Some(OpKind::from_name(name).with_context(|| format!("unknown op {name:?}"))?),
    };
    let start = std::time::Instant::now();
    let results = gradcheck::run_suite(fault)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok  " } else { "FAIL" };
        println!("{status} {:<26} max rel error {:.3e}", r.name, r.max_rel_error);
        if !r.passed() {
            failed.push(format!("{} ({:.3e})", r.name, r.max_rel_error));
        }
    }
    println!(
        "{} checks, {} failed, threshold {THRESHOLD:e}, {:.1}s",
        results.len(),
        failed.len(),
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() {
        return Err(Internal(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn viz_images(a: &VizArgs, config: &Config) -> anyhow::Result<Dataset> {
    let set = match &a.images {
        Some(p) => {
            let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Dataset::parse(&bytes, LabelFormat::Cifar10, p)?
        }
        None => {
            let (train_set, test_set) = train::load_datasets(&config.resolve()?)?;
            if a.split == "train" {
                train_set
            } else {
                test_set
            }
        }
    };
    if let Some(&i) = a.samples.iter().find(|&&i| i >= set.len()) {
        bail!("sample {i} out of range: the {} split has {} images", a.split, set.len());
    }
    Ok(set)
}

fn cmd_viz(a: VizArgs, mpp: bool) -> anyhow::Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let config = load_checkpoint_config(&ck, &a.sets)?;
    let norm = config.resolve()?.data.norm;
    let set = viz_images(&a, &config)?;
    let dir = a.out.join(&a.split);
    let mut written = 0;
    if mpp {
        let (_, mut net) = train::load_net(&ck)?;
        if net.blocks.is_empty() {
            bail!("checkpoint has no SSIA blocks (trained with ssia.enabled = false)");
        }
        for &i in &a.samples {
            let img = data::to_tensor(std::iter::once(set.image(i)), &norm);
            for map in viz::mpp_heatmaps(&mut net, &img)? {
                viz::write_image(&map, &dir.join(format!("{i}_{}.ppm", map.source)))?;
                written += 1;
            }
        }
    } else {
        let (_, mut model) = train::load_backbone(&ck)?;
        for &i in &a.samples {
            let img = data::to_tensor(std::iter::once(set.image(i)), &norm);
            let class = a.class.unwrap_or(set.labels[i] as usize);
            let map = viz::cam(&mut model, &img, class)?;
            viz::write_image(&map, &dir.join(format!("{i}_{}.ppm", map.source)))?;
            written += 1;
        }
    }
    println!("wrote {written} map(s) to {}", dir.display());
    Ok(())
}

fn cmd_synth(a: SynthArgs) -> anyhow::Result<()> {
    let train_set = data::synthetic_cifar10(a.train, a.seed);
    let test_set = data::synthetic_cifar10(a.test, a.seed.wrapping_add(1));
    data::write_cifar10(&a.out, &train_set, &test_set)?;
    println!("wrote {} train and {} test records to {}", a.train, a.test, a.out.display());
    println!("train with --set data.dir={} --set data.strict=false", a.out.display());
    Ok(())
}
