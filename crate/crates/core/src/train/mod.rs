//! Training loop, evaluation, metrics CSV and checkpoints.

pub mod checkpoint;
pub mod optim;

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};

pub use checkpoint::{Checkpoint, Value};
pub use optim::{cosine_lr, Sgd};

use crate::config::{Config, DataFormat, ExperimentConfig};
use crate::data::{self, BatchConfig, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::loss::{total_loss, total_ssia_loss};
use crate::models::{Backbone, SsiaNet};
use crate::nn::{Mode, Module};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Real, Tape, Tensor};

/// Top-k counts for one batch of logits `[b, k]`. Ties rank the lower class
/// index first, so constant logits always predict class 0.
pub fn topk_hits<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks(classes)
        .zip(labels)
        .filter(|(row, &y)| {
            let ly = row[y];
            let above = row
                .iter()
                .enumerate()
                .filter(|&(j, &v)| v > ly || (v == ly && j < y))
                .count();
            above < k
        })
        .count()
}

/// Accuracy (percent) and mean losses over one split.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitMetrics {
    pub top1: f64,
    pub top5: f64,
    pub task_loss: f64,
    pub ssia_total: f64,
    pub ssia_blocks: Vec<f64>,
    pub samples: usize,
}

#[derive(Default)]
struct Accum {
    n: usize,
    hit1: usize,
    hit5: usize,
    task: f64,
    ssia: f64,
    blocks: Vec<f64>,
}

impl Accum {
    fn add(&mut self, b: usize, hit1: usize, hit5: usize, task: f64, ssia: f64, blocks: &[f64]) {
        self.n += b;
        self.hit1 += hit1;
        self.hit5 += hit5;
        self.task += task * b as f64;
        self.ssia += ssia * b as f64;
        self.blocks.resize(blocks.len(), 0.0);
        for (a, &v) in self.blocks.iter_mut().zip(blocks) {
            *a += v * b as f64;
        }
    }

    fn finish(self) -> SplitMetrics {
        let n = self.n.max(1) as f64;
        SplitMetrics {
            top1: 100.0 * self.hit1 as f64 / n,
            top5: 100.0 * self.hit5 as f64 / n,
            task_loss: self.task / n,
            ssia_total: self.ssia / n,
            ssia_blocks: self.blocks.iter().map(|v| v / n).collect(),
            samples: self.n,
        }
    }
}

fn eval_batches(set: &Dataset, batch_size: usize, norm: Normalization) -> Result<data::Batches<'_>> {
    data::batches(
        set,
        BatchConfig {
            batch_size,
            seed: 0,
            epoch: 0,
            train: false,
            augment: false,
            norm,
        },
    )
}

/// Inference-mode top-1/top-5 and mean cross-entropy of a bare backbone.
pub fn evaluate(model: &mut Backbone<f32>, set: &Dataset, batch_size: usize, norm: Normalization) -> Result<SplitMetrics> {
    let mut acc = Accum::default();
    for batch in eval_batches(set, batch_size, norm)? {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let logits = model.forward(&mut tape, x, Mode::Eval)?;
        let ce = tape.cross_entropy(logits, &batch.labels)?;
        let lv = tape.value(logits);
        acc.add(
            batch.labels.len(),
            topk_hits(lv, &batch.labels, 1),
            topk_hits(lv, &batch.labels, 5),
            tape.value(ce).item() as f64,
            0.0,
            &[],
        );
    }
    Ok(acc.finish())
}

/// Like [`evaluate`] but also reports the inference-mode SSIA block losses.
pub fn evaluate_with_blocks(
    net: &mut SsiaNet<f32>,
    set: &Dataset,
    batch_size: usize,
    norm: Normalization,
    per_block: &[f64],
) -> Result<SplitMetrics> {
    let mut acc = Accum::default();
    for batch in eval_batches(set, batch_size, norm)? {
        let mut tape = Tape::new();
        let x = tape.constant(batch.images);
        let out = net.forward_with_taps(&mut tape, x, Mode::Eval)?;
        let ce = tape.cross_entropy(out.logits, &batch.labels)?;
        let blocks: Vec<f64> = out.block_losses.iter().map(|l| tape.value(l.total).item() as f64).collect();
        let ssia: f64 = blocks.iter().zip(per_block).map(|(l, w)| l * w).sum();
        let lv = tape.value(out.logits);
        acc.add(
            batch.labels.len(),
            topk_hits(lv, &batch.labels, 1),
            topk_hits(lv, &batch.labels, 5),
            tape.value(ce).item() as f64,
            ssia,
            &blocks,
        );
    }
    Ok(acc.finish())
}

/// One metrics CSV row.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    /// 1-based.
    pub epoch: u64,
    pub split: &'static str,
    pub metrics: SplitMetrics,
    pub lr: f64,
}

pub fn csv_header(n_blocks: usize) -> String {
    let mut h = String::from("epoch,split,top1,top5,task_loss,ssia_total");
    for n in 1..=n_blocks {
        h.push_str(&format!(",ssia_block_{n}"));
    }
    h.push_str(",lr\n");
    h
}

pub fn csv_row(r: &EpochRow) -> String {
    let m = &r.metrics;
    let mut s = format!("{},{},{},{},{},{}", r.epoch, r.split, m.top1, m.top5, m.task_loss, m.ssia_total);
    for v in &m.ssia_blocks {
        s.push_str(&format!(",{v}"));
    }
    s.push_str(&format!(",{}\n", r.lr));
    s
}

/// Training and test sets for a resolved config, honouring the limits.
pub fn load_datasets(cfg: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let d = &cfg.data;
    let (train, test) = match d.format {
        DataFormat::Cifar(data::LabelFormat::Cifar10) => data::load_cifar10(&d.dir, d.strict)?,
        DataFormat::Cifar(data::LabelFormat::Cifar100) => data::load_cifar100(&d.dir, d.strict)?,
        DataFormat::Synthetic => (
            data::synthetic_cifar10(d.synthetic_train, cfg.train.seed),
            data::synthetic_cifar10(d.synthetic_test, cfg.train.seed.wrapping_add(1)),
        ),
    };
    let limit = |s: Dataset, n: usize| if n == 0 { s } else { s.take(n) };
    Ok((limit(train, d.train_limit), limit(test, d.test_limit)))
}

/// Builds the network for a config: backbone and blocks use separate random
/// streams, so the backbone is identical with or without blocks.
pub fn build_net(cfg: &ExperimentConfig) -> Result<SsiaNet<f32>> {
    let mut rng = stream_rng(cfg.train.seed, Stream::BackboneInit, 0);
    let backbone = Backbone::new(cfg.arch, cfg.num_classes, &mut rng)?;
    if !cfg.ssia.enabled {
        return Ok(SsiaNet::baseline(backbone));
    }
    let mut rng = stream_rng(cfg.train.seed, Stream::BlockInit, 0);
    SsiaNet::with_blocks(
        backbone,
        cfg.ssia.scheme,
        (data::SIDE, data::SIDE),
        &cfg.ssia.target,
        cfg.ssia.blocks.clone(),
        &mut rng,
    )
}

/// Exclusive claim on a run directory, released on drop.
pub struct RunLock {
    path: PathBuf,
    _file: File,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let path = dir.join(".lock");
        let file = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Config(format!(
                    "run directory {} is in use (remove {} if no run is active)",
                    dir.display(),
                    path.display()
                ))
            } else {
                Error::io(format!("creating {}", path.display()), e)
            }
        })?;
        Ok(Self { path, _file: file })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Files produced by a training run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub rows: Vec<EpochRow>,
    pub metrics_csv: PathBuf,
    /// Last full training checkpoint written.
    pub checkpoint: Option<PathBuf>,
    /// Backbone-only checkpoint, written when the last epoch completes.
    pub stripped: Option<PathBuf>,
    /// Epochs completed so far (including those before a resume).
    pub epochs_done: u64,
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.cfg";
pub const FINAL_CHECKPOINT: &str = "final.ssia";
pub const STRIPPED_CHECKPOINT: &str = "model_stripped.ssia";

pub fn epoch_checkpoint_name(epoch: u64) -> String {
    format!("checkpoint_epoch{epoch}.ssia")
}

/// Parameters and state of a run between epochs.
pub struct Trainer {
    pub config: Config,
    pub cfg: ExperimentConfig,
    pub net: SsiaNet<f32>,
    pub opt: Sgd<f32>,
    /// 0-based index of the next epoch to run.
    pub next_epoch: u64,
    pub iteration: u64,
    pub csv: String,
}

impl Trainer {
    pub fn new(config: Config) -> Result<Self> {
        let cfg = config.resolve()?;
        let net = build_net(&cfg)?;
        let n_blocks = net.blocks.len();
        Ok(Self {
            opt: Sgd::new(cfg.train.momentum, cfg.train.weight_decay),
            config,
            cfg,
            net,
            next_epoch: 0,
            iteration: 0,
            csv: csv_header(n_blocks),
        })
    }

    /// Restores parameters, optimizer state, counters and past metrics.
    /// The checkpoint must come from a run with the same config digest.
    pub fn resume_from(&mut self, ck: &Checkpoint) -> Result<()> {
        if ck.text("meta.kind")? != "train" {
            return Err(Error::Config("resume needs a training checkpoint, not a stripped one".into()));
        }
        let digest = ck.text("meta.config_digest")?;
        if digest != self.config.digest() {
            return Err(Error::Config(format!(
                "checkpoint was written under config digest {digest}, this run has {}",
                self.config.digest()
            )));
        }
        ck.restore_module(&mut self.net)?;
        let mut velocity = std::collections::BTreeMap::new();
        let mut missing = None;
        self.net.visit_params(&mut |p| match ck.f32(&format!("optim.momentum.{}", p.name)) {
            Ok(t) => {
                velocity.insert(p.name.clone(), t.clone());
            }
            Err(e) => missing = missing.take().or(Some(e)),
        });
        if let Some(e) = missing {
            // momentum buffers only exist once a step has been taken
            if ck.u64s("meta.iteration")?[0] > 0 {
                return Err(e);
            }
        }
        self.opt.velocity = velocity;
        let rng = ck.u64s("rng.state")?;
        if rng[0] != self.cfg.train.seed {
            return Err(Error::Config("checkpoint seed differs from the config seed".into()));
        }
        self.next_epoch = ck.u64s("meta.epoch")?[0];
        self.iteration = ck.u64s("meta.iteration")?[0];
        self.csv = ck.text("meta.metrics")?;
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_text("meta.kind", "train");
        ck.insert_text("meta.config", &self.config.canonical());
        ck.insert_text("meta.config_digest", &self.config.digest());
        ck.insert_u64s("meta.epoch", &[self.next_epoch]);
        ck.insert_u64s("meta.iteration", &[self.iteration]);
        ck.insert_u64s("rng.state", &[self.cfg.train.seed, self.next_epoch]);
        ck.insert_text("meta.metrics", &self.csv);
        ck.insert_module(&self.net);
        for (name, v) in &self.opt.velocity {
            ck.insert(format!("optim.momentum.{name}"), Value::F32(v.clone()));
        }
        ck
    }

    /// Backbone parameters and buffers plus metadata; no blocks, no
    /// optimizer or RNG state.
    pub fn stripped_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new();
        ck.insert_text("meta.kind", "stripped");
        ck.insert_text("meta.config", &self.config.canonical());
        ck.insert_text("meta.config_digest", &self.config.digest());
        ck.insert_u64s("meta.epoch", &[self.next_epoch]);
        ck.insert_module(&self.net.backbone);
        ck
    }

    fn lr_at(&self, iters_per_epoch: u64) -> f64 {
        let t = &self.cfg.train;
        let progress = if t.per_iteration_lr {
            self.iteration as f64 / (t.epochs * iters_per_epoch).max(1) as f64
        } else {
            self.next_epoch as f64 / t.epochs as f64
        };
        cosine_lr(progress, t.lr0)
    }

    /// Runs one epoch over `train` and evaluates on `test`; returns the two rows.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<[EpochRow; 2]> {
        let t = self.cfg.train.clone();
        let epoch = self.next_epoch;
        let batches = data::batches(
            train,
            BatchConfig {
                batch_size: t.batch_size,
                seed: t.seed,
                epoch,
                train: true,
                augment: self.cfg.data.augment,
                norm: self.cfg.data.norm,
            },
        )?;
        let iters = batches.num_batches() as u64;
        let epoch_lr = self.lr_at(iters);
        let mut acc = Accum::default();
        for batch in batches {
            let lr = self.lr_at(iters);
            let mut tape = Tape::new();
            let x = tape.constant(batch.images);
            let out = self.net.forward_with_taps(&mut tape, x, Mode::Train)?;
            let task = tape.cross_entropy(out.logits, &batch.labels)?;
            let block_vars: Vec<_> = out.block_losses.iter().map(|l| l.total).collect();
            let skip = self.cfg.ssia.warmup_skip && self.iteration < self.cfg.ssia.skip_iters;
            let ssia = if block_vars.is_empty() {
                None
            } else {
                Some(total_ssia_loss(&mut tape, &block_vars, &self.cfg.loss)?)
            };
            let loss = total_loss(&mut tape, task, ssia.filter(|_| !skip), &self.cfg.loss)?;
            if !tape.value(loss).all_finite() {
                let what = tape.first_non_finite().unwrap_or_else(|| "the loss".into());
                return Err(Error::NonFinite(format!(
                    "epoch {} iteration {}: {what}",
                    epoch + 1,
                    self.iteration
                )));
            }
            let grads = tape.backward(loss)?;
            self.net.zero_grad();
            self.net.accumulate_grads(&tape, &grads)?;
            self.opt.step(&mut self.net, lr)?;

            let blocks: Vec<f64> = block_vars.iter().map(|&v| tape.value(v).item() as f64).collect();
            let lv = tape.value(out.logits);
            acc.add(
                batch.labels.len(),
                topk_hits(lv, &batch.labels, 1),
                topk_hits(lv, &batch.labels, 5),
                tape.value(task).item() as f64,
                ssia.map_or(0.0, |s| tape.value(s).item() as f64),
                &blocks,
            );
            self.iteration += 1;
        }
        let mut train_m = acc.finish();
        train_m.ssia_blocks.resize(self.net.blocks.len(), 0.0);
        let test_m = evaluate_with_blocks(
            &mut self.net,
            test,
            t.eval_batch_size,
            self.cfg.data.norm,
            &self.cfg.loss.per_block,
        )?;
        self.next_epoch += 1;
        let rows = [
            EpochRow {
                epoch: epoch + 1,
                split: "train",
                metrics: train_m,
                lr: epoch_lr,
            },
            EpochRow {
                epoch: epoch + 1,
                split: "test",
                metrics: test_m,
                lr: epoch_lr,
            },
        ];
        for r in &rows {
            self.csv.push_str(&csv_row(r));
        }
        Ok(rows)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Full run for a config: resume if asked, train the remaining epochs (or up
/// to `train.stop_after_epoch`), write metrics, checkpoints and the canonical
/// config into `out.dir`.
pub fn train(config: &Config, train_set: &Dataset, test_set: &Dataset) -> Result<RunReport> {
    let mut trainer = Trainer::new(config.clone())?;
    let cfg = trainer.cfg.clone();
    let out = cfg.out_dir.clone();
    let _lock = RunLock::acquire(&out)?;
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(path) = &cfg.train.resume {
        trainer.resume_from(&Checkpoint::load(path)?)?;
    }
    write_file(&out.join(CONFIG_FILE), config.canonical().as_bytes())?;
    let metrics_csv = out.join(METRICS_FILE);
    write_file(&metrics_csv, trainer.csv.as_bytes())?;

    let last = cfg.train.stop_after_epoch.map_or(cfg.train.epochs, |s| s.min(cfg.train.epochs));
    let mut rows = Vec::new();
    let mut checkpoint = None;
    while trainer.next_epoch < last {
        rows.extend(trainer.run_epoch(train_set, test_set)?);
        write_file(&metrics_csv, trainer.csv.as_bytes())?;
        let e = trainer.next_epoch;
        let every = cfg.train.checkpoint_every;
        if (every > 0 && e % every == 0) || e == last {
            let p = out.join(epoch_checkpoint_name(e));
            trainer.checkpoint().save(&p)?;
            checkpoint = Some(p);
        }
    }
    let mut stripped = None;
    if trainer.next_epoch >= cfg.train.epochs {
        let p = out.join(FINAL_CHECKPOINT);
        trainer.checkpoint().save(&p)?;
        checkpoint = Some(p);
        let p = out.join(STRIPPED_CHECKPOINT);
        trainer.stripped_checkpoint().save(&p)?;
        stripped = Some(p);
    }
    Ok(RunReport {
        rows,
        metrics_csv,
        checkpoint,
        stripped,
        epochs_done: trainer.next_epoch,
    })
}

/// Rebuilds the inference backbone stored in any checkpoint (training or
/// stripped) together with the config it was trained under.
pub fn load_backbone(ck: &Checkpoint) -> Result<(Config, Backbone<f32>)> {
    let config = Config::parse(&ck.text("meta.config")?)?;
    let cfg = config.resolve()?;
    let mut rng = stream_rng(cfg.train.seed, Stream::BackboneInit, 0);
    let mut backbone = Backbone::new(cfg.arch, cfg.num_classes, &mut rng)?;
    ck.restore_module(&mut backbone)?;
    Ok((config, backbone))
}

/// Rebuilds the block-attached network from a training checkpoint.
pub fn load_net(ck: &Checkpoint) -> Result<(Config, SsiaNet<f32>)> {
    if ck.text("meta.kind")? != "train" {
        return Err(Error::Config("checkpoint is stripped: it holds no SSIA blocks".into()));
    }
    let config = Config::parse(&ck.text("meta.config")?)?;
    let cfg = config.resolve()?;
    let mut net = build_net(&cfg)?;
    ck.restore_module(&mut net)?;
    Ok((config, net))
}
