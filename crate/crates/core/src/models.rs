//! Residual backbones with per-stage taps, and the wiring of SSIA blocks onto
//! those taps.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, BatchNorm, Buffer, Conv2d, Linear, Mode, Module, Param};
use crate::ssia::{BlockConfig, BlockLoss, SsiaBlock};
use crate::tensor::{Real, Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    /// Widths 16/32/64/128, one basic block per stage.
    ResnetTiny8,
    /// Widths 64/128/256/512, two basic blocks per stage.
    Resnet18Like,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::ResnetTiny8 => "resnet-tiny-8",
            Arch::Resnet18Like => "resnet-18-like",
        }
    }

    pub fn widths(self) -> [usize; 4] {
        match self {
            Arch::ResnetTiny8 => [16, 32, 64, 128],
            Arch::Resnet18Like => [64, 128, 256, 512],
        }
    }

    pub fn blocks_per_stage(self) -> [usize; 4] {
        match self {
            Arch::ResnetTiny8 => [1, 1, 1, 1],
            Arch::Resnet18Like => [2, 2, 2, 2],
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "resnet-tiny-8" => Ok(Arch::ResnetTiny8),
            "resnet-18-like" => Ok(Arch::Resnet18Like),
            _ => Err(Error::Config(format!(
                "unknown arch {s:?} (expected resnet-tiny-8 or resnet-18-like)"
            ))),
        }
    }
}

const STAGE_STRIDES: [usize; 4] = [1, 2, 2, 2];

/// conv3x3-bn-relu-conv3x3-bn plus a shortcut, then relu. The shortcut is a
/// 1×1 conv + bn whenever stride or width changes.
#[derive(Debug, Clone)]
pub struct BasicBlock<T> {
    pub conv1: Conv2d<T>,
    pub bn1: BatchNorm<T>,
    pub conv2: Conv2d<T>,
    pub bn2: BatchNorm<T>,
    pub shortcut: Option<(Conv2d<T>, BatchNorm<T>)>,
}

impl<T: Real> BasicBlock<T> {
    fn new<R: Rng + ?Sized>(name: &str, in_ch: usize, out_ch: usize, stride: usize, rng: &mut R) -> Self {
        let conv1 = Conv2d::new(&format!("{name}.conv1"), in_ch, out_ch, 3, stride, 1, false, rng);
        let conv2 = Conv2d::new(&format!("{name}.conv2"), out_ch, out_ch, 3, 1, 1, false, rng);
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                Conv2d::new(&format!("{name}.down.conv"), in_ch, out_ch, 1, stride, 0, false, rng),
                BatchNorm::new(&format!("{name}.down.bn"), out_ch),
            )
        });
        Self {
            conv1,
            bn1: BatchNorm::new(&format!("{name}.bn1"), out_ch),
            conv2,
            bn2: BatchNorm::new(&format!("{name}.bn2"), out_ch),
            shortcut,
        }
    }

    fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv1.forward(tape, x)?;
        let y = self.bn1.forward(tape, y, mode)?;
        let y = tape.relu(y);
        let y = self.conv2.forward(tape, y)?;
        let y = self.bn2.forward(tape, y, mode)?;
        let skip = match &mut self.shortcut {
            Some((conv, bn)) => {
                let s = conv.forward(tape, x)?;
                bn.forward(tape, s, mode)?
            }
            None => x,
        };
        let y = tape.add(y, skip)?;
        Ok(tape.relu(y))
    }
}

impl<T: Real> Module<T> for BasicBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.conv1.visit_params(f);
        self.bn1.visit_params(f);
        self.conv2.visit_params(f);
        self.bn2.visit_params(f);
        if let Some((c, b)) = &self.shortcut {
            c.visit_params(f);
            b.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.conv1.visit_params_mut(f);
        self.bn1.visit_params_mut(f);
        self.conv2.visit_params_mut(f);
        self.bn2.visit_params_mut(f);
        if let Some((c, b)) = &mut self.shortcut {
            c.visit_params_mut(f);
            b.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.bn1.visit_buffers(f);
        self.bn2.visit_buffers(f);
        if let Some((_, b)) = &self.shortcut {
            b.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.bn1.visit_buffers_mut(f);
        self.bn2.visit_buffers_mut(f);
        if let Some((_, b)) = &mut self.shortcut {
            b.visit_buffers_mut(f);
        }
    }
}

/// Output of a backbone pass: logits plus the four stage outputs.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub logits: Var,
    /// `taps[s]` is the output of stage `s + 1`.
    pub taps: Vec<Var>,
}

/// CIFAR-style residual net: 3×3 stem (no max-pool), four stages with strides
/// 1, 2, 2, 2, global average pool and a linear classifier.
#[derive(Debug, Clone)]
pub struct Backbone<T> {
    pub arch: Arch,
    pub stem_conv: Conv2d<T>,
    pub stem_bn: BatchNorm<T>,
    pub stages: Vec<Vec<BasicBlock<T>>>,
    pub fc: Linear<T>,
}

impl<T: Real> Backbone<T> {
    pub fn new<R: Rng + ?Sized>(arch: Arch, num_classes: usize, rng: &mut R) -> Result<Self> {
        if num_classes < 1 {
            return Err(Error::Config("num_classes must be at least 1".into()));
        }
        let widths = arch.widths();
        let stem_conv = Conv2d::new("stem.conv", 3, widths[0], 3, 1, 1, false, rng);
        let stem_bn = BatchNorm::new("stem.bn", widths[0]);
        let mut stages = Vec::with_capacity(4);
        let mut in_ch = widths[0];
        for (s, (&w, &n)) in widths.iter().zip(&arch.blocks_per_stage()).enumerate() {
            let blocks = (0..n)
                .map(|b| {
                    let stride = if b == 0 { STAGE_STRIDES[s] } else { 1 };
                    let blk = BasicBlock::new(&format!("stage{}.block{}", s + 1, b + 1), in_ch, w, stride, rng);
                    in_ch = w;
                    blk
                })
                .collect();
            stages.push(blocks);
        }
        let fc = Linear::new("fc", in_ch, num_classes, rng);
        Ok(Self {
            arch,
            stem_conv,
            stem_bn,
            stages,
            fc,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn num_classes(&self) -> usize {
        self.fc.output_width()
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        self.arch.widths().to_vec()
    }

    /// Spatial size of each stage output for an `h × w` input.
    pub fn stage_spatial(&self, input: (usize, usize)) -> Vec<(usize, usize)> {
        let mut cur = input;
        STAGE_STRIDES
            .iter()
            .map(|&s| {
                // 3×3 pad 1 and 1×1 pad 0 agree: ceil(x / s)
                cur = (cur.0.div_ceil(s), cur.1.div_ceil(s));
                cur
            })
            .collect()
    }

    pub fn forward_taps(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<BackboneOutput> {
        match tape.shape(x) {
            [_, 3, _, _] => {}
            s => return Err(Error::Shape(format!("backbone expects [b,3,h,w] input, got {s:?}"))),
        }
        let y = self.stem_conv.forward(tape, x)?;
        let y = self.stem_bn.forward(tape, y, mode)?;
        let mut y = tape.relu(y);
        let mut taps = Vec::with_capacity(self.stages.len());
        for stage in &mut self.stages {
            for block in stage {
                y = block.forward(tape, y, mode)?;
            }
            taps.push(y);
        }
        let pooled = nn::pool_over_space(tape, y)?;
        let b = tape.shape(pooled)[0];
        let pooled = tape.reshape(pooled, &[b, self.fc.input_width()])?;
        let logits = self.fc.forward(tape, pooled)?;
        Ok(BackboneOutput { logits, taps })
    }

    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Var> {
        Ok(self.forward_taps(tape, x, mode)?.logits)
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.stem_conv.visit_params(f);
        self.stem_bn.visit_params(f);
        for b in self.stages.iter().flatten() {
            b.visit_params(f);
        }
        self.fc.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.stem_conv.visit_params_mut(f);
        self.stem_bn.visit_params_mut(f);
        for b in self.stages.iter_mut().flatten() {
            b.visit_params_mut(f);
        }
        self.fc.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.stem_bn.visit_buffers(f);
        for b in self.stages.iter().flatten() {
            b.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.stem_bn.visit_buffers_mut(f);
        for b in self.stages.iter_mut().flatten() {
            b.visit_buffers_mut(f);
        }
    }
}

/// Which stage feeds the signal side of each block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConnectionScheme {
    /// Every block reads the last stage.
    Final,
    /// Each block reads the next stage.
    Cascaded,
    /// Each block reads its own prediction stage.
    Identity,
}

impl ConnectionScheme {
    pub fn name(self) -> &'static str {
        match self {
            ConnectionScheme::Final => "final",
            ConnectionScheme::Cascaded => "cascaded",
            ConnectionScheme::Identity => "identity",
        }
    }
}

impl fmt::Display for ConnectionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConnectionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "final" => Ok(ConnectionScheme::Final),
            "cascaded" => Ok(ConnectionScheme::Cascaded),
            "identity" => Ok(ConnectionScheme::Identity),
            _ => Err(Error::Config(format!(
                "unknown scheme {s:?} (expected final, cascaded or identity)"
            ))),
        }
    }
}

/// 1-based `(prediction stage, signal stage)` pairs. Prediction taps are
/// every stage but the last.
pub fn derive_pairs(scheme: ConnectionScheme, n_stages: usize) -> Result<Vec<(usize, usize)>> {
    if n_stages < 2 {
        return Err(Error::Config(format!(
            "{scheme} wiring needs at least 2 stages, got {n_stages}"
        )));
    }
    Ok((1..n_stages)
        .map(|l| match scheme {
            ConnectionScheme::Final => (l, n_stages),
            ConnectionScheme::Cascaded => (l, l + 1),
            ConnectionScheme::Identity => (l, l),
        })
        .collect())
}

/// How the spatial signal size of each block is chosen.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum TargetSpatial {
    /// Natural size of stage `l_n + 1`: the signal stage itself for cascaded,
    /// and the one-step-down ladder for final and identity.
    #[default]
    Auto,
    /// One size per block.
    Explicit(Vec<(usize, usize)>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TapSpec {
    pub prediction_stage: usize,
    pub signal_stage: usize,
    pub target_spatial: (usize, usize),
}

pub fn tap_specs(
    scheme: ConnectionScheme,
    stage_spatial: &[(usize, usize)],
    target: &TargetSpatial,
) -> Result<Vec<TapSpec>> {
    let pairs = derive_pairs(scheme, stage_spatial.len())?;
    if let TargetSpatial::Explicit(v) = target {
        if v.len() != pairs.len() {
            return Err(Error::Config(format!(
                "target_spatial lists {} sizes for {} blocks",
                v.len(),
                pairs.len()
            )));
        }
    }
    Ok(pairs
        .iter()
        .enumerate()
        .map(|(i, &(l, h))| TapSpec {
            prediction_stage: l,
            signal_stage: h,
            target_spatial: match target {
                TargetSpatial::Auto => stage_spatial[l],
                TargetSpatial::Explicit(v) => v[i],
            },
        })
        .collect())
}

/// Result of one pass of a block-attached network.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Var,
    pub taps: Vec<Var>,
    pub block_losses: Vec<BlockLoss>,
}

/// A backbone with SSIA blocks reading its taps. Blocks only read taps, so
/// logits do not depend on them.
#[derive(Debug, Clone)]
pub struct SsiaNet<T> {
    pub backbone: Backbone<T>,
    pub blocks: Vec<SsiaBlock<T>>,
}

impl<T: Real> SsiaNet<T> {
    pub fn baseline(backbone: Backbone<T>) -> Self {
        Self {
            backbone,
            blocks: Vec::new(),
        }
    }

    /// Attaches one block per tap pair. `cfgs` holds one config per block;
    /// their `target_spatial` is overwritten from the tap specs.
    pub fn with_blocks<R: Rng + ?Sized>(
        backbone: Backbone<T>,
        scheme: ConnectionScheme,
        input: (usize, usize),
        target: &TargetSpatial,
        cfgs: Vec<BlockConfig>,
        rng: &mut R,
    ) -> Result<Self> {
        let specs = tap_specs(scheme, &backbone.stage_spatial(input), target)?;
        if cfgs.len() != specs.len() {
            return Err(Error::Config(format!(
                "{} block configs for {} blocks",
                cfgs.len(),
                specs.len()
            )));
        }
        let channels = backbone.stage_channels();
        let blocks = specs
            .iter()
            .zip(cfgs)
            .enumerate()
            .map(|(i, (spec, cfg))| {
                let cfg = BlockConfig {
                    target_spatial: spec.target_spatial,
                    ..cfg
                };
                SsiaBlock::new(
                    i + 1,
                    spec.prediction_stage,
                    spec.signal_stage,
                    channels[spec.prediction_stage - 1],
                    channels[spec.signal_stage - 1],
                    cfg,
                    rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { backbone, blocks })
    }

    /// One backbone pass; each block consumes its two taps.
    pub fn forward_with_taps(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardOutput> {
        let out = self.backbone.forward_taps(tape, x, mode)?;
        let mut block_losses = Vec::with_capacity(self.blocks.len());
        for block in &mut self.blocks {
            let tap = |s: usize| {
                out.taps.get(s.wrapping_sub(1)).copied().ok_or_else(|| {
                    Error::Config(format!("block {} reads stage {s}, net has {}", block.number, out.taps.len()))
                })
            };
            let (x_l, x_h) = (tap(block.prediction_stage)?, tap(block.signal_stage)?);
            block_losses.push(block.loss(tape, x_l, x_h, mode)?);
        }
        Ok(ForwardOutput {
            logits: out.logits,
            taps: out.taps,
            block_losses,
        })
    }

    /// Drops the blocks, leaving the inference network.
    pub fn strip_blocks(self) -> Backbone<T> {
        self.backbone
    }
}

impl<T: Real> Module<T> for SsiaNet<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.backbone.visit_params(f);
        for b in &self.blocks {
            b.visit_params(f);
        }
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.backbone.visit_params_mut(f);
        for b in &mut self.blocks {
            b.visit_params_mut(f);
        }
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.backbone.visit_buffers(f);
        for b in &self.blocks {
            b.visit_buffers(f);
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.backbone.visit_buffers_mut(f);
        for b in &mut self.blocks {
            b.visit_buffers_mut(f);
        }
    }
}
