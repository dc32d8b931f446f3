//! The SSIA block: supervisory signal generator, macro-perception predictor
//! (MPP), valid mask and the masked regression loss between them.
//!
//! The prediction side takes a low-layer map `x_l[b,C,H,W]`; the signal side
//! takes a higher-layer map `x_h[b,C′,H′,W′]` and is cut with a stop-gradient.
//! Both sides are reduced to a spatial descriptor (mean over channels) and a
//! channel descriptor (mean over space). The signal descriptors are
//! standardized per sample; the MPP regresses them from the low-layer
//! descriptors with two single-hidden-layer MLPs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Buffer, MlpHead, Mode, Module, Param};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Per-block hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockConfig {
    /// Hidden width `d` of both MLPs.
    pub hidden: usize,
    /// Lower threshold on `|g|` for a supervisory value to count.
    pub eta: f64,
    /// Upper threshold on `|g|`.
    pub upper_bound: f64,
    /// Added to the valid count in the loss denominator.
    pub eps_loss: f64,
    /// Added to the variance when standardizing.
    pub eps_norm: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
    /// Spatial size `(H′, W′)` of the spatial signal and prediction.
    pub target_spatial: (usize, usize),
    /// Standardize the prediction-side descriptors before the MLPs.
    pub normalize_descriptors: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            eta: 0.5,
            upper_bound: 10.0,
            eps_loss: 1e-8,
            eps_norm: 1e-5,
            lambda_s: 1.0,
            lambda_c: 3.0,
            target_spatial: (1, 1),
            normalize_descriptors: true,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden == 0 {
            return fail("ssia hidden width must be at least 1".into());
        }
        if !(self.eta >= 0.0 && self.eta < self.upper_bound) {
            return fail(format!(
                "ssia thresholds need 0 <= eta < upper_bound, got eta={} upper_bound={}",
                self.eta, self.upper_bound
            ));
        }
        if !(self.eps_loss > 0.0 && self.eps_norm > 0.0) {
            return fail("ssia eps_loss and eps_norm must be positive".into());
        }
        if self.lambda_s < 0.0 || self.lambda_c < 0.0 || self.lambda_s + self.lambda_c <= 0.0 {
            return fail(format!(
                "ssia lambda_s/lambda_c must be non-negative with a positive sum, got {}/{}",
                self.lambda_s, self.lambda_c
            ));
        }
        if self.target_spatial.0 == 0 || self.target_spatial.1 == 0 {
            return fail("ssia target spatial size must be positive".into());
        }
        Ok(())
    }
}

/// Per-sample standardization over `axes`: `(x − mean) / sqrt(var + eps)`.
pub fn normalize<T: Real>(tape: &mut Tape<T>, x: Var, axes: &[usize], eps_norm: f64) -> Result<Var> {
    let mean = tape.mean_axes(x, axes)?;
    let centered = tape.sub(x, mean)?;
    let sq = tape.square(centered);
    let var = tape.mean_axes(sq, axes)?;
    let var = tape.add_scalar(var, T::from_f64(eps_norm));
    let inv = tape.powf(var, T::from_f64(-0.5));
    tape.mul(centered, inv)
}

/// Detached supervisory signals `g_s[b,1,H′,W′]` and `g_c[b,C′,1,1]`.
#[derive(Debug, Clone, Copy)]
pub struct SupervisorySignals {
    pub g_s: Var,
    pub g_c: Var,
}

/// Macro-perception predictions, same shapes as the signals, on the tape.
#[derive(Debug, Clone, Copy)]
pub struct MacroPredictions {
    pub f_s: Var,
    pub f_c: Var,
}

/// Pools, standardizes and detaches the signal-side map. The spatial
/// descriptor is resized to `cfg.target_spatial` first when it differs.
pub fn generate_signals<T: Real>(tape: &mut Tape<T>, x_h: Var, cfg: &BlockConfig) -> Result<SupervisorySignals> {
    let spatial = nn::pool_over_channels(tape, x_h)?;
    let (th, tw) = cfg.target_spatial;
    let spatial = match tape.shape(spatial) {
        [_, _, h, w] if (*h, *w) == (th, tw) => spatial,
        _ => nn::bilinear_resize(tape, spatial, th, tw)?,
    };
    let spatial = normalize(tape, spatial, &[2, 3], cfg.eps_norm)?;
    let channel = nn::pool_over_space(tape, x_h)?;
    let channel = normalize(tape, channel, &[1], cfg.eps_norm)?;
    Ok(SupervisorySignals {
        g_s: tape.stop_gradient(spatial),
        g_c: tape.stop_gradient(channel),
    })
}

/// The weak predictor: `mlp_s` maps the flattened `H′·W′` spatial descriptor
/// to `H′·W′` values, `mlp_c` maps `C` channel means to `C′` values.
#[derive(Debug, Clone)]
pub struct MacroPerceptionPredictor<T> {
    pub mlp_s: MlpHead<T>,
    pub mlp_c: MlpHead<T>,
    target_spatial: (usize, usize),
}

impl<T: Real> MacroPerceptionPredictor<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        signal_channels: usize,
        cfg: &BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        if in_channels == 0 || signal_channels == 0 {
            return Err(Error::Config(format!(
                "{name}: channel counts must be positive ({in_channels} → {signal_channels})"
            )));
        }
        let (h, w) = cfg.target_spatial;
        Ok(Self {
            mlp_s: MlpHead::new(&format!("{name}.mlp_s"), h * w, cfg.hidden, h * w, rng),
            mlp_c: MlpHead::new(&format!("{name}.mlp_c"), in_channels, cfg.hidden, signal_channels, rng),
            target_spatial: cfg.target_spatial,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.mlp_c.input_width()
    }

    pub fn signal_channels(&self) -> usize {
        self.mlp_c.output_width()
    }

    pub fn target_spatial(&self) -> (usize, usize) {
        self.target_spatial
    }

    /// `F_s = MLP_s(resize(mean_c(x_l)))`, `F_c = MLP_c(mean_hw(x_l))`.
    pub fn predict(&mut self, tape: &mut Tape<T>, x_l: Var, cfg: &BlockConfig, mode: Mode) -> Result<MacroPredictions> {
        nn::expect_rank4(tape, x_l, "predict")?;
        let s = tape.shape(x_l).to_vec();
        let (b, c) = (s[0], s[1]);
        if c != self.in_channels() {
            return Err(Error::Shape(format!(
                "prediction side has {c} channels, predictor expects {}",
                self.in_channels()
            )));
        }
        let (th, tw) = self.target_spatial;

        let phi_s = nn::pool_over_channels(tape, x_l)?;
        let phi_s = if (s[2], s[3]) == (th, tw) {
            phi_s
        } else {
            nn::bilinear_resize(tape, phi_s, th, tw)?
        };
        let phi_s = if cfg.normalize_descriptors {
            normalize(tape, phi_s, &[2, 3], cfg.eps_norm)?
        } else {
            phi_s
        };
        let phi_s = tape.reshape(phi_s, &[b, th * tw])?;
        let f_s = self.mlp_s.forward(tape, phi_s, mode)?;
        let f_s = tape.reshape(f_s, &[b, 1, th, tw])?;

        let phi_c = nn::pool_over_space(tape, x_l)?;
        let phi_c = if cfg.normalize_descriptors {
            normalize(tape, phi_c, &[1], cfg.eps_norm)?
        } else {
            phi_c
        };
        let phi_c = tape.reshape(phi_c, &[b, c])?;
        let f_c = self.mlp_c.forward(tape, phi_c, mode)?;
        let f_c = tape.reshape(f_c, &[b, self.signal_channels(), 1, 1])?;
        Ok(MacroPredictions { f_s, f_c })
    }
}

impl<T: Real> Module<T> for MacroPerceptionPredictor<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.mlp_s.visit_params(f);
        self.mlp_c.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mlp_s.visit_params_mut(f);
        self.mlp_c.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.mlp_s.visit_buffers(f);
        self.mlp_c.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.mlp_s.visit_buffers_mut(f);
        self.mlp_c.visit_buffers_mut(f);
    }
}

/// 1 where `eta < |g| < upper_bound`, else 0.
pub fn valid_mask<T: Real>(g: &Tensor<T>, cfg: &BlockConfig) -> Tensor<T> {
    let (lo, hi) = (T::from_f64(cfg.eta), T::from_f64(cfg.upper_bound));
    g.map(|v| if v.abs() > lo && v.abs() < hi { T::one() } else { T::zero() })
}

/// Masked mean squared error per sample, averaged over the batch:
/// `Σ_k m(k)(f(k) − g(k))² / (eps_loss + Σ_k m(k))`.
pub fn ssia_loss<T: Real>(tape: &mut Tape<T>, f: Var, g: Var, cfg: &BlockConfig) -> Result<Var> {
    let shape = tape.shape(f).to_vec();
    if shape != tape.shape(g) {
        return Err(Error::Shape(format!(
            "ssia_loss prediction {shape:?} vs signal {:?}",
            tape.shape(g)
        )));
    }
    if tape.requires_grad(g) {
        return Err(Error::Shape("ssia_loss signal must be detached".into()));
    }
    if shape.len() < 2 {
        return Err(Error::Shape(format!("ssia_loss expects a batch axis, got {shape:?}")));
    }
    let b = shape[0];
    let per: usize = shape[1..].iter().product();
    let mask = valid_mask(tape.value(g), cfg);
    let inv_denom: Vec<T> = mask
        .data()
        .chunks(per)
        .map(|m| T::one() / (T::from_f64(cfg.eps_loss) + m.iter().copied().sum::<T>()))
        .collect();
    let mut denom_shape = vec![1; shape.len()];
    denom_shape[0] = b;

    let mask = tape.constant(mask);
    let inv_denom = tape.constant(Tensor::from_vec(&denom_shape, inv_denom)?);
    let diff = tape.sub(f, g)?;
    let sq = tape.square(diff);
    let masked = tape.mul(sq, mask)?;
    let axes: Vec<usize> = (1..shape.len()).collect();
    let per_sample = tape.sum_axes(masked, &axes)?;
    let per_sample = tape.mul(per_sample, inv_denom)?;
    Ok(tape.mean_all(per_sample))
}

/// Loss of one block and its two components.
#[derive(Debug, Clone, Copy)]
pub struct BlockLoss {
    pub total: Var,
    pub spatial: Var,
    pub channel: Var,
}

/// `λ_s · L(F_s, G_s) + λ_c · L(F_c, G_c)`.
pub fn block_loss<T: Real>(
    tape: &mut Tape<T>,
    x_l: Var,
    x_h: Var,
    mpp: &mut MacroPerceptionPredictor<T>,
    cfg: &BlockConfig,
    mode: Mode,
) -> Result<BlockLoss> {
    let signals = generate_signals(tape, x_h, cfg)?;
    let preds = mpp.predict(tape, x_l, cfg, mode)?;
    if tape.shape(signals.g_c)[1] != mpp.signal_channels() {
        return Err(Error::Shape(format!(
            "signal side has {} channels, predictor produces {}",
            tape.shape(signals.g_c)[1],
            mpp.signal_channels()
        )));
    }
    let spatial = ssia_loss(tape, preds.f_s, signals.g_s, cfg)?;
    let channel = ssia_loss(tape, preds.f_c, signals.g_c, cfg)?;
    let ws = tape.scale(spatial, T::from_f64(cfg.lambda_s));
    let wc = tape.scale(channel, T::from_f64(cfg.lambda_c));
    let total = tape.add(ws, wc)?;
    Ok(BlockLoss { total, spatial, channel })
}

/// An attached block: which stages it reads, its settings and its predictor.
#[derive(Debug, Clone)]
pub struct SsiaBlock<T> {
    /// 1-based block number, lowest prediction stage first.
    pub number: usize,
    /// 1-based stage index feeding the prediction side.
    pub prediction_stage: usize,
    /// 1-based stage index feeding the signal side.
    pub signal_stage: usize,
    pub cfg: BlockConfig,
    pub mpp: MacroPerceptionPredictor<T>,
}

impl<T: Real> SsiaBlock<T> {
    pub fn new<R: Rng + ?Sized>(
        number: usize,
        prediction_stage: usize,
        signal_stage: usize,
        prediction_channels: usize,
        signal_channels: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let mpp = MacroPerceptionPredictor::new(
            &format!("ssia.block{number}"),
            prediction_channels,
            signal_channels,
            &cfg,
            rng,
        )?;
        Ok(Self {
            number,
            prediction_stage,
            signal_stage,
            cfg,
            mpp,
        })
    }

    pub fn loss(&mut self, tape: &mut Tape<T>, x_l: Var, x_h: Var, mode: Mode) -> Result<BlockLoss> {
        block_loss(tape, x_l, x_h, &mut self.mpp, &self.cfg, mode)
    }
}

impl<T: Real> Module<T> for SsiaBlock<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.mpp.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.mpp.visit_params_mut(f);
    }

    fn visit_buffers(&self, f: &mut dyn FnMut(&Buffer<T>)) {
        self.mpp.visit_buffers(f);
    }

    fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&mut Buffer<T>)) {
        self.mpp.visit_buffers_mut(f);
    }
}
