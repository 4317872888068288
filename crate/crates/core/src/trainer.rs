//! Rate-distortion training of the flow and the entropy model.
//!
//! Quantization is replaced by additive `U[−½, ½)` noise throughout. The
//! loss of one frame is `R + λ·P·D_c·D` where `R` is in bits, `D` is the
//! layer-weighted latent MSE, `D_c` the number of latent coordinates and `P`
//! the nominal pixel count; this is rate per pixel plus `λ` times the
//! squared error of the frame, rescaled by `P`.

use std::io::Write;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Graph, Var};
use crate::entropy::StagedEntropy;
use crate::error::{Error, Result};
use crate::flow::{Direction, FlowConfig, Granularity, StagedFlow};
use crate::latent::{LatentCode, LatentSequence, StageLayout, FULL_LAYERS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Losses above this abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
pub const SEED_ENV: &str = "SGANC_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lambda_l1: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    /// Frames per inter training window.
    pub window: usize,
    pub steps: usize,
    pub seed: u64,
    /// `None` picks the three-stage split for 18-layer latents and a single
    /// stage otherwise.
    pub stages: Option<StageLayout>,
    pub width: u32,
    pub height: u32,
    pub flow: FlowConfig,
    /// One entropy model per channel shared by every layer of a stage.
    pub shared_entropy: bool,
    /// When false only the entropy model is updated (fitting an intra model
    /// to an already trained flow).
    pub train_flow: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-5,
            lambda_l1: 0.0,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            window: 4,
            steps: 1000,
            seed: 0,
            stages: None,
            width: 1024,
            height: 1024,
            flow: FlowConfig::default(),
            shared_entropy: false,
            train_flow: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad("lambda must be finite and non-negative");
        }
        if !(self.lambda_l1 >= 0.0 && self.lambda_l1.is_finite()) {
            return bad("lambda_l1 must be finite and non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return bad("beta1 and beta2 must lie in (0, 1)");
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.window < 2 {
            return bad("window must be at least 2");
        }
        if self.width == 0 || self.height == 0 {
            return bad("image dimensions must be positive");
        }
        if self.flow.coupling_layers == 0 || self.flow.depth < 2 {
            return bad("flow needs at least one coupling layer of depth >= 2");
        }
        Ok(())
    }

    pub fn pixels(&self) -> f64 {
        self.width as f64 * self.height as f64
    }

    /// Stage layout for a latent with `layers` rows.
    pub fn layout_for(&self, layers: usize) -> Result<StageLayout> {
        let layout = match &self.stages {
            Some(l) => l.clone(),
            None if layers == FULL_LAYERS => StageLayout::coarse_medium_fine(),
            None => StageLayout::single(layers),
        };
        layout.check_layers(layers)?;
        Ok(layout)
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: FromStr>(key: &str, v: &str) -> Result<V> {
            v.parse()
                .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
        }
        match key {
            "lambda" => self.lambda = num(key, value)?,
            "lambda_l1" => self.lambda_l1 = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "window" => self.window = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "stages" => self.stages = Some(value.parse()?),
            "width" => self.width = num(key, value)?,
            "height" => self.height = num(key, value)?,
            "coupling_layers" => self.flow.coupling_layers = num(key, value)?,
            "hidden_width" => self.flow.hidden_width = Some(num(key, value)?),
            "depth" => self.flow.depth = num(key, value)?,
            "granularity" => self.flow.granularity = value.parse::<Granularity>()?,
            "shared_entropy" => self.shared_entropy = num(key, value)?,
            "train_flow" => self.train_flow = num(key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Parses a flat `key = value` file; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", i + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overrides the seed from `SGANC_SEED` when set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}: cannot parse {v:?}")))?;
        }
        Ok(())
    }
}

/// Flow plus entropy model, trained jointly.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnedModel<T> {
    pub flow: StagedFlow<T>,
    pub entropy: StagedEntropy<T>,
}

impl<T: Scalar> LearnedModel<T> {
    /// Identity flow and symmetric factorized entropy model.
    pub fn new(layers: usize, channels: usize, cfg: &TrainConfig) -> Result<Self> {
        let layout = cfg.layout_for(layers)?;
        let flow = StagedFlow::new(layout.clone(), channels, &cfg.flow, cfg.seed)?;
        let entropy = StagedEntropy::factorized(&layout, channels, cfg.shared_entropy);
        Ok(Self { flow, entropy })
    }

    pub fn layers(&self) -> usize {
        self.flow.layout().layers()
    }

    pub fn channels(&self) -> usize {
        self.flow.channels()
    }

    /// Flow parameters followed by entropy parameters.
    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut p = self.flow.params();
        p.extend(self.entropy.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut p = self.flow.params_mut();
        p.extend(self.entropy.params_mut());
        p
    }

    fn check(&self, code: &LatentCode<T>) -> Result<()> {
        if code.shape() != (self.layers(), self.channels()) {
            return Err(Error::Shape(format!(
                "latent {:?} vs model ({}, {})",
                code.shape(),
                self.layers(),
                self.channels()
            )));
        }
        Ok(())
    }
}

/// `x + ε` with `ε ~ U[−½, ½)` i.i.d. per entry.
pub fn noise_quantize<T: Scalar>(x: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let noise = sample_noise(x.rows(), x.cols(), rng);
    x.zip(&noise, |a, b| a + b)
}

fn sample_noise<T: Scalar>(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor<T> {
    let u = Uniform::new(-0.5, 0.5).expect("valid range");
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| T::of(u.sample(rng))).collect())
}

/// Source of the quantization noise in a loss evaluation.
pub enum NoiseMode<'r> {
    Sampled(&'r mut ChaCha8Rng),
    /// ε ≡ 0; deterministic hook for tests.
    Zero,
}

impl NoiseMode<'_> {
    fn tensor<T: Scalar>(&mut self, rows: usize, cols: usize) -> Tensor<T> {
        match self {
            NoiseMode::Sampled(rng) => sample_noise(rows, cols, *rng),
            NoiseMode::Zero => Tensor::zeros(rows, cols),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    /// Bits per frame.
    pub rate_bits: f64,
    /// Layer-weighted latent MSE.
    pub distortion: f64,
    /// Mean absolute transformed difference per frame (inter only).
    pub l1: f64,
    pub loss: f64,
    /// Likelihoods clamped at the floor.
    pub clamped: usize,
}

/// A built loss with its parameter leaves (model parameter order).
pub struct LossGraph<T> {
    pub graph: Graph<T>,
    pub loss: Var,
    pub leaves: Vec<Var>,
    pub parts: LossParts,
}

impl<T: Scalar> LossGraph<T> {
    pub fn gradients(&self) -> Result<Vec<Tensor<T>>> {
        let grads = self.graph.backward(self.loss)?;
        Ok(self.leaves.iter().map(|&v| grads.wrt(v, &self.graph)).collect())
    }
}

struct Leaves {
    all: Vec<Var>,
    flow: Vec<std::ops::Range<usize>>,
    entropy: Vec<std::ops::Range<usize>>,
}

fn add_leaves<T: Scalar>(g: &mut Graph<T>, model: &LearnedModel<T>) -> Leaves {
    let all: Vec<Var> = model.params().into_iter().map(|p| g.param(p.clone())).collect();
    let offset = model.flow.params().len();
    Leaves {
        all,
        flow: model.flow.stage_param_spans(),
        entropy: model
            .entropy
            .stage_param_spans()
            .into_iter()
            .map(|r| r.start + offset..r.end + offset)
            .collect(),
    }
}

/// Per-entry layer weights of a stage tensor holding `items` blocks.
fn stage_weights<T: Scalar>(flow: &StagedFlow<T>, s: usize, items: usize) -> Tensor<T> {
    let r = &flow.layout().stages()[s];
    let w = &flow.layout().lambda_weights()[r.clone()];
    let c = flow.channels();
    let block: Vec<T> = w.iter().flat_map(|&v| std::iter::repeat_n(T::of(v), c)).collect();
    let (rows, cols) = flow.stage_shape(s, items);
    let data: Vec<T> = (0..items).flat_map(|_| block.iter().copied()).collect();
    Tensor::from_vec(rows, cols, data)
}

struct Accum {
    rate: Vec<Var>,
    dist: Vec<Var>,
    l1: Vec<Var>,
    clamped: usize,
}

fn total<T: Scalar>(g: &mut Graph<T>, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t);
    }
    acc
}

fn rate_term<T: Scalar>(
    g: &mut Graph<T>,
    model: &LearnedModel<T>,
    leaves: &Leaves,
    s: usize,
    y: Var,
    items: usize,
    acc: &mut Accum,
) {
    let stage = model.entropy.stage(s);
    let (mr, mc) = stage.model_shape(items);
    let yr = g.reshape(y, mr, mc);
    let lik = stage
        .model()
        .likelihood_graph(g, yr, &leaves.all[leaves.entropy[s].clone()]);
    let floor = T::of(crate::entropy::LIKELIHOOD_FLOOR);
    acc.clamped += g.value(lik).data().iter().filter(|&&v| v <= floor).count();
    let bits = g.log2(lik);
    acc.rate.push(g.sum(bits));
}

fn finish<T: Scalar>(
    mut g: Graph<T>,
    acc: Accum,
    leaves: Leaves,
    model: &LearnedModel<T>,
    frames: usize,
    cfg: &TrainConfig,
) -> Result<LossGraph<T>> {
    let weight_sum: f64 = model.flow.layout().lambda_weights().iter().sum();
    let c = model.channels() as f64;
    let coords = model.layers() as f64 * c;
    let rate = total(&mut g, &acc.rate);
    let rate = g.scale(rate, T::of(-1.0 / frames as f64));
    let dist = total(&mut g, &acc.dist);
    let dist = g.scale(dist, T::of(1.0 / (frames as f64 * c * weight_sum)));
    let weighted = g.scale(dist, T::of(cfg.lambda * cfg.pixels() * coords));
    let mut loss = g.add(rate, weighted);
    let mut l1 = 0.0;
    if !acc.l1.is_empty() {
        let sum = total(&mut g, &acc.l1);
        let mean = g.scale(sum, T::of(1.0 / frames as f64));
        l1 = g.value(mean).data()[0].as_f64();
        if cfg.lambda_l1 > 0.0 {
            let term = g.scale(mean, T::of(cfg.lambda_l1));
            loss = g.add(loss, term);
        }
    }
    let scalar = |g: &Graph<T>, v: Var| g.value(v).data()[0].as_f64();
    let parts = LossParts {
        rate_bits: scalar(&g, rate),
        distortion: scalar(&g, dist),
        l1,
        loss: scalar(&g, loss),
        clamped: acc.clamped,
    };
    Ok(LossGraph {
        graph: g,
        loss,
        leaves: leaves.all,
        parts,
    })
}

/// Intra loss of a batch: rate of `T(w) + ε` and the distortion of
/// `T⁻¹(T(w) + ε)`.
pub fn intra_loss<T: Scalar>(
    batch: &[&LatentCode<T>],
    model: &LearnedModel<T>,
    cfg: &TrainConfig,
    mut noise: NoiseMode<'_>,
) -> Result<LossGraph<T>> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    for code in batch {
        model.check(code)?;
    }
    let items = batch.len();
    let mut g = Graph::new();
    let leaves = add_leaves(&mut g, model);
    let mut acc = Accum {
        rate: Vec::new(),
        dist: Vec::new(),
        l1: Vec::new(),
        clamped: 0,
    };
    for s in 0..model.flow.stages().len() {
        let flow = model.flow.stage(s);
        let fl = &leaves.all[leaves.flow[s].clone()];
        let x = g.constant(model.flow.stage_tensor(s, batch));
        let y = flow.graph(&mut g, x, fl, Direction::Forward);
        let (rows, cols) = g.value(y).shape();
        let e = g.constant(noise.tensor(rows, cols));
        let y_noisy = g.add(y, e);
        rate_term(&mut g, model, &leaves, s, y_noisy, items, &mut acc);
        let recon = flow.graph(&mut g, y_noisy, fl, Direction::Inverse);
        let err = g.sub(recon, x);
        let sq = g.square(err);
        let w = g.constant(stage_weights(&model.flow, s, items));
        let wsq = g.mul(sq, w);
        acc.dist.push(g.sum(wsq));
    }
    finish(g, acc, leaves, model, items, cfg)
}

/// Inter loss of a batch of windows.
///
/// The first frame of each window is known exactly; each later frame is
/// reached by adding noisy transformed differences, whose rate is measured
/// under the single (difference) entropy model.
pub fn inter_loss<T: Scalar>(
    windows: &[&[LatentCode<T>]],
    model: &LearnedModel<T>,
    cfg: &TrainConfig,
    mut noise: NoiseMode<'_>,
) -> Result<LossGraph<T>> {
    let Some(first) = windows.first() else {
        return Err(Error::Config("empty batch".into()));
    };
    let k = first.len();
    if k < 2 || windows.iter().any(|w| w.len() != k) {
        return Err(Error::Config("windows need a common length of at least 2".into()));
    }
    for code in windows.iter().flat_map(|w| w.iter()) {
        model.check(code)?;
    }
    let items = windows.len();
    // frame-major order: all items of frame 0, then frame 1, ...
    let ordered: Vec<&LatentCode<T>> = (0..k).flat_map(|t| windows.iter().map(move |w| &w[t])).collect();
    let mut g = Graph::new();
    let leaves = add_leaves(&mut g, model);
    let mut acc = Accum {
        rate: Vec::new(),
        dist: Vec::new(),
        l1: Vec::new(),
        clamped: 0,
    };
    for s in 0..model.flow.stages().len() {
        let flow = model.flow.stage(s);
        let fl = &leaves.all[leaves.flow[s].clone()];
        let per_frame = model.flow.stage_shape(s, items).0;
        let x = g.constant(model.flow.stage_tensor(s, &ordered));
        let y = flow.graph(&mut g, x, fl, Direction::Forward);
        let cols = g.value(y).cols();
        let ys: Vec<Var> = (0..k).map(|t| g.slice_rows(y, t * per_frame, (t + 1) * per_frame)).collect();
        let mut w_hat = ys[0];
        let mut diffs = Vec::with_capacity(k - 1);
        let mut recon_in = Vec::with_capacity(k - 1);
        for t in 1..k {
            let d = g.sub(ys[t], ys[t - 1]);
            let e = g.constant(noise.tensor(per_frame, cols));
            let v = g.add(d, e);
            w_hat = g.add(w_hat, v);
            if cfg.lambda_l1 > 0.0 {
                let a = g.abs(d);
                acc.l1.push(g.sum(a));
            }
            diffs.push(v);
            recon_in.push(w_hat);
        }
        let v_all = g.concat_rows(&diffs);
        rate_term(&mut g, model, &leaves, s, v_all, items * (k - 1), &mut acc);
        let w_all = g.concat_rows(&recon_in);
        let recon = flow.graph(&mut g, w_all, fl, Direction::Inverse);
        let target = g.slice_rows(x, per_frame, k * per_frame);
        let err = g.sub(recon, target);
        let sq = g.square(err);
        let w = g.constant(stage_weights(&model.flow, s, items * (k - 1)));
        let wsq = g.mul(sq, w);
        acc.dist.push(g.sum(wsq));
    }
    finish(g, acc, leaves, model, items * (k - 1), cfg)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            learning_rate: c.learning_rate,
            beta1: c.beta1,
            beta2: c.beta2,
            eps: c.adam_eps,
        }
    }
}

/// Adam moments, shaped like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<T> {
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub step: u64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &[&Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.rows(), p.cols())).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Parameters are left untouched when any
/// gradient is non-finite.
pub fn adam_step<T: Scalar>(
    params: &mut [&mut Tensor<T>],
    grads: &[Tensor<T>],
    state: &mut OptimizerState<T>,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Internal("optimizer parameter count mismatch".into()));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Internal(format!("optimizer shape mismatch at parameter {i}")));
        }
        if !g.all_finite() {
            return Err(Error::Divergence {
                step: state.step as usize,
                msg: format!("non-finite gradient for parameter {i}"),
            });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::one() - b1.powi(t);
    let c2 = T::one() - b2.powi(t);
    let lr = T::of(cfg.learning_rate);
    let eps = T::of(cfg.eps);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        let pd = p.data_mut();
        for (j, &gj) in g.data().iter().enumerate() {
            let mj = b1 * m.data()[j] + (T::one() - b1) * gj;
            let vj = b2 * v.data()[j] + (T::one() - b2) * gj * gj;
            m.data_mut()[j] = mj;
            v.data_mut()[j] = vj;
            pd[j] -= lr * (mj / c1) / ((vj / c2).sqrt() + eps);
        }
    }
    Ok(())
}

/// Training data: independent frames (intra) or sequences (inter).
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a, T> {
    Frames(&'a [LatentCode<T>]),
    Sequences(&'a [LatentSequence<T>]),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub rate_bits: f64,
    pub distortion: f64,
    pub loss: f64,
}

pub fn write_trace_csv(trace: &[TraceRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,rate_bits,distortion,loss")?;
    for r in trace {
        writeln!(out, "{},{},{},{}", r.step, r.rate_bits, r.distortion, r.loss)?;
    }
    Ok(())
}

/// Stateful training loop. A failed step leaves the model at its last good
/// parameters.
pub struct Trainer<'a, T> {
    cfg: TrainConfig,
    adam: AdamConfig,
    data: TrainData<'a, T>,
    model: LearnedModel<T>,
    state: OptimizerState<T>,
    rng: ChaCha8Rng,
    trace: Vec<TraceRow>,
}

impl<'a, T: Scalar> Trainer<'a, T> {
    pub fn new(model: LearnedModel<T>, data: TrainData<'a, T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        match data {
            TrainData::Frames(f) => {
                if f.is_empty() {
                    return Err(Error::Config("no training frames".into()));
                }
                f.iter().try_for_each(|c| model.check(c))?;
            }
            TrainData::Sequences(seqs) => {
                if !seqs.iter().any(|s| s.len() >= cfg.window) {
                    return Err(Error::Config(format!(
                        "no sequence holds a window of {} frames",
                        cfg.window
                    )));
                }
                seqs.iter()
                    .flat_map(|s| s.frames())
                    .try_for_each(|c| model.check(c))?;
            }
        }
        let state = OptimizerState::new(&model.params());
        Ok(Self {
            adam: AdamConfig::from(&cfg),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a11),
            cfg,
            data,
            model,
            state,
            trace: Vec::new(),
        })
    }

    pub fn model(&self) -> &LearnedModel<T> {
        &self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn into_model(self) -> LearnedModel<T> {
        self.model
    }

    pub fn trace(&self) -> &[TraceRow] {
        &self.trace
    }

    pub fn steps_done(&self) -> usize {
        self.trace.len()
    }

    fn build(&mut self) -> Result<LossGraph<T>> {
        let b = self.cfg.batch_size;
        match self.data {
            TrainData::Frames(frames) => {
                let batch: Vec<&LatentCode<T>> =
                    (0..b).map(|_| &frames[self.rng.random_range(0..frames.len())]).collect();
                intra_loss(&batch, &self.model, &self.cfg, NoiseMode::Sampled(&mut self.rng))
            }
            TrainData::Sequences(seqs) => {
                let k = self.cfg.window;
                let usable: Vec<&LatentSequence<T>> = seqs.iter().filter(|s| s.len() >= k).collect();
                let windows: Vec<&[LatentCode<T>]> = (0..b)
                    .map(|_| {
                        let s = usable[self.rng.random_range(0..usable.len())];
                        let start = self.rng.random_range(0..=s.len() - k);
                        &s.frames()[start..start + k]
                    })
                    .collect();
                inter_loss(&windows, &self.model, &self.cfg, NoiseMode::Sampled(&mut self.rng))
            }
        }
    }

    pub fn step(&mut self) -> Result<TraceRow> {
        let step = self.trace.len();
        let lg = self.build()?;
        let p = lg.parts;
        if !p.loss.is_finite() || p.loss > DIVERGENCE_LIMIT {
            return Err(Error::Divergence {
                step,
                msg: format!("loss {} (rate {}, distortion {})", p.loss, p.rate_bits, p.distortion),
            });
        }
        let mut grads = lg.gradients()?;
        drop(lg);
        if !self.cfg.train_flow {
            for g in &mut grads[..self.model.flow.params().len()] {
                g.data_mut().iter_mut().for_each(|v| *v = T::zero());
            }
        }
        let mut params = self.model.params_mut();
        adam_step(&mut params, &grads, &mut self.state, &self.adam).map_err(|e| match e {
            Error::Divergence { msg, .. } => Error::Divergence { step, msg },
            other => other,
        })?;
        let row = TraceRow {
            step,
            rate_bits: p.rate_bits,
            distortion: p.distortion,
            loss: p.loss,
        };
        self.trace.push(row);
        Ok(row)
    }

    pub fn run(&mut self, steps: usize) -> Result<()> {
        for _ in 0..steps {
            self.step()?;
        }
        Ok(())
    }
}

/// Trains a fresh model for `cfg.steps` steps.
pub fn train<T: Scalar>(data: TrainData<'_, T>, cfg: &TrainConfig) -> Result<(LearnedModel<T>, Vec<TraceRow>)> {
    let (layers, channels) = match data {
        TrainData::Frames(f) => f.first().map(|c| c.shape()),
        TrainData::Sequences(s) => s.first().map(|s| s.shape()),
    }
    .ok_or_else(|| Error::Config("empty dataset".into()))?;
    let model = LearnedModel::new(layers, channels, cfg)?;
    let mut trainer = Trainer::new(model, data, cfg.clone())?;
    trainer.run(cfg.steps)?;
    let trace = trainer.trace().to_vec();
    Ok((trainer.into_model(), trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::{DESK_CHANNELS, DESK_LAYERS};

    fn codes(n: usize, seed: u64) -> Vec<LatentCode<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let v = (0..DESK_LAYERS * DESK_CHANNELS).map(|_| rng.random_range(-2.0..2.0)).collect();
                LatentCode::new(DESK_LAYERS, DESK_CHANNELS, v).unwrap()
            })
            .collect()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            flow: FlowConfig {
                coupling_layers: 3,
                hidden_width: Some(16),
                ..FlowConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn noise_is_bounded_and_reproducible() {
        let x = Tensor::<f64>::zeros(100, 100);
        let a = noise_quantize(&x, &mut ChaCha8Rng::seed_from_u64(1));
        let b = noise_quantize(&x, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (-0.5..0.5).contains(v)));
    }

    #[test]
    fn zero_noise_identity_flow_has_no_distortion() {
        let data = codes(4, 2);
        let model = LearnedModel::<f64>::new(DESK_LAYERS, DESK_CHANNELS, &small_cfg()).unwrap();
        let batch: Vec<_> = data.iter().collect();
        let lg = intra_loss(&batch, &model, &small_cfg(), NoiseMode::Zero).unwrap();
        assert_eq!(lg.parts.distortion, 0.0);
        assert_eq!(lg.parts.loss, lg.parts.rate_bits);
        assert!(lg.parts.rate_bits > 0.0);
    }

    #[test]
    fn uniform_entropy_model_rate_is_constant() {
        let cfg = small_cfg();
        let data = codes(3, 3);
        let mut model = LearnedModel::<f64>::new(DESK_LAYERS, DESK_CHANNELS, &cfg).unwrap();
        let layout = model.flow.layout().clone();
        model.entropy = StagedEntropy::uniform(&layout, DESK_CHANNELS, -4.0, 4.0);
        let batch: Vec<_> = data.iter().map(|c| {
            LatentCode::new(c.layers(), c.channels(), c.as_slice().iter().map(|v| v * 0.5).collect()).unwrap()
        }).collect();
        let refs: Vec<_> = batch.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let lg = intra_loss(&refs, &model, &cfg, NoiseMode::Sampled(&mut rng)).unwrap();
        let coords = (DESK_LAYERS * DESK_CHANNELS) as f64;
        assert!((lg.parts.rate_bits - 3.0 * coords).abs() < 1e-9);
    }

    #[test]
    fn constant_window_has_zero_differences() {
        let cfg = small_cfg();
        let model = LearnedModel::<f64>::new(DESK_LAYERS, DESK_CHANNELS, &cfg).unwrap();
        let frame = codes(1, 5).remove(0);
        let window = vec![frame.clone(), frame.clone(), frame];
        let lg = inter_loss(&[&window[..]], &model, &cfg, NoiseMode::Zero).unwrap();
        assert_eq!(lg.parts.distortion, 0.0);
        assert_eq!(lg.parts.l1, 0.0);
    }

    #[test]
    fn l1_term_increases_loss() {
        let mut cfg = small_cfg();
        let model = LearnedModel::<f64>::new(DESK_LAYERS, DESK_CHANNELS, &cfg).unwrap();
        let window = codes(3, 6);
        let base = inter_loss(&[&window[..]], &model, &cfg, NoiseMode::Zero).unwrap().parts.loss;
        cfg.lambda_l1 = 0.1;
        let with = inter_loss(&[&window[..]], &model, &cfg, NoiseMode::Zero).unwrap().parts.loss;
        assert!(with > base);
    }

    #[test]
    fn identity_init_distortion_is_noise_variance() {
        let cfg = small_cfg();
        let model = LearnedModel::<f64>::new(DESK_LAYERS, DESK_CHANNELS, &cfg).unwrap();
        let data = codes(64, 7);
        let batch: Vec<_> = data.iter().collect();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lg = intra_loss(&batch, &model, &cfg, NoiseMode::Sampled(&mut rng)).unwrap();
        assert!((lg.parts.distortion * 12.0 - 1.0).abs() < 0.05, "{}", lg.parts.distortion);
    }

    #[test]
    fn zero_lambda_ignores_distortion_path() {
        let mut cfg = small_cfg();
        cfg.lambda = 0.0;
        let model = LearnedModel::<f64>::new(DESK_LAYERS, DESK_CHANNELS, &cfg).unwrap();
        let data = codes(2, 9);
        let batch: Vec<_> = data.iter().collect();
        let lg = intra_loss(&batch, &model, &cfg, NoiseMode::Zero).unwrap();
        assert_eq!(lg.parts.loss, lg.parts.rate_bits);
    }

    #[test]
    fn adam_first_step_is_unit_scaled() {
        let mut p = Tensor::<f64>::from_vec(1, 3, vec![1.0, -2.0, 0.5]);
        let before = p.clone();
        let mut st = OptimizerState::new(&[&p]);
        let cfg = AdamConfig { learning_rate: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        adam_step(&mut [&mut p], &[Tensor::filled(1, 3, 1.0)], &mut st, &cfg).unwrap();
        for (a, b) in p.data().iter().zip(before.data()) {
            assert!((b - a - 1e-4).abs() < 1e-9);
        }
        let snapshot = p.clone();
        adam_step(&mut [&mut p], &[Tensor::zeros(1, 3)], &mut OptimizerState::new(&[&snapshot]), &cfg).unwrap();
        assert_eq!(p, snapshot);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn adam_rejects_nan() {
        let mut p = Tensor::from_vec(1, 2, vec![1.0, 2.0]);
        let mut st = OptimizerState::new(&[&p]);
        let cfg = AdamConfig { learning_rate: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 };
        let err = adam_step(&mut [&mut p], &[Tensor::from_vec(1, 2, vec![f64::NAN, 0.0])], &mut st, &cfg);
        assert!(matches!(err, Err(Error::Divergence { .. })));
        assert_eq!(p.data(), &[1.0, 2.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn config_parsing() {
        let cfg = TrainConfig::parse(
            "# desk run\nlambda = 1e-4\nlearning_rate=0.002\nstages = 0-2,2-4\ngranularity = flat\nsteps = 10\n",
        )
        .unwrap();
        assert_eq!(cfg.lambda, 1e-4);
        assert_eq!(cfg.learning_rate, 0.002);
        assert_eq!(cfg.steps, 10);
        assert_eq!(cfg.flow.granularity, Granularity::Flattened);
        assert_eq!(cfg.stages.unwrap().stage_count(), 2);
        assert!(TrainConfig::parse("bogus = 1").is_err());
        assert!(TrainConfig::parse("beta1 = 1.0").is_err());
        assert!(TrainConfig::parse("window = 1").is_err());
        assert!(TrainConfig::parse("lambda 3").is_err());
    }

    #[test]
    fn training_is_reproducible_and_improves() {
        let data = codes(32, 10);
        let cfg = TrainConfig {
            steps: 60,
            learning_rate: 3e-3,
            lambda: 1e-5,
            ..small_cfg()
        };
        let (m1, t1) = train(TrainData::Frames(&data), &cfg).unwrap();
        let (m2, t2) = train(TrainData::Frames(&data), &cfg).unwrap();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        let head: f64 = t1[..10].iter().map(|r| r.loss).sum();
        let tail: f64 = t1[50..].iter().map(|r| r.loss).sum();
        assert!(tail < head, "{head} -> {tail}");
        let mut buf = Vec::new();
        write_trace_csv(&t1, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,rate_bits,distortion,loss\n"));
        assert_eq!(text.lines().count(), 61);
    }

    #[test]
    fn inter_training_runs() {
        let frames = codes(12, 11);
        let seq = LatentSequence::new(frames).unwrap();
        let cfg = TrainConfig { steps: 5, window: 3, batch_size: 2, ..small_cfg() };
        let (_, trace) = train(TrainData::Sequences(std::slice::from_ref(&seq)), &cfg).unwrap();
        assert_eq!(trace.len(), 5);
        let too_long = TrainConfig { window: 20, ..cfg };
        assert!(train(TrainData::Sequences(std::slice::from_ref(&seq)), &too_long).is_err());
    }
}
