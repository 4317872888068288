//! Invertible latent transform built from affine coupling layers.
//!
//! A coupling layer splits its input into a passive half, copied through, and
//! an active half that is scaled and shifted by functions of the passive half:
//!
//! ```text
//! forward:  y_a = x_a · exp(s(x_p)) + t(x_p)
//! inverse:  x_a = (y_a − t(y_p)) · exp(−s(y_p))
//! ```
//!
//! `s` ends in a tanh, so the per-layer log-scale is bounded and the map is
//! bijective with a finite, nonzero Jacobian everywhere.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, StageLayout};
use crate::nn::{Mlp, OutputActivation};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Inverse,
}

/// How a stage's `rows × C` block is presented to its flow.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Granularity {
    /// Every layer row is a separate `C`-vector; parameters shared across rows.
    RowShared,
    /// The whole stage is one `rows·C` vector.
    Flattened,
}

impl Granularity {
    fn tag(self) -> u8 {
        match self {
            Granularity::RowShared => 0,
            Granularity::Flattened => 1,
        }
    }

    fn from_tag(tag: u8, offset: usize) -> Result<Self> {
        match tag {
            0 => Ok(Granularity::RowShared),
            1 => Ok(Granularity::Flattened),
            t => Err(Error::format(offset, format!("unknown flow granularity {t}"))),
        }
    }
}

impl std::str::FromStr for Granularity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "row" | "row-shared" => Ok(Granularity::RowShared),
            "flat" | "flattened" => Ok(Granularity::Flattened),
            other => Err(Error::Config(format!("unknown granularity {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowConfig {
    pub coupling_layers: usize,
    /// Hidden width of the sub-networks; `None` means the channel count.
    pub hidden_width: Option<usize>,
    /// Dense layers per sub-network.
    pub depth: usize,
    pub granularity: Granularity,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            coupling_layers: 13,
            hidden_width: None,
            depth: 3,
            granularity: Granularity::RowShared,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CouplingLayer<T> {
    parity: u8,
    active: Vec<usize>,
    passive: Vec<usize>,
    scale_net: Mlp<T>,
    translate_net: Mlp<T>,
}

fn split_mask(dim: usize, parity: u8) -> (Vec<usize>, Vec<usize>) {
    (0..dim).partition(|&i| i % 2 == parity as usize)
}

impl<T: Scalar> CouplingLayer<T> {
    pub fn new(dim: usize, parity: u8, hidden: usize, depth: usize, rng: &mut impl Rng) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Config(format!("coupling dimension {dim} < 2")));
        }
        if depth < 1 {
            return Err(Error::Config("sub-network depth must be positive".into()));
        }
        let (active, passive) = split_mask(dim, parity & 1);
        let mut widths = vec![passive.len()];
        widths.extend(std::iter::repeat_n(hidden, depth - 1));
        widths.push(active.len());
        Ok(Self {
            parity: parity & 1,
            scale_net: Mlp::new(&widths, OutputActivation::Tanh, rng),
            translate_net: Mlp::new(&widths, OutputActivation::Identity, rng),
            active,
            passive,
        })
    }

    pub fn dim(&self) -> usize {
        self.active.len() + self.passive.len()
    }

    /// `true` for coordinates the layer transforms.
    pub fn mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.dim()];
        for &i in &self.active {
            m[i] = true;
        }
        m
    }

    pub fn scale_net(&self) -> &Mlp<T> {
        &self.scale_net
    }

    pub fn translate_net(&self) -> &Mlp<T> {
        &self.translate_net
    }

    pub fn scale_net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.scale_net
    }

    pub fn translate_net_mut(&mut self) -> &mut Mlp<T> {
        &mut self.translate_net
    }

    fn param_count(&self) -> usize {
        self.scale_net.params().len() + self.translate_net.params().len()
    }

    /// Applies the layer to every row of `x` (`N × dim`).
    pub fn apply(&self, x: &Tensor<T>, direction: Direction) -> Tensor<T> {
        let cond = x.gather_cols(&self.passive);
        let target = x.gather_cols(&self.active);
        let s = self.scale_net.forward(&cond);
        let t = self.translate_net.forward(&cond);
        let out = match direction {
            Direction::Forward => {
                let scaled = target.zip(&s.map(T::exp), |a, b| a * b);
                scaled.zip(&t, |a, b| a + b)
            }
            Direction::Inverse => {
                let shifted = target.zip(&t, |a, b| a - b);
                shifted.zip(&s.map(|v| (-v).exp()), |a, b| a * b)
            }
        };
        Tensor::merge_cols(&cond, &self.passive, &out, &self.active)
    }

    /// Tape version of [`CouplingLayer::apply`]; `params` holds the scale net
    /// leaves followed by the translate net leaves.
    pub fn apply_graph(&self, g: &mut Graph<T>, x: Var, params: &[Var], direction: Direction) -> Var {
        let ns = self.scale_net.params().len();
        let cond = g.gather_cols(x, &self.passive);
        let target = g.gather_cols(x, &self.active);
        let s = self.scale_net.forward_graph(g, cond, &params[..ns]);
        let t = self.translate_net.forward_graph(g, cond, &params[ns..]);
        let out = match direction {
            Direction::Forward => {
                let es = g.exp(s);
                let scaled = g.mul(target, es);
                g.add(scaled, t)
            }
            Direction::Inverse => {
                let shifted = g.sub(target, t);
                let neg = g.scale(s, -T::one());
                let es = g.exp(neg);
                g.mul(shifted, es)
            }
        };
        g.merge_cols(cond, &self.passive, out, &self.active)
    }
}

/// Coupling map on a single vector.
pub fn coupling_apply<T: Scalar>(x: &[T], layer: &CouplingLayer<T>, direction: Direction) -> Result<Vec<T>> {
    if x.len() != layer.dim() {
        return Err(Error::Shape(format!(
            "vector of length {} for a coupling layer of width {}",
            x.len(),
            layer.dim()
        )));
    }
    let y = layer.apply(&Tensor::from_vec(1, x.len(), x.to_vec()), direction);
    if !y.all_finite() {
        return Err(Error::Numeric { layer: 0 });
    }
    Ok(y.into_vec())
}

/// A stack of coupling layers acting on vectors of width `dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel<T> {
    dim: usize,
    layers: Vec<CouplingLayer<T>>,
}

impl<T: Scalar> FlowModel<T> {
    pub fn new(dim: usize, hidden: usize, cfg: &FlowConfig, rng: &mut impl Rng) -> Result<Self> {
        let layers = (0..cfg.coupling_layers)
            .map(|k| CouplingLayer::new(dim, (k % 2) as u8, hidden, cfg.depth, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { dim, layers })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn layers(&self) -> &[CouplingLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [CouplingLayer<T>] {
        &mut self.layers
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(x)?;
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(&h, Direction::Forward);
            if !h.all_finite() {
                return Err(Error::Numeric { layer: i });
            }
        }
        Ok(h)
    }

    pub fn inverse(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_width(y)?;
        let mut h = y.clone();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            h = layer.apply(&h, Direction::Inverse);
            if !h.all_finite() {
                return Err(Error::Numeric { layer: i });
            }
        }
        Ok(h)
    }

    fn check_width(&self, x: &Tensor<T>) -> Result<()> {
        if x.cols() != self.dim {
            return Err(Error::Config(format!(
                "flow of width {} applied to width {}",
                self.dim,
                x.cols()
            )));
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.layers
            .iter()
            .flat_map(|l| l.scale_net.params().iter().chain(l.translate_net.params()))
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                l.scale_net
                    .params_mut()
                    .iter_mut()
                    .chain(l.translate_net.params_mut().iter_mut())
            })
            .collect()
    }

    pub fn graph(&self, g: &mut Graph<T>, x: Var, params: &[Var], direction: Direction) -> Var {
        let mut at = 0;
        let spans: Vec<(usize, usize)> = self
            .layers
            .iter()
            .map(|l| {
                let span = (at, at + l.param_count());
                at = span.1;
                span
            })
            .collect();
        let mut h = x;
        match direction {
            Direction::Forward => {
                for (l, &(a, b)) in self.layers.iter().zip(&spans) {
                    h = l.apply_graph(g, h, &params[a..b], direction);
                }
            }
            Direction::Inverse => {
                for (l, &(a, b)) in self.layers.iter().zip(&spans).rev() {
                    h = l.apply_graph(g, h, &params[a..b], direction);
                }
            }
        }
        h
    }
}

/// One [`FlowModel`] per stage of a [`StageLayout`].
#[derive(Clone, Debug, PartialEq)]
pub struct StagedFlow<T> {
    layout: StageLayout,
    channels: usize,
    granularity: Granularity,
    stages: Vec<FlowModel<T>>,
}

impl<T: Scalar> StagedFlow<T> {
    /// Identity-initialized flow (zero output layers in every sub-network).
    pub fn new(layout: StageLayout, channels: usize, cfg: &FlowConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let hidden = cfg.hidden_width.unwrap_or(channels);
        let stages = layout
            .stages()
            .iter()
            .map(|r| {
                let dim = match cfg.granularity {
                    Granularity::RowShared => channels,
                    Granularity::Flattened => r.len() * channels,
                };
                FlowModel::new(dim, hidden, cfg, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layout,
            channels,
            granularity: cfg.granularity,
            stages,
        })
    }

    /// Adds uniform(±`amplitude`) noise to every parameter, including the
    /// zero-initialized output layers, giving a non-trivial bijection.
    pub fn perturb(&mut self, amplitude: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in self.params_mut() {
            for v in p.data_mut() {
                *v += T::of(rng.random_range(-amplitude..amplitude));
            }
        }
    }

    pub fn layout(&self) -> &StageLayout {
        &self.layout
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn granularity(&self) -> Granularity {
        self.granularity
    }

    pub fn stages(&self) -> &[FlowModel<T>] {
        &self.stages
    }

    pub fn stage(&self, s: usize) -> &FlowModel<T> {
        &self.stages[s]
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Shape of the tensor holding `items` codes' worth of stage `s` rows.
    pub fn stage_shape(&self, s: usize, items: usize) -> (usize, usize) {
        let rows = self.layout.stages()[s].len();
        match self.granularity {
            Granularity::RowShared => (items * rows, self.channels),
            Granularity::Flattened => (items, rows * self.channels),
        }
    }

    /// Stage `s` rows of `codes`, stacked in the shape the stage flow expects.
    pub fn stage_tensor(&self, s: usize, codes: &[&LatentCode<T>]) -> Tensor<T> {
        let r = &self.layout.stages()[s];
        let c = self.channels;
        let mut data = Vec::with_capacity(codes.len() * r.len() * c);
        for code in codes {
            data.extend_from_slice(&code.as_slice()[r.start * c..r.end * c]);
        }
        let (rows, cols) = self.stage_shape(s, codes.len());
        Tensor::from_vec(rows, cols, data)
    }

    fn check_code(&self, code: &LatentCode<T>) -> Result<()> {
        if code.channels() != self.channels || code.layers() != self.layout.layers() {
            return Err(Error::Config(format!(
                "latent {:?} does not match flow shape ({}, {})",
                code.shape(),
                self.layout.layers(),
                self.channels
            )));
        }
        Ok(())
    }

    fn map_code(&self, code: &LatentCode<T>, direction: Direction) -> Result<LatentCode<T>> {
        self.check_code(code)?;
        let mut out = Vec::with_capacity(code.len());
        let mut offset = 0;
        for (s, model) in self.stages.iter().enumerate() {
            let x = self.stage_tensor(s, &[code]);
            let y = match direction {
                Direction::Forward => model.forward(&x),
                Direction::Inverse => model.inverse(&x),
            }
            .map_err(|e| match e {
                Error::Numeric { layer } => Error::Numeric { layer: offset + layer },
                e => e,
            })?;
            offset += model.layers().len();
            out.extend(y.into_vec());
        }
        LatentCode::new(code.layers(), code.channels(), out)
    }

    /// `W⁺ → W*`.
    pub fn forward(&self, code: &LatentCode<T>) -> Result<LatentCode<T>> {
        self.map_code(code, Direction::Forward)
    }

    /// `W* → W⁺`.
    pub fn inverse(&self, code: &LatentCode<T>) -> Result<LatentCode<T>> {
        self.map_code(code, Direction::Inverse)
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().flat_map(|m| m.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.stages.iter_mut().flat_map(|m| m.params_mut()).collect()
    }

    /// Parameter-list span of each stage within [`StagedFlow::params`].
    pub fn stage_param_spans(&self) -> Vec<std::ops::Range<usize>> {
        let mut at = 0;
        self.stages
            .iter()
            .map(|m| {
                let n = m.params().len();
                at += n;
                at - n..at
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(FLOW_MAGIC);
        w.u16(FLOW_VERSION);
        w.u8(self.granularity.tag());
        w.dim16(self.channels, "channels")?;
        w.dim16(self.layout.layers(), "layers")?;
        w.dim16(self.layout.stage_count(), "stage count")?;
        for r in self.layout.stages() {
            w.dim16(r.start, "stage start")?;
            w.dim16(r.end, "stage end")?;
        }
        for &lw in self.layout.lambda_weights() {
            w.f64(lw);
        }
        for m in &self.stages {
            w.dim16(m.layers.len(), "coupling layers")?;
            w.dim32(m.dim, "flow width")?;
            for l in &m.layers {
                w.u8(l.parity);
                for net in [&l.scale_net, &l.translate_net] {
                    let widths = net.widths();
                    w.dim16(widths.len(), "depth")?;
                    for width in widths {
                        w.dim32(width, "hidden width")?;
                    }
                }
            }
        }
        for p in self.params() {
            for v in p.data() {
                w.f64(v.as_f64());
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(FLOW_MAGIC)?;
        let version = r.u16()?;
        if version != FLOW_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "flow model",
                found: version,
                expected: FLOW_VERSION,
            });
        }
        let at = r.offset();
        let granularity = Granularity::from_tag(r.u8()?, at)?;
        let channels = r.u16()? as usize;
        let layers = r.u16()? as usize;
        let count = r.u16()? as usize;
        let mut ranges = Vec::with_capacity(count);
        for _ in 0..count {
            let start = r.u16()? as usize;
            let end = r.u16()? as usize;
            ranges.push(start..end);
        }
        let weights = (0..layers).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        let layout = StageLayout::new(ranges, weights).map_err(|e| Error::format(at, e.to_string()))?;

        // shapes first, parameters after
        let mut shapes = Vec::with_capacity(count);
        for _ in 0..count {
            let n_layers = r.u16()? as usize;
            let dim = r.u32()? as usize;
            let mut layer_shapes = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                let at = r.offset();
                let parity = r.u8()?;
                let mut nets = Vec::with_capacity(2);
                for _ in 0..2 {
                    let depth = r.u16()? as usize;
                    let widths = (0..depth)
                        .map(|_| r.u32().map(|v| v as usize))
                        .collect::<Result<Vec<_>>>()?;
                    if widths.len() < 2 {
                        return Err(Error::format(at, "sub-network with fewer than two widths"));
                    }
                    nets.push(widths);
                }
                layer_shapes.push((parity, nets, at));
            }
            shapes.push((dim, layer_shapes));
        }
        let mut stages = Vec::with_capacity(count);
        for (dim, layer_shapes) in shapes {
            let mut cl = Vec::with_capacity(layer_shapes.len());
            for (parity, nets, at) in layer_shapes {
                let (active, passive) = split_mask(dim, parity & 1);
                let mut built = Vec::with_capacity(2);
                for (k, widths) in nets.iter().enumerate() {
                    if widths[0] != passive.len() || *widths.last().unwrap() != active.len() {
                        return Err(Error::format(at, "sub-network widths do not match mask"));
                    }
                    let mut params = Vec::new();
                    for pair in widths.windows(2) {
                        params.push(read_tensor(&mut r, pair[1], pair[0])?);
                        params.push(read_tensor(&mut r, 1, pair[1])?);
                    }
                    let act = if k == 0 {
                        OutputActivation::Tanh
                    } else {
                        OutputActivation::Identity
                    };
                    built.push(Mlp::from_params(params, act));
                }
                let translate_net = built.pop().unwrap();
                let scale_net = built.pop().unwrap();
                cl.push(CouplingLayer {
                    parity: parity & 1,
                    active,
                    passive,
                    scale_net,
                    translate_net,
                });
            }
            stages.push(FlowModel { dim, layers: cl });
        }
        r.finish()?;
        let flow = Self {
            layout,
            channels,
            granularity,
            stages,
        };
        for (s, m) in flow.stages.iter().enumerate() {
            let (_, cols) = flow.stage_shape(s, 1);
            if m.dim != cols {
                return Err(Error::format(0, format!("stage {s} width {} != {cols}", m.dim)));
            }
        }
        Ok(flow)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn read_tensor<T: Scalar>(r: &mut Reader<'_>, rows: usize, cols: usize) -> Result<Tensor<T>> {
    let data = (0..rows * cols)
        .map(|_| r.f64().map(T::of))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::from_vec(rows, cols, data))
}

const FLOW_MAGIC: &[u8; 4] = b"SGFW";
pub const FLOW_VERSION: u16 = 1;
