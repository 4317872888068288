//! Fully factorized entropy model.
//!
//! Every coordinate gets its own univariate CDF built from a chain of
//! monotone elementwise maps (positive mixing weights via softplus, tanh
//! gates bounded away from −1) followed by a logistic squashing. Training
//! uses interval likelihoods `cdf(x + ½) − cdf(x − ½)`; coding uses integer
//! frequency tables frozen from those likelihoods.

use std::ops::Range;
use std::path::Path;

use crate::autodiff::{Graph, Var};
use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::latent::{LatentCode, StageLayout};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, sigmoid_diff, softplus, Tensor};

/// Likelihoods below this are clamped (2⁻⁶⁴).
pub const LIKELIHOOD_FLOOR: f64 = 5.421_010_862_427_522e-20;
/// Default probability precision of frozen tables.
pub const DEFAULT_PRECISION: u32 = 16;
/// Mass outside the support above which `EscapePolicy::Auto` adds an escape.
pub const ESCAPE_MASS_THRESHOLD: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Likelihood<T> {
    pub value: T,
    pub clamped: bool,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RateEstimate {
    pub bits: f64,
    /// Number of likelihoods that hit [`LIKELIHOOD_FLOOR`].
    pub clamped: usize,
}

/// Per-coordinate learned CDF.
#[derive(Clone, Debug, PartialEq)]
pub struct FactorizedModel<T> {
    coords: usize,
    /// Full width sequence, `1, hidden.., 1`.
    filters: Vec<usize>,
    /// One `1 × coords` row per scalar parameter, in block order
    /// `[matrix k, bias k, factor k]` for each stage `k`.
    params: Vec<Tensor<T>>,
}

struct StageIndex {
    matrix: usize,
    bias: usize,
    factor: Option<usize>,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Scalar> FactorizedModel<T> {
    /// Default hidden widths `(3, 3, 3)`, i.e. widths `(1, 3, 3, 3, 1)`.
    pub fn new(coords: usize) -> Self {
        Self::with_filters(coords, &[3, 3, 3])
    }

    /// Symmetric initialization: zero biases and gates, so every CDF is odd
    /// around zero (`cdf(0) = ½`) with unit overall slope.
    pub fn with_filters(coords: usize, hidden: &[usize]) -> Self {
        let mut filters = vec![1];
        filters.extend_from_slice(hidden);
        filters.push(1);
        let mut params = Vec::new();
        let stages = filters.len() - 1;
        for k in 0..stages {
            let (fan_in, fan_out) = (filters[k], filters[k + 1]);
            for j in 0..fan_out {
                // distinct units so the hidden paths are not interchangeable
                let spread = if fan_out > 1 {
                    0.8 + 0.4 * j as f64 / (fan_out - 1) as f64
                } else {
                    1.0
                };
                let v = spread / fan_in as f64;
                let raw = v.exp_m1().ln();
                for _ in 0..fan_in {
                    params.push(Tensor::filled(1, coords, T::of(raw)));
                }
            }
            for _ in 0..fan_out {
                params.push(Tensor::zeros(1, coords));
            }
            if k + 1 < stages {
                for _ in 0..fan_out {
                    params.push(Tensor::zeros(1, coords));
                }
            }
        }
        Self {
            coords,
            filters,
            params,
        }
    }

    pub fn coords(&self) -> usize {
        self.coords
    }

    pub fn filters(&self) -> &[usize] {
        &self.filters
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    fn stage_indices(&self) -> Vec<StageIndex> {
        let stages = self.filters.len() - 1;
        let mut at = 0;
        (0..stages)
            .map(|k| {
                let (fan_in, fan_out) = (self.filters[k], self.filters[k + 1]);
                let matrix = at;
                at += fan_in * fan_out;
                let bias = at;
                at += fan_out;
                let factor = (k + 1 < stages).then(|| {
                    at += fan_out;
                    at - fan_out
                });
                StageIndex {
                    matrix,
                    bias,
                    factor,
                    fan_in,
                    fan_out,
                }
            })
            .collect()
    }

    fn p(&self, idx: usize, coord: usize) -> T {
        self.params[idx].data()[coord]
    }

    /// Pre-sigmoid CDF value of one coordinate.
    pub fn logits_scalar(&self, x: T, coord: usize) -> T {
        let mut h = vec![x];
        for st in self.stage_indices() {
            let mut next = Vec::with_capacity(st.fan_out);
            for j in 0..st.fan_out {
                let mut acc = h[0] * softplus(self.p(st.matrix + j * st.fan_in, coord));
                for (i, &hi) in h.iter().enumerate().skip(1) {
                    acc = acc + hi * softplus(self.p(st.matrix + j * st.fan_in + i, coord));
                }
                acc = acc + self.p(st.bias + j, coord);
                if let Some(f) = st.factor {
                    acc = acc + acc.tanh() * self.p(f + j, coord).tanh();
                }
                next.push(acc);
            }
            h = next;
        }
        h[0]
    }

    /// Logits of every entry of `x` (`N × coords`).
    pub fn logits(&self, x: &Tensor<T>) -> Tensor<T> {
        let sp: Vec<Tensor<T>> = self.params.iter().map(|p| p.map(softplus)).collect();
        let th: Vec<Tensor<T>> = self.params.iter().map(|p| p.map(T::tanh)).collect();
        let mut h = vec![x.clone()];
        for st in self.stage_indices() {
            let mut next = Vec::with_capacity(st.fan_out);
            for j in 0..st.fan_out {
                let mut acc = h[0].mul_row(&sp[st.matrix + j * st.fan_in]);
                for (i, hi) in h.iter().enumerate().skip(1) {
                    let term = hi.mul_row(&sp[st.matrix + j * st.fan_in + i]);
                    acc = acc.zip(&term, |a, b| a + b);
                }
                acc = acc.add_row(&self.params[st.bias + j]);
                if let Some(f) = st.factor {
                    let gate = acc.map(T::tanh).mul_row(&th[f + j]);
                    acc = acc.zip(&gate, |a, b| a + b);
                }
                next.push(acc);
            }
            h = next;
        }
        h.swap_remove(0)
    }

    pub fn logits_graph(&self, g: &mut Graph<T>, x: Var, params: &[Var]) -> Var {
        let indices = self.stage_indices();
        let mut sp = vec![None; params.len()];
        let mut th = vec![None; params.len()];
        for st in &indices {
            for k in st.matrix..st.matrix + st.fan_in * st.fan_out {
                sp[k] = Some(g.softplus(params[k]));
            }
            if let Some(f) = st.factor {
                for k in f..f + st.fan_out {
                    th[k] = Some(g.tanh(params[k]));
                }
            }
        }
        let mut h = vec![x];
        for st in &indices {
            let mut next = Vec::with_capacity(st.fan_out);
            for j in 0..st.fan_out {
                let mut acc = g.mul_row(h[0], sp[st.matrix + j * st.fan_in].unwrap());
                for (i, &hi) in h.iter().enumerate().skip(1) {
                    let term = g.mul_row(hi, sp[st.matrix + j * st.fan_in + i].unwrap());
                    acc = g.add(acc, term);
                }
                acc = g.add_row(acc, params[st.bias + j]);
                if let Some(f) = st.factor {
                    let t = g.tanh(acc);
                    let gate = g.mul_row(t, th[f + j].unwrap());
                    acc = g.add(acc, gate);
                }
                next.push(acc);
            }
            h = next;
        }
        h[0]
    }
}

/// Uniform density on `[lo, hi]`, identical for every coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct UniformModel {
    pub coords: usize,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DensityModel<T> {
    Factorized(FactorizedModel<T>),
    Uniform(UniformModel),
}

impl<T: Scalar> DensityModel<T> {
    pub fn coords(&self) -> usize {
        match self {
            DensityModel::Factorized(m) => m.coords,
            DensityModel::Uniform(u) => u.coords,
        }
    }

    /// Strictly increasing CDF of coordinate `coord`.
    pub fn cdf(&self, x: T, coord: usize) -> T {
        match self {
            DensityModel::Factorized(m) => sigmoid(m.logits_scalar(x, coord)),
            DensityModel::Uniform(u) => {
                let v = (x - T::of(u.lo)) / T::of(u.hi - u.lo);
                v.max(T::zero()).min(T::one())
            }
        }
    }

    /// Probability of the unit interval centred on `x`, floored.
    pub fn interval_likelihood(&self, x: T, coord: usize) -> Likelihood<T> {
        let half = T::of(0.5);
        let raw = match self {
            DensityModel::Factorized(m) => sigmoid_diff(
                m.logits_scalar(x + half, coord),
                m.logits_scalar(x - half, coord),
            ),
            DensityModel::Uniform(_) => self.cdf(x + half, coord) - self.cdf(x - half, coord),
        };
        floor_likelihood(raw)
    }

    /// Likelihoods of all entries of `x` (`N × coords`) and the clamp count.
    pub fn likelihoods(&self, x: &Tensor<T>) -> (Tensor<T>, usize) {
        assert_eq!(x.cols(), self.coords(), "likelihood width");
        let half = T::of(0.5);
        let raw = match self {
            DensityModel::Factorized(m) => {
                let upper = m.logits(&x.map(|v| v + half));
                let lower = m.logits(&x.map(|v| v - half));
                upper.zip(&lower, sigmoid_diff)
            }
            DensityModel::Uniform(_) => {
                let mut out = x.clone();
                for (i, v) in out.data_mut().iter_mut().enumerate() {
                    let c = i % x.cols();
                    *v = self.cdf(*v + half, c) - self.cdf(*v - half, c);
                }
                out
            }
        };
        let floor = T::of(LIKELIHOOD_FLOOR);
        let clamped = raw.data().iter().filter(|&&v| !(v > floor)).count();
        (raw.map(|v| v.max(floor)), clamped)
    }

    /// Tape version of [`DensityModel::likelihoods`].
    pub fn likelihood_graph(&self, g: &mut Graph<T>, x: Var, params: &[Var]) -> Var {
        let (rows, cols) = g.value(x).shape();
        let plus = g.constant(Tensor::filled(rows, cols, T::of(0.5)));
        let minus = g.constant(Tensor::filled(rows, cols, T::of(-0.5)));
        let xu = g.add(x, plus);
        let xl = g.add(x, minus);
        let raw = match self {
            DensityModel::Factorized(m) => {
                let upper = m.logits_graph(g, xu, params);
                let lower = m.logits_graph(g, xl, params);
                g.sigmoid_diff(upper, lower)
            }
            DensityModel::Uniform(u) => {
                let scale = T::of(1.0 / (u.hi - u.lo));
                let offset = T::of(-u.lo / (u.hi - u.lo));
                let cu = g.affine_clamp01(xu, scale, offset);
                let cl = g.affine_clamp01(xl, scale, offset);
                g.sub(cu, cl)
            }
        };
        g.clamp_min(raw, T::of(LIKELIHOOD_FLOOR))
    }

    pub fn params(&self) -> &[Tensor<T>] {
        match self {
            DensityModel::Factorized(m) => m.params(),
            DensityModel::Uniform(_) => &[],
        }
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        match self {
            DensityModel::Factorized(m) => m.params_mut(),
            DensityModel::Uniform(_) => &mut [],
        }
    }

    /// `−Σ log₂ p(x)` over every entry of `values` (`N × coords`).
    pub fn rate_bits(&self, values: &Tensor<T>) -> RateEstimate {
        let (lik, clamped) = self.likelihoods(values);
        let bits = -lik.data().iter().map(|v| v.as_f64().log2()).sum::<f64>();
        RateEstimate { bits, clamped }
    }

    /// Integer table for coordinate `coord` over `support` (inclusive bounds).
    pub fn freeze_pmf(
        &self,
        coord: usize,
        support: (i32, i32),
        precision: u32,
        policy: EscapePolicy,
    ) -> Result<(PmfTable, FreezeReport)> {
        let (lo, hi) = support;
        if hi < lo {
            return Err(Error::Config(format!("empty support [{lo}, {hi}]")));
        }
        let probs: Vec<f64> = (lo..=hi)
            .map(|k| self.interval_likelihood(T::of(k as f64), coord).value.as_f64())
            .collect();
        let half = T::of(0.5);
        let below = self.cdf(T::of(lo as f64) - half, coord).as_f64();
        let above = 1.0 - self.cdf(T::of(hi as f64) + half, coord).as_f64();
        let outside = (below + above).max(0.0);
        let table = PmfTable::from_probabilities(lo, &probs, outside, precision, policy)?;
        let report = FreezeReport {
            outside_mass: outside,
            escape_added: table.has_escape() && policy != EscapePolicy::Always,
        };
        Ok((table, report))
    }
}

fn floor_likelihood<T: Scalar>(raw: T) -> Likelihood<T> {
    let floor = T::of(LIKELIHOOD_FLOOR);
    if raw > floor {
        Likelihood {
            value: raw,
            clamped: false,
        }
    } else {
        Likelihood {
            value: floor,
            clamped: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EscapePolicy {
    /// Out-of-support symbols are a coding error.
    Never,
    /// Add an escape slot when the mass outside the support exceeds
    /// [`ESCAPE_MASS_THRESHOLD`].
    Auto,
    Always,
}

/// Outcome of a freeze; `escape_added` is the "support too small" warning.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FreezeReport {
    pub outside_mass: f64,
    pub escape_added: bool,
}

/// Integer frequencies over `[min, max]` (plus an optional escape slot after
/// `max`) summing to exactly `2^precision`, every entry at least 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PmfTable {
    min: i32,
    freqs: Vec<u32>,
    escape: bool,
    precision: u32,
    cumulative: Vec<u32>,
}

impl PmfTable {
    /// Builds a table from unnormalized probabilities of the support symbols
    /// and the mass falling outside it.
    ///
    /// Frequencies are `max(1, round(p·2^precision))`, then nudged one count
    /// at a time towards the exact total, always picking the change that
    /// costs the least expected code length.
    pub fn from_probabilities(
        min: i32,
        probs: &[f64],
        outside_mass: f64,
        precision: u32,
        policy: EscapePolicy,
    ) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::Config("empty probability vector".into()));
        }
        if !(1..=16).contains(&precision) {
            return Err(Error::Config(format!("precision {precision} outside 1..=16")));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || !outside_mass.is_finite() {
            return Err(Error::Config("probabilities must be finite and non-negative".into()));
        }
        let escape = match policy {
            EscapePolicy::Never => false,
            EscapePolicy::Auto => outside_mass > ESCAPE_MASS_THRESHOLD,
            EscapePolicy::Always => true,
        };
        let mut p: Vec<f64> = probs.to_vec();
        if escape {
            p.push(outside_mass.max(0.0));
        }
        let total = 1u64 << precision;
        if p.len() as u64 > total {
            return Err(Error::Config(format!(
                "{} symbols do not fit in 2^{precision} counts",
                p.len()
            )));
        }
        let mass: f64 = p.iter().sum();
        if !(mass > 0.0) {
            // no information at all: fall back to uniform
            p.iter_mut().for_each(|v| *v = 1.0);
        }
        let mass: f64 = p.iter().sum();
        p.iter_mut().for_each(|v| *v /= mass);

        let mut freqs: Vec<u64> = p
            .iter()
            .map(|&v| ((v * total as f64).round() as u64).max(1))
            .collect();
        let mut sum: u64 = freqs.iter().sum();
        while sum > total {
            // cheapest decrement among entries that can still shrink
            let k = (0..freqs.len())
                .filter(|&k| freqs[k] > 1)
                .min_by(|&a, &b| {
                    let ca = p[a] * (freqs[a] as f64 / (freqs[a] - 1) as f64).ln();
                    let cb = p[b] * (freqs[b] as f64 / (freqs[b] - 1) as f64).ln();
                    ca.total_cmp(&cb)
                })
                .expect("total exceeds table size");
            freqs[k] -= 1;
            sum -= 1;
        }
        while sum < total {
            let k = (0..freqs.len())
                .max_by(|&a, &b| {
                    let ga = p[a] * ((freqs[a] + 1) as f64 / freqs[a] as f64).ln();
                    let gb = p[b] * ((freqs[b] + 1) as f64 / freqs[b] as f64).ln();
                    // ties go to the lowest index for determinism
                    ga.total_cmp(&gb).then(b.cmp(&a))
                })
                .unwrap();
            freqs[k] += 1;
            sum += 1;
        }
        Self::from_freqs(min, freqs.into_iter().map(|f| f as u32).collect(), escape, precision)
    }

    /// Wraps explicit frequencies (the last one is the escape slot when
    /// `escape` is set).
    pub fn from_freqs(min: i32, freqs: Vec<u32>, escape: bool, precision: u32) -> Result<Self> {
        if freqs.is_empty() || (escape && freqs.len() < 2) {
            return Err(Error::Config("table needs at least one symbol".into()));
        }
        if !(1..=16).contains(&precision) {
            return Err(Error::Config(format!("precision {precision} outside 1..=16")));
        }
        if freqs.iter().any(|&f| f == 0) {
            return Err(Error::Config("zero frequency in table".into()));
        }
        let total: u64 = freqs.iter().map(|&f| f as u64).sum();
        if total != 1u64 << precision {
            return Err(Error::Config(format!(
                "frequencies sum to {total}, expected 2^{precision}"
            )));
        }
        let symbols = freqs.len() - escape as usize;
        if (min as i64) + symbols as i64 - 1 > i32::MAX as i64 {
            return Err(Error::Config("support exceeds i32".into()));
        }
        let mut cumulative = Vec::with_capacity(freqs.len() + 1);
        let mut acc = 0u32;
        cumulative.push(0);
        for &f in &freqs {
            acc += f;
            cumulative.push(acc);
        }
        Ok(Self {
            min,
            freqs,
            escape,
            precision,
            cumulative,
        })
    }

    /// Inclusive support bounds, escape slot excluded.
    pub fn support(&self) -> (i32, i32) {
        (self.min, self.min + self.symbol_count() as i32 - 1)
    }

    pub fn symbol_count(&self) -> usize {
        self.freqs.len() - self.escape as usize
    }

    pub fn has_escape(&self) -> bool {
        self.escape
    }

    pub fn precision(&self) -> u32 {
        self.precision
    }

    pub fn freqs(&self) -> &[u32] {
        &self.freqs
    }

    /// Slot of `symbol`: its index, the escape slot, or `None`.
    pub fn slot(&self, symbol: i32) -> Option<usize> {
        let idx = symbol as i64 - self.min as i64;
        if idx >= 0 && (idx as usize) < self.symbol_count() {
            Some(idx as usize)
        } else if self.escape {
            Some(self.freqs.len() - 1)
        } else {
            None
        }
    }

    pub fn escape_slot(&self) -> Option<usize> {
        self.escape.then(|| self.freqs.len() - 1)
    }

    /// `(start, freq)` of a slot.
    pub fn interval(&self, slot: usize) -> (u32, u32) {
        (self.cumulative[slot], self.freqs[slot])
    }

    /// Slot whose interval contains `cum`.
    pub fn slot_for(&self, cum: u32) -> usize {
        // cumulative is strictly increasing
        self.cumulative.partition_point(|&c| c <= cum) - 1
    }

    pub fn symbol_of_slot(&self, slot: usize) -> i32 {
        self.min + slot as i32
    }

    /// Ideal code length of `symbol` under this table, escapes included
    /// (escape slot plus 32 raw bits).
    pub fn code_length_bits(&self, symbol: i32) -> Option<f64> {
        let slot = self.slot(symbol)?;
        let bits = self.precision as f64 - (self.freqs[slot] as f64).log2();
        Some(if Some(slot) == self.escape_slot() { bits + 32.0 } else { bits })
    }

    /// Entropy of the table distribution in bits.
    pub fn entropy_bits(&self) -> f64 {
        let total = (1u64 << self.precision) as f64;
        self.freqs
            .iter()
            .map(|&f| {
                let p = f as f64 / total;
                -p * p.log2()
            })
            .sum()
    }

    pub(crate) fn write(&self, w: &mut Writer) {
        w.i32(self.min);
        w.u32(self.freqs.len() as u32);
        w.u8(self.escape as u8);
        for &f in &self.freqs {
            w.u32(f);
        }
    }

    pub(crate) fn read(r: &mut Reader<'_>, precision: u32) -> Result<Self> {
        let at = r.offset();
        let min = r.i32()?;
        let n = r.u32()? as usize;
        let escape = r.u8()? != 0;
        if n > (1 << precision) {
            return Err(Error::format(at, format!("table with {n} entries")));
        }
        let freqs = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        Self::from_freqs(min, freqs, escape, precision).map_err(|e| Error::format(at, e.to_string()))
    }
}

/// Entropy model of one stage plus its frozen tables.
#[derive(Clone, Debug, PartialEq)]
pub struct StageEntropy<T> {
    rows: usize,
    channels: usize,
    shared: bool,
    model: DensityModel<T>,
    tables: Option<Vec<PmfTable>>,
}

impl<T: Scalar> StageEntropy<T> {
    pub fn model(&self) -> &DensityModel<T> {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DensityModel<T> {
        &mut self.model
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Whether one model serves every layer row of the stage.
    pub fn shared(&self) -> bool {
        self.shared
    }

    pub fn tables(&self) -> Option<&[PmfTable]> {
        self.tables.as_deref()
    }

    /// Model coordinate of entry `(row, channel)` of the stage block.
    pub fn coord(&self, row: usize, channel: usize) -> usize {
        if self.shared {
            channel
        } else {
            row * self.channels + channel
        }
    }

    /// Coordinate of the `i`-th value of the stage block in row-major order.
    pub fn coord_of_index(&self, i: usize) -> usize {
        if self.shared {
            i % self.channels
        } else {
            i
        }
    }

    /// Shape in which `items` stage blocks are fed to the model.
    pub fn model_shape(&self, items: usize) -> (usize, usize) {
        if self.shared {
            (items * self.rows, self.channels)
        } else {
            (items, self.rows * self.channels)
        }
    }

    pub fn table_for_index(&self, i: usize) -> Option<&PmfTable> {
        self.tables.as_ref().map(|t| &t[self.coord_of_index(i)])
    }
}

/// One entropy model per stage, covering a full latent.
#[derive(Clone, Debug, PartialEq)]
pub struct StagedEntropy<T> {
    ranges: Vec<Range<usize>>,
    channels: usize,
    stages: Vec<StageEntropy<T>>,
}

impl<T: Scalar> StagedEntropy<T> {
    /// Learned factorized models with the default `(1, 3, 3, 3, 1)` widths.
    pub fn factorized(layout: &StageLayout, channels: usize, shared: bool) -> Self {
        Self::build(layout, channels, shared, |d| DensityModel::Factorized(FactorizedModel::new(d)))
    }

    /// Fixed uniform density on `[lo, hi]` for every coordinate.
    pub fn uniform(layout: &StageLayout, channels: usize, lo: f64, hi: f64) -> Self {
        Self::build(layout, channels, false, |d| {
            DensityModel::Uniform(UniformModel { coords: d, lo, hi })
        })
    }

    fn build(
        layout: &StageLayout,
        channels: usize,
        shared: bool,
        make: impl Fn(usize) -> DensityModel<T>,
    ) -> Self {
        let stages = layout
            .stages()
            .iter()
            .map(|r| {
                let coords = if shared { channels } else { r.len() * channels };
                StageEntropy {
                    rows: r.len(),
                    channels,
                    shared,
                    model: make(coords),
                    tables: None,
                }
            })
            .collect();
        Self {
            ranges: layout.stages().to_vec(),
            channels,
            stages,
        }
    }

    pub fn stages(&self) -> &[StageEntropy<T>] {
        &self.stages
    }

    pub fn stage(&self, s: usize) -> &StageEntropy<T> {
        &self.stages[s]
    }

    pub fn stage_mut(&mut self, s: usize) -> &mut StageEntropy<T> {
        &mut self.stages[s]
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn layers(&self) -> usize {
        self.ranges.last().map(|r| r.end).unwrap_or(0)
    }

    pub fn is_frozen(&self) -> bool {
        self.stages.iter().all(|s| s.tables.is_some())
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.stages.iter().flat_map(|s| s.model.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.stages
            .iter_mut()
            .flat_map(|s| s.model.params_mut().iter_mut())
            .collect()
    }

    pub fn stage_param_spans(&self) -> Vec<Range<usize>> {
        let mut at = 0;
        self.stages
            .iter()
            .map(|s| {
                let n = s.model.params().len();
                at += n;
                at - n..at
            })
            .collect()
    }

    fn check_shape(&self, code: &LatentCode<T>) -> Result<()> {
        if code.channels() != self.channels || code.layers() != self.layers() {
            return Err(Error::Shape(format!(
                "latent {:?} vs entropy model ({}, {})",
                code.shape(),
                self.layers(),
                self.channels
            )));
        }
        Ok(())
    }

    /// Model rate of a whole latent (values in the transformed space).
    pub fn rate_bits(&self, code: &LatentCode<T>) -> Result<RateEstimate> {
        self.check_shape(code)?;
        let c = self.channels;
        let mut total = RateEstimate::default();
        for (stage, r) in self.stages.iter().zip(&self.ranges) {
            let (rows, cols) = stage.model_shape(1);
            let block = Tensor::from_vec(rows, cols, code.as_slice()[r.start * c..r.end * c].to_vec());
            let est = stage.model.rate_bits(&block);
            total.bits += est.bits;
            total.clamped += est.clamped;
        }
        Ok(total)
    }

    /// Freezes one table per model coordinate. `supports[s][coord]` gives the
    /// inclusive symbol range of each coordinate of stage `s`.
    pub fn freeze(
        &mut self,
        supports: &[Vec<(i32, i32)>],
        precision: u32,
        policy: EscapePolicy,
    ) -> Result<Vec<FreezeReport>> {
        if supports.len() != self.stages.len() {
            return Err(Error::Config("one support list per stage required".into()));
        }
        let mut reports = Vec::new();
        for (stage, sup) in self.stages.iter_mut().zip(supports) {
            if sup.len() != stage.model.coords() {
                return Err(Error::Config(format!(
                    "{} supports for {} coordinates",
                    sup.len(),
                    stage.model.coords()
                )));
            }
            let mut tables = Vec::with_capacity(sup.len());
            for (coord, &support) in sup.iter().enumerate() {
                let (t, rep) = stage.model.freeze_pmf(coord, support, precision, policy)?;
                tables.push(t);
                reports.push(rep);
            }
            stage.tables = Some(tables);
        }
        Ok(reports)
    }

    /// Drops frozen tables (e.g. before further training).
    pub fn thaw(&mut self) {
        for s in &mut self.stages {
            s.tables = None;
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer::new();
        w.bytes(ENTROPY_MAGIC);
        w.u16(ENTROPY_VERSION);
        w.dim16(self.channels, "channels")?;
        w.dim16(self.stages.len(), "stage count")?;
        for (stage, r) in self.stages.iter().zip(&self.ranges) {
            w.dim16(r.start, "stage start")?;
            w.dim16(r.end, "stage end")?;
            w.u8(stage.shared as u8);
            let d = stage.model.coords();
            w.dim32(d, "coordinate count")?;
            match &stage.model {
                DensityModel::Factorized(m) => {
                    w.u8(0);
                    w.u8(m.filters.len() as u8);
                    for &f in &m.filters {
                        w.dim16(f, "filter width")?;
                    }
                    // per-coordinate parameter blocks
                    for coord in 0..d {
                        for p in &m.params {
                            w.f64(p.data()[coord].as_f64());
                        }
                    }
                }
                DensityModel::Uniform(u) => {
                    w.u8(1);
                    w.f64(u.lo);
                    w.f64(u.hi);
                }
            }
            match &stage.tables {
                None => w.u8(0),
                Some(tables) => {
                    w.u8(1);
                    w.u8(tables[0].precision as u8);
                    for t in tables {
                        t.write(&mut w);
                    }
                }
            }
        }
        Ok(w.buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(ENTROPY_MAGIC)?;
        let version = r.u16()?;
        if version != ENTROPY_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "entropy model",
                found: version,
                expected: ENTROPY_VERSION,
            });
        }
        let channels = r.u16()? as usize;
        let count = r.u16()? as usize;
        let mut ranges = Vec::with_capacity(count);
        let mut stages = Vec::with_capacity(count);
        for _ in 0..count {
            let at = r.offset();
            let start = r.u16()? as usize;
            let end = r.u16()? as usize;
            if end <= start {
                return Err(Error::format(at, "empty stage range"));
            }
            let shared = r.u8()? != 0;
            let d = r.u32()? as usize;
            let expect = if shared { channels } else { (end - start) * channels };
            if d != expect {
                return Err(Error::format(at, format!("{d} coordinates, expected {expect}")));
            }
            let kind_at = r.offset();
            let model = match r.u8()? {
                0 => {
                    let nf = r.u8()? as usize;
                    let filters = (0..nf)
                        .map(|_| r.u16().map(|v| v as usize))
                        .collect::<Result<Vec<_>>>()?;
                    if nf < 2 || filters[0] != 1 || filters[nf - 1] != 1 || filters.contains(&0) {
                        return Err(Error::format(kind_at, "invalid filter widths"));
                    }
                    let mut m = FactorizedModel::<T>::with_filters(d, &filters[1..nf - 1]);
                    let np = m.params.len();
                    let mut data = vec![vec![T::zero(); d]; np];
                    for coord in 0..d {
                        for row in data.iter_mut() {
                            row[coord] = T::of(r.f64()?);
                        }
                    }
                    m.params = data.into_iter().map(|v| Tensor::from_vec(1, d, v)).collect();
                    DensityModel::Factorized(m)
                }
                1 => {
                    let lo = r.f64()?;
                    let hi = r.f64()?;
                    if !(hi > lo) {
                        return Err(Error::format(kind_at, "uniform model with hi <= lo"));
                    }
                    DensityModel::Uniform(UniformModel { coords: d, lo, hi })
                }
                k => return Err(Error::format(kind_at, format!("unknown model kind {k}"))),
            };
            let tables = match r.u8()? {
                0 => None,
                _ => {
                    let precision = r.u8()? as u32;
                    Some((0..d).map(|_| PmfTable::read(&mut r, precision)).collect::<Result<Vec<_>>>()?)
                }
            };
            ranges.push(start..end);
            stages.push(StageEntropy {
                rows: end - start,
                channels,
                shared,
                model,
                tables,
            });
        }
        r.finish()?;
        let layers = ranges.last().map(|r| r.end).unwrap_or(0);
        StageLayout::unweighted(ranges.clone())
            .and_then(|l| l.check_layers(layers))
            .map_err(|e| Error::format(0, e.to_string()))?;
        Ok(Self {
            ranges,
            channels,
            stages,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

const ENTROPY_MAGIC: &[u8; 4] = b"SGEM";
pub const ENTROPY_VERSION: u16 = 1;
