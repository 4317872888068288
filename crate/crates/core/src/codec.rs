//! Intra and inter codecs and the `.sgvc` container.
//!
//! Symbols are integers and the reconstruction state of the inter codec is
//! kept as integer vectors, so the encoder's copy of the decoder state and
//! the decoder's own state are identical by construction. Floats only enter
//! when mapping a decoded state back through the inverse flow.

use std::ops::Range;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::bytes::{Reader, Writer};
use crate::entropy::{EscapePolicy, FreezeReport, PmfTable, StagedEntropy, DEFAULT_PRECISION};
use crate::error::{Error, Result};
use crate::flow::StagedFlow;
use crate::irwin_hall::{default_residual_support, residual_pmf, IrwinHall};
use crate::latent::{LatentCode, LatentSequence};
use crate::rans::{decode_with, encode_with, EncodedChunk};
use crate::scalar::Scalar;

pub const CONTAINER_VERSION: u16 = 1;
const CONTAINER_MAGIC: &[u8; 4] = b"SGVC";
/// Largest supported residual gap.
pub const MAX_GAP: u32 = 18;
/// Share of escaped symbols above which encoding reports a warning.
pub const ESCAPE_WARNING_RATE: f64 = 0.10;
/// Margin added around observed symbol ranges when freezing tables.
pub const SUPPORT_MARGIN: i32 = 2;

/// Rounds half away from zero.
pub fn hard_quantize<T: Scalar>(x: &[T]) -> Result<Vec<i32>> {
    x.iter()
        .map(|&v| {
            let r = v.as_f64().round();
            if !r.is_finite() || r.abs() > i32::MAX as f64 {
                Err(Error::Overflow(v.as_f64()))
            } else {
                Ok(r as i32)
            }
        })
        .collect()
}

pub fn latent_mse<T: Scalar>(a: &LatentCode<T>, b: &LatentCode<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let sum: f64 = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| (x.as_f64() - y.as_f64()).powi(2))
        .sum();
    Ok(sum / a.len() as f64)
}

/// Bits per pixel of `total_bytes` spread over `frames` images.
pub fn bpp(total_bytes: usize, width: u32, height: u32, frames: usize) -> f64 {
    total_bytes as f64 * 8.0 / (width as f64 * height as f64 * frames.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageDims {
    pub width: u32,
    pub height: u32,
}

impl Default for ImageDims {
    fn default() -> Self {
        Self {
            width: 1024,
            height: 1024,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CodingMode {
    /// Every frame coded independently.
    Intra,
    /// Differences every frame, residual correction every `g` frames.
    InterResidual,
    /// Differences every frame, intra refresh every `g` frames.
    InterRefresh,
}

impl CodingMode {
    fn tag(self) -> u8 {
        match self {
            CodingMode::Intra => 0,
            CodingMode::InterResidual => 1,
            CodingMode::InterRefresh => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => CodingMode::Intra,
            1 => CodingMode::InterResidual,
            2 => CodingMode::InterRefresh,
            _ => return None,
        })
    }
}

/// How frame `t` is coded under `mode` with gap `g`.
fn frame_plan(mode: CodingMode, t: usize, g: u32) -> FramePlan {
    let anchor = t % g as usize == 0;
    match mode {
        CodingMode::Intra => FramePlan::Intra,
        _ if t == 0 => FramePlan::Intra,
        CodingMode::InterRefresh if anchor => FramePlan::Intra,
        CodingMode::InterResidual if anchor => FramePlan::DiffResidual,
        _ => FramePlan::Diff,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum FramePlan {
    Intra,
    Diff,
    DiffResidual,
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

/// Everything both ends need: the flow, frozen difference (primary) tables,
/// optional frozen intra tables, and the residual law of gap `g`.
#[derive(Clone, Debug)]
pub struct CodecBundle<T> {
    flow: StagedFlow<T>,
    primary: StagedEntropy<T>,
    intra: Option<StagedEntropy<T>>,
    g: u32,
    residual: PmfTable,
    law: IrwinHall,
    digests: Vec<[u8; 32]>,
}

impl<T: Scalar> CodecBundle<T> {
    pub fn new(flow: StagedFlow<T>, primary: StagedEntropy<T>, intra: Option<StagedEntropy<T>>, g: u32) -> Result<Self> {
        if g == 0 || g > MAX_GAP {
            return Err(Error::Config(format!("residual gap {g} outside 1..={MAX_GAP}")));
        }
        for (name, e) in std::iter::once(("primary", &primary)).chain(intra.iter().map(|e| ("intra", e))) {
            if !e.is_frozen() {
                return Err(Error::Config(format!("{name} entropy model has no frozen tables")));
            }
            if e.ranges() != flow.layout().stages() || e.channels() != flow.channels() {
                return Err(Error::Config(format!("{name} entropy model does not match the flow layout")));
            }
        }
        let residual = residual_pmf(g, default_residual_support(g)?, DEFAULT_PRECISION, EscapePolicy::Always)?;
        let mut digests = vec![sha256(&flow.to_bytes()?), sha256(&primary.to_bytes()?)];
        if let Some(e) = &intra {
            digests.push(sha256(&e.to_bytes()?));
        }
        Ok(Self {
            flow,
            primary,
            intra,
            g,
            residual,
            law: IrwinHall::for_gap(g)?,
            digests,
        })
    }

    /// Same models with another residual gap.
    pub fn with_gap(&self, g: u32) -> Result<Self> {
        Self::new(self.flow.clone(), self.primary.clone(), self.intra.clone(), g)
    }

    pub fn load(
        flow: impl AsRef<Path>,
        primary: impl AsRef<Path>,
        intra: Option<&Path>,
        g: u32,
    ) -> Result<Self> {
        let intra = intra.map(StagedEntropy::load).transpose()?;
        Self::new(StagedFlow::load(flow)?, StagedEntropy::load(primary)?, intra, g)
    }

    pub fn flow(&self) -> &StagedFlow<T> {
        &self.flow
    }

    pub fn primary(&self) -> &StagedEntropy<T> {
        &self.primary
    }

    /// Intra tables, falling back to the primary ones.
    pub fn intra_entropy(&self) -> &StagedEntropy<T> {
        self.intra.as_ref().unwrap_or(&self.primary)
    }

    pub fn g(&self) -> u32 {
        self.g
    }

    pub fn residual_table(&self) -> &PmfTable {
        &self.residual
    }

    pub fn digests(&self) -> &[[u8; 32]] {
        &self.digests
    }

    fn shape(&self) -> (usize, usize) {
        (self.flow.layout().layers(), self.flow.channels())
    }

    fn check(&self, code: &LatentCode<T>) -> Result<()> {
        if code.shape() != self.shape() {
            return Err(Error::Shape(format!("latent {:?} vs bundle {:?}", code.shape(), self.shape())));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContainerHeader {
    pub layers: usize,
    pub channels: usize,
    pub frame_count: usize,
    pub g: u32,
    pub mode: CodingMode,
    pub stages: Vec<Range<usize>>,
    pub dims: ImageDims,
    pub digests: Vec<[u8; 32]>,
}

/// Header plus one chunk per frame and stage, frame-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub header: ContainerHeader,
    pub chunks: Vec<EncodedChunk>,
}

impl Container {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let h = &self.header;
        let mut w = Writer::new();
        w.bytes(CONTAINER_MAGIC);
        w.u16(CONTAINER_VERSION);
        w.dim16(h.layers, "layers")?;
        w.dim16(h.channels, "channels")?;
        w.dim32(h.frame_count, "frame count")?;
        w.dim16(h.g as usize, "gap")?;
        w.u8(h.mode.tag());
        w.dim16(h.stages.len(), "stage count")?;
        for r in &h.stages {
            w.dim16(r.start, "stage start")?;
            w.dim16(r.end, "stage end")?;
        }
        w.u32(h.dims.width);
        w.u32(h.dims.height);
        w.u8(h.digests.len() as u8);
        for d in &h.digests {
            w.bytes(d);
        }
        for c in &self.chunks {
            c.write(&mut w)?;
        }
        Ok(w.buf)
    }

    fn read_header(r: &mut Reader<'_>) -> Result<ContainerHeader> {
        r.magic(CONTAINER_MAGIC)?;
        let version = r.u16()?;
        if version != CONTAINER_VERSION {
            return Err(Error::UnsupportedVersion {
                what: "container",
                found: version,
                expected: CONTAINER_VERSION,
            });
        }
        let layers = r.u16()? as usize;
        let channels = r.u16()? as usize;
        let frame_count = r.u32()? as usize;
        let g_at = r.offset();
        let g = r.u16()? as u32;
        if g == 0 || g > MAX_GAP {
            return Err(Error::format(g_at, format!("residual gap {g}")));
        }
        let mode_at = r.offset();
        let mode = CodingMode::from_tag(r.u8()?).ok_or_else(|| Error::format(mode_at, "unknown coding mode"))?;
        let n = r.u16()? as usize;
        let mut stages = Vec::with_capacity(n);
        for _ in 0..n {
            let start = r.u16()? as usize;
            let end = r.u16()? as usize;
            stages.push(start..end);
        }
        let dims = ImageDims {
            width: r.u32()?,
            height: r.u32()?,
        };
        let count = r.u8()? as usize;
        let digests = (0..count).map(|_| r.digest()).collect::<Result<Vec<_>>>()?;
        Ok(ContainerHeader {
            layers,
            channels,
            frame_count,
            g,
            mode,
            stages,
            dims,
            digests,
        })
    }

    /// Strict parse: every announced chunk present, nothing trailing.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let header = Self::read_header(&mut r)?;
        let n = header.frame_count * header.stages.len();
        let chunks = (0..n).map(|_| EncodedChunk::read(&mut r)).collect::<Result<Vec<_>>>()?;
        r.finish()?;
        Ok(Self { header, chunks })
    }

    /// Keeps the complete frames of a truncated container; `frame_count` is
    /// lowered accordingly.
    pub fn from_bytes_lenient(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let mut header = Self::read_header(&mut r)?;
        let per_frame = header.stages.len().max(1);
        let mut chunks = Vec::new();
        while chunks.len() < header.frame_count * per_frame {
            match EncodedChunk::read(&mut r) {
                Ok(c) => chunks.push(c),
                Err(_) => break,
            }
        }
        let frames = chunks.len() / per_frame;
        chunks.truncate(frames * per_frame);
        header.frame_count = frames;
        Ok(Self { header, chunks })
    }

    pub fn total_bytes(&self) -> Result<usize> {
        Ok(self.to_bytes()?.len())
    }

    pub fn payload_bytes(&self) -> usize {
        self.chunks.iter().map(|c| c.payload.len()).sum()
    }

    /// Container bits per pixel at the header's image size.
    pub fn bpp(&self) -> Result<f64> {
        let h = &self.header;
        Ok(bpp(self.total_bytes()?, h.dims.width, h.dims.height, h.frame_count))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn check_bundle<T: Scalar>(&self, bundle: &CodecBundle<T>) -> Result<()> {
        let h = &self.header;
        if (h.layers, h.channels) != bundle.shape() || h.stages != bundle.flow.layout().stages() {
            return Err(Error::Shape(format!(
                "container latent {:?} with stages {:?} does not match bundle",
                (h.layers, h.channels),
                h.stages
            )));
        }
        for slot in 0..h.digests.len().max(bundle.digests.len()) {
            if h.digests.get(slot) != bundle.digests.get(slot) {
                return Err(Error::DigestMismatch { slot });
            }
        }
        Ok(())
    }
}

/// Symbol and size statistics of one encode.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EncodeStats {
    pub symbols: usize,
    pub escapes: usize,
    pub payload_bytes: usize,
    /// `−Σ log₂ p` of the coded symbols under the continuous models.
    pub model_bits: f64,
    /// Ideal code length under the frozen tables.
    pub table_bits: f64,
    pub warnings: Vec<String>,
}

impl EncodeStats {
    fn finish(&mut self) {
        if self.symbols > 0 && self.escapes as f64 > ESCAPE_WARNING_RATE * self.symbols as f64 {
            self.warnings.push(format!(
                "{} of {} symbols escaped; tables do not cover the data",
                self.escapes, self.symbols
            ));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Encoding {
    pub container: Container,
    /// Reconstruction state (transformed-space integers) after every frame,
    /// exactly as the decoder will rebuild it.
    pub states: Vec<Vec<i32>>,
    pub stats: EncodeStats,
}

#[derive(Clone, Debug)]
pub struct Decoding<T> {
    pub latents: LatentSequence<T>,
    pub states: Vec<Vec<i32>>,
}

enum TableSet<'a, T> {
    Entropy(&'a StagedEntropy<T>),
    Residual(&'a PmfTable, &'a IrwinHall),
}

/// Codes one stage block of symbols under one or two table sets.
fn code_stage<T: Scalar>(
    parts: &[(&[i32], TableSet<'_, T>)],
    s: usize,
    stats: &mut EncodeStats,
) -> Result<EncodedChunk> {
    let mut symbols = Vec::new();
    let mut tables: Vec<&PmfTable> = Vec::new();
    for (block, set) in parts {
        for (i, &sym) in block.iter().enumerate() {
            let (table, model_p) = match set {
                TableSet::Entropy(e) => {
                    let stage = e.stage(s);
                    let table = stage.table_for_index(i).expect("bundle tables are frozen");
                    let p = stage
                        .model()
                        .interval_likelihood(T::of(sym as f64), stage.coord_of_index(i))
                        .value
                        .as_f64();
                    (table, p)
                }
                TableSet::Residual(t, law) => (*t, law.bin_probability(sym)),
            };
            stats.model_bits -= model_p.max(crate::entropy::LIKELIHOOD_FLOOR).log2();
            stats.table_bits += table.code_length_bits(sym).unwrap_or(f64::INFINITY);
            if table.slot(sym) == table.escape_slot() && table.escape_slot().is_some() {
                stats.escapes += 1;
            }
            symbols.push(sym);
            tables.push(table);
        }
    }
    stats.symbols += symbols.len();
    let chunk = encode_with(&symbols, |i| tables[i])?;
    stats.payload_bytes += chunk.payload.len();
    Ok(chunk)
}

fn decode_stage<T: Scalar>(
    chunk: &EncodedChunk,
    parts: &[(usize, TableSet<'_, T>)],
    s: usize,
    frame: usize,
) -> Result<Vec<Vec<i32>>> {
    let mut tables: Vec<&PmfTable> = Vec::new();
    for (len, set) in parts {
        for i in 0..*len {
            tables.push(match set {
                TableSet::Entropy(e) => e.stage(s).table_for_index(i).expect("bundle tables are frozen"),
                TableSet::Residual(t, _) => t,
            });
        }
    }
    let flat = decode_with(chunk, tables.len(), |i| tables[i]).map_err(|e| match e {
        Error::Decode { position, msg } => Error::Decode {
            position,
            msg: format!("frame {frame}, stage {s}: {msg}"),
        },
        other => other,
    })?;
    let mut out = Vec::with_capacity(parts.len());
    let mut at = 0;
    for (len, _) in parts {
        out.push(flat[at..at + len].to_vec());
        at += len;
    }
    Ok(out)
}

fn header_for<T: Scalar>(bundle: &CodecBundle<T>, frames: usize, mode: CodingMode, dims: ImageDims) -> ContainerHeader {
    let (layers, channels) = bundle.shape();
    ContainerHeader {
        layers,
        channels,
        frame_count: frames,
        g: bundle.g,
        mode,
        stages: bundle.flow.layout().stages().to_vec(),
        dims,
        digests: bundle.digests.clone(),
    }
}

fn transformed<T: Scalar>(bundle: &CodecBundle<T>, code: &LatentCode<T>) -> Result<LatentCode<T>> {
    bundle.check(code)?;
    bundle.flow.forward(code)
}

fn add_checked(a: i32, b: i32) -> Result<i32> {
    a.checked_add(b).ok_or(Error::Overflow(a as f64 + b as f64))
}

/// Intra-codes every frame independently.
pub fn encode_intra_sequence<T: Scalar>(seq: &LatentSequence<T>, bundle: &CodecBundle<T>, dims: ImageDims) -> Result<Encoding> {
    encode_frames(seq.frames(), bundle, dims, CodingMode::Intra)
}

/// Intra-codes a single latent.
pub fn encode_intra<T: Scalar>(w: &LatentCode<T>, bundle: &CodecBundle<T>, dims: ImageDims) -> Result<Encoding> {
    encode_frames(std::slice::from_ref(w), bundle, dims, CodingMode::Intra)
}

/// Inter-codes a sequence: frame 0 intra, then quantized open-loop
/// differences, corrected every `g` frames by a residual (or an intra
/// refresh when `refresh` is set).
pub fn encode_inter<T: Scalar>(
    seq: &LatentSequence<T>,
    bundle: &CodecBundle<T>,
    dims: ImageDims,
    refresh: bool,
) -> Result<Encoding> {
    let mode = if refresh { CodingMode::InterRefresh } else { CodingMode::InterResidual };
    encode_frames(seq.frames(), bundle, dims, mode)
}

fn encode_frames<T: Scalar>(frames: &[LatentCode<T>], bundle: &CodecBundle<T>, dims: ImageDims, mode: CodingMode) -> Result<Encoding> {
    if frames.is_empty() {
        return Err(Error::Config("nothing to encode".into()));
    }
    let c = bundle.flow.channels();
    let ranges = bundle.flow.layout().stages().to_vec();
    let mut stats = EncodeStats::default();
    let mut chunks = Vec::with_capacity(frames.len() * ranges.len());
    let mut states: Vec<Vec<i32>> = Vec::with_capacity(frames.len());
    let mut prev_true: Option<LatentCode<T>> = None;
    for (t, frame) in frames.iter().enumerate() {
        let w_star = transformed(bundle, frame)?;
        let plan = frame_plan(mode, t, bundle.g);
        let state = match plan {
            FramePlan::Intra => {
                let q = hard_quantize(w_star.as_slice())?;
                for (s, r) in ranges.iter().enumerate() {
                    let block = &q[r.start * c..r.end * c];
                    chunks.push(code_stage(&[(block, TableSet::Entropy(bundle.intra_entropy()))], s, &mut stats)?);
                }
                q
            }
            FramePlan::Diff | FramePlan::DiffResidual => {
                let prev = prev_true.as_ref().expect("frame 0 is intra");
                let delta: Vec<f64> = w_star
                    .as_slice()
                    .iter()
                    .zip(prev.as_slice())
                    .map(|(&a, &b)| a.as_f64() - b.as_f64())
                    .collect();
                let v = hard_quantize(&delta)?;
                let last = states.last().expect("frame 0 is intra");
                let w_bar = last.iter().zip(&v).map(|(&a, &b)| add_checked(a, b)).collect::<Result<Vec<_>>>()?;
                let (next, residual) = if plan == FramePlan::DiffResidual {
                    let gap: Vec<f64> = w_star
                        .as_slice()
                        .iter()
                        .zip(&w_bar)
                        .map(|(&a, &b)| a.as_f64() - b as f64)
                        .collect();
                    let r = hard_quantize(&gap)?;
                    let next = w_bar.iter().zip(&r).map(|(&a, &b)| add_checked(a, b)).collect::<Result<Vec<_>>>()?;
                    (next, Some(r))
                } else {
                    (w_bar, None)
                };
                for (s, rg) in ranges.iter().enumerate() {
                    let span = rg.start * c..rg.end * c;
                    let mut parts = vec![(&v[span.clone()], TableSet::Entropy(&bundle.primary))];
                    if let Some(r) = &residual {
                        parts.push((&r[span], TableSet::Residual(&bundle.residual, &bundle.law)));
                    }
                    chunks.push(code_stage(&parts, s, &mut stats)?);
                }
                next
            }
        };
        states.push(state);
        prev_true = Some(w_star);
    }
    stats.finish();
    Ok(Encoding {
        container: Container {
            header: header_for(bundle, frames.len(), mode, dims),
            chunks,
        },
        states,
        stats,
    })
}

/// Decodes any container produced by this module.
pub fn decode<T: Scalar>(container: &Container, bundle: &CodecBundle<T>) -> Result<Decoding<T>> {
    container.check_bundle(bundle)?;
    let h = &container.header;
    if h.g != bundle.g {
        // the gap only selects the residual table, which follows from g
        return decode(container, &bundle.with_gap(h.g)?);
    }
    if h.frame_count == 0 {
        return Err(Error::Decode {
            position: 0,
            msg: "container holds no frames".into(),
        });
    }
    let c = h.channels;
    let n = h.stages.len();
    if container.chunks.len() != h.frame_count * n {
        return Err(Error::Decode {
            position: container.chunks.len(),
            msg: format!("{} chunks for {} frames", container.chunks.len(), h.frame_count),
        });
    }
    let mut states: Vec<Vec<i32>> = Vec::with_capacity(h.frame_count);
    let mut frames = Vec::with_capacity(h.frame_count);
    for t in 0..h.frame_count {
        let plan = frame_plan(h.mode, t, h.g);
        let mut state = vec![0i32; h.layers * c];
        for (s, r) in h.stages.iter().enumerate() {
            let chunk = &container.chunks[t * n + s];
            let len = r.len() * c;
            let span = r.start * c..r.end * c;
            match plan {
                FramePlan::Intra => {
                    let parts = decode_stage(chunk, &[(len, TableSet::Entropy(bundle.intra_entropy()))], s, t)?;
                    state[span].copy_from_slice(&parts[0]);
                }
                FramePlan::Diff | FramePlan::DiffResidual => {
                    let mut layouts = vec![(len, TableSet::Entropy(&bundle.primary))];
                    if plan == FramePlan::DiffResidual {
                        layouts.push((len, TableSet::Residual(&bundle.residual, &bundle.law)));
                    }
                    let parts = decode_stage(chunk, &layouts, s, t)?;
                    let last = &states[t - 1][span.clone()];
                    for (j, out) in state[span].iter_mut().enumerate() {
                        let mut v = add_checked(last[j], parts[0][j])?;
                        if let Some(r) = parts.get(1) {
                            v = add_checked(v, r[j])?;
                        }
                        *out = v;
                    }
                }
            }
        }
        let w_star = LatentCode::new(h.layers, c, state.iter().map(|&v| T::of(v as f64)).collect())?;
        frames.push(bundle.flow.inverse(&w_star)?);
        states.push(state);
    }
    Ok(Decoding {
        latents: LatentSequence::new(frames)?,
        states,
    })
}

/// Decodes a single intra-coded latent.
pub fn decode_intra<T: Scalar>(container: &Container, bundle: &CodecBundle<T>) -> Result<LatentCode<T>> {
    if container.header.mode != CodingMode::Intra {
        return Err(Error::Decode {
            position: 0,
            msg: "container is not intra-coded".into(),
        });
    }
    Ok(decode(container, bundle)?.latents.into_frames().swap_remove(0))
}

pub fn decode_inter<T: Scalar>(container: &Container, bundle: &CodecBundle<T>) -> Result<Decoding<T>> {
    if container.header.mode == CodingMode::Intra {
        return Err(Error::Decode {
            position: 0,
            msg: "container is intra-coded".into(),
        });
    }
    decode(container, bundle)
}

/// Hard-quantized transformed frames.
pub fn intra_symbols<T: Scalar>(flow: &StagedFlow<T>, frames: &[LatentCode<T>]) -> Result<Vec<Vec<i32>>> {
    frames.iter().map(|f| hard_quantize(flow.forward(f)?.as_slice())).collect()
}

/// Quantized open-loop differences of transformed consecutive frames.
pub fn difference_symbols<T: Scalar>(flow: &StagedFlow<T>, seqs: &[LatentSequence<T>]) -> Result<Vec<Vec<i32>>> {
    let mut out = Vec::new();
    for seq in seqs {
        let mapped = seq.frames().iter().map(|f| flow.forward(f)).collect::<Result<Vec<_>>>()?;
        for pair in mapped.windows(2) {
            let d: Vec<f64> = pair[1]
                .as_slice()
                .iter()
                .zip(pair[0].as_slice())
                .map(|(&a, &b)| a.as_f64() - b.as_f64())
                .collect();
            out.push(hard_quantize(&d)?);
        }
    }
    Ok(out)
}

/// Per-stage, per-coordinate observed ranges widened by `margin`.
pub fn symbol_supports<T: Scalar>(entropy: &StagedEntropy<T>, symbols: &[Vec<i32>], margin: i32) -> Result<Vec<Vec<(i32, i32)>>> {
    if symbols.is_empty() {
        return Err(Error::Config("no symbols to derive supports from".into()));
    }
    let c = entropy.channels();
    let mut out = Vec::with_capacity(entropy.stages().len());
    for (stage, r) in entropy.stages().iter().zip(entropy.ranges()) {
        let d = stage.model().coords();
        let mut lo = vec![i32::MAX; d];
        let mut hi = vec![i32::MIN; d];
        for frame in symbols {
            if frame.len() != entropy.layers() * c {
                return Err(Error::Shape("symbol frame size".into()));
            }
            for (i, &v) in frame[r.start * c..r.end * c].iter().enumerate() {
                let k = stage.coord_of_index(i);
                lo[k] = lo[k].min(v);
                hi[k] = hi[k].max(v);
            }
        }
        out.push(
            lo.into_iter()
                .zip(hi)
                .map(|(a, b)| (a.saturating_sub(margin), b.saturating_add(margin)))
                .collect(),
        );
    }
    Ok(out)
}

/// Freezes coding tables (with escapes) over the supports seen in `symbols`.
pub fn freeze_tables<T: Scalar>(entropy: &mut StagedEntropy<T>, symbols: &[Vec<i32>]) -> Result<Vec<FreezeReport>> {
    let supports = symbol_supports(entropy, symbols, SUPPORT_MARGIN)?;
    entropy.freeze(&supports, DEFAULT_PRECISION, EscapePolicy::Always)
}
