//! Latent tensors, stage partitioning and the `.sglat` file format.

use std::fmt;
use std::ops::Range;
use std::path::Path;
use std::str::FromStr;

use crate::bytes::{Reader, Writer};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Number of generator layers in the full-size latent.
pub const FULL_LAYERS: usize = 18;
/// Channels per generator layer in the full-size latent.
pub const FULL_CHANNELS: usize = 512;
/// Desk-scale shape used by tests and the synthetic pipeline.
pub const DESK_LAYERS: usize = 4;
pub const DESK_CHANNELS: usize = 32;

/// One frame's latent: `layers × channels` values, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode<T> {
    layers: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> LatentCode<T> {
    pub fn new(layers: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if layers == 0 || channels == 0 {
            return Err(Error::Shape(format!("empty latent {layers}x{channels}")));
        }
        if data.len() != layers * channels {
            return Err(Error::Shape(format!(
                "{} values for a {layers}x{channels} latent",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Shape(format!("non-finite entry at index {i}")));
        }
        Ok(Self {
            layers,
            channels,
            data,
        })
    }

    pub fn zeros(layers: usize, channels: usize) -> Self {
        Self::new(layers, channels, vec![T::zero(); layers * channels]).expect("non-empty shape")
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.layers, self.channels)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, layer: usize) -> &[T] {
        &self.data[layer * self.channels..(layer + 1) * self.channels]
    }

    pub fn get(&self, layer: usize, channel: usize) -> T {
        self.data[layer * self.channels + channel]
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> LatentCode<U> {
        LatentCode {
            layers: self.layers,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    /// Reassembles stage slices produced by [`stage_split`].
    pub fn concat(parts: &[LatentCode<T>]) -> Result<Self> {
        let channels = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?
            .channels;
        if parts.iter().any(|p| p.channels != channels) {
            return Err(Error::Shape("channel count differs between parts".into()));
        }
        let layers = parts.iter().map(|p| p.layers).sum();
        let data = parts.iter().flat_map(|p| p.data.iter().copied()).collect();
        Ok(Self {
            layers,
            channels,
            data,
        })
    }
}

/// Ordered frames of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence<T> {
    frames: Vec<LatentCode<T>>,
    /// Metadata only; not stored in `.sglat` files.
    pub frame_rate: Option<f64>,
}

impl<T: Scalar> LatentSequence<T> {
    pub fn new(frames: Vec<LatentCode<T>>) -> Result<Self> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Shape("latent sequence is empty".into()))?;
        let shape = first.shape();
        if let Some(i) = frames.iter().position(|f| f.shape() != shape) {
            return Err(Error::Shape(format!(
                "frame {i} has shape {:?}, expected {shape:?}",
                frames[i].shape()
            )));
        }
        Ok(Self {
            frames,
            frame_rate: None,
        })
    }

    pub fn frames(&self) -> &[LatentCode<T>] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<LatentCode<T>> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }
}

/// Contiguous partition of the latent layers into stages, plus the per-layer
/// distortion weights.
#[derive(Clone, Debug, PartialEq)]
pub struct StageLayout {
    stages: Vec<Range<usize>>,
    lambda_weights: Vec<f64>,
}

impl StageLayout {
    pub fn new(stages: Vec<Range<usize>>, lambda_weights: Vec<f64>) -> Result<Self> {
        let layers = lambda_weights.len();
        validate_ranges(&stages, layers)?;
        if let Some(l) = lambda_weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Layout(format!(
                "lambda weight of layer {l} must be positive"
            )));
        }
        Ok(Self {
            stages,
            lambda_weights,
        })
    }

    /// Layout with the default weighting schedule: weight 1 on every layer of
    /// the first stage, then a linear decay reaching 0.01 at the last layer.
    pub fn with_schedule(stages: Vec<Range<usize>>) -> Result<Self> {
        let layers = stages.last().map(|r| r.end).unwrap_or(0);
        validate_ranges(&stages, layers)?;
        let anchor = stages[0].end - 1;
        let weights = (0..layers)
            .map(|l| {
                if l <= anchor || layers - 1 == anchor {
                    1.0
                } else {
                    1.0 - 0.99 * (l - anchor) as f64 / (layers - 1 - anchor) as f64
                }
            })
            .collect();
        Self::new(stages, weights)
    }

    /// One stage spanning all layers, unit weights.
    pub fn single(layers: usize) -> Self {
        Self::new(vec![0..layers], vec![1.0; layers]).expect("single stage is valid")
    }

    /// The three-stage split of the 18-layer latent: `[0,8) [8,13) [13,18)`.
    pub fn coarse_medium_fine() -> Self {
        Self::with_schedule(vec![0..8, 8..13, 13..18]).expect("static layout")
    }

    /// Uniform unit weights on an arbitrary partition.
    pub fn unweighted(stages: Vec<Range<usize>>) -> Result<Self> {
        let layers = stages.last().map(|r| r.end).unwrap_or(0);
        Self::new(stages, vec![1.0; layers])
    }

    pub fn stages(&self) -> &[Range<usize>] {
        &self.stages
    }

    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }

    pub fn layers(&self) -> usize {
        self.lambda_weights.len()
    }

    pub fn lambda_weights(&self) -> &[f64] {
        &self.lambda_weights
    }

    /// Checks that the layout covers a code with `layers` rows.
    pub fn check_layers(&self, layers: usize) -> Result<()> {
        if self.layers() != layers {
            return Err(Error::Layout(format!(
                "layout covers {} layers, latent has {layers}",
                self.layers()
            )));
        }
        Ok(())
    }
}

fn validate_ranges(stages: &[Range<usize>], layers: usize) -> Result<()> {
    if stages.is_empty() {
        return Err(Error::Layout("no stages".into()));
    }
    let mut next = 0;
    for (i, r) in stages.iter().enumerate() {
        if r.start != next {
            return Err(Error::Layout(format!(
                "stage {i} starts at layer {} but layer {next} is not covered",
                r.start
            )));
        }
        if r.end <= r.start {
            return Err(Error::Layout(format!("stage {i} is empty")));
        }
        next = r.end;
    }
    if next != layers {
        return Err(Error::Layout(format!(
            "stages end at layer {next}, latent has {layers} layers"
        )));
    }
    Ok(())
}

impl fmt::Display for StageLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .stages
            .iter()
            .map(|r| format!("{}-{}", r.start, r.end))
            .collect();
        f.write_str(&parts.join(","))
    }
}

/// Parses `"0-8,8-13,13-18"` into a layout with the default weight schedule.
impl FromStr for StageLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let stages = s
            .split(',')
            .map(|part| {
                let (a, b) = part
                    .trim()
                    .split_once('-')
                    .ok_or_else(|| Error::Layout(format!("bad stage range {part:?}")))?;
                let parse = |v: &str| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Layout(format!("bad layer index {v:?}")))
                };
                Ok(parse(a)?..parse(b)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::with_schedule(stages)
    }
}

/// Splits a code into per-stage sub-matrices.
pub fn stage_split<T: Scalar>(code: &LatentCode<T>, layout: &StageLayout) -> Result<Vec<LatentCode<T>>> {
    layout.check_layers(code.layers())?;
    let c = code.channels();
    Ok(layout
        .stages()
        .iter()
        .map(|r| LatentCode {
            layers: r.len(),
            channels: c,
            data: code.data[r.start * c..r.end * c].to_vec(),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FrameKind {
    Intra,
    Diff,
    Residual,
}

/// Integer symbols of one coded frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedFrame {
    pub layers: usize,
    pub channels: usize,
    pub symbols: Vec<i32>,
    pub kind: FrameKind,
}

const LATENT_MAGIC: &[u8; 4] = b"SGLC";
pub const LATENT_VERSION: u16 = 1;

/// Serializes a sequence to `.sglat` bytes (values stored as f32).
pub fn encode_latents<T: Scalar>(seq: &LatentSequence<T>) -> Result<Vec<u8>> {
    let (layers, channels) = seq.shape();
    let mut w = Writer::new();
    w.bytes(LATENT_MAGIC);
    w.u16(LATENT_VERSION);
    w.dim16(layers, "layers")?;
    w.dim16(channels, "channels")?;
    w.dim32(seq.len(), "frame count")?;
    for frame in seq.frames() {
        for v in frame.as_slice() {
            w.f32(v.as_f64() as f32);
        }
    }
    Ok(w.buf)
}

pub fn decode_latents<T: Scalar>(bytes: &[u8]) -> Result<LatentSequence<T>> {
    let mut r = Reader::new(bytes);
    r.magic(LATENT_MAGIC)?;
    let version = r.u16()?;
    if version != LATENT_VERSION {
        return Err(Error::UnsupportedVersion {
            what: "latent file",
            found: version,
            expected: LATENT_VERSION,
        });
    }
    let dims_at = r.offset();
    let layers = r.u16()? as usize;
    let channels = r.u16()? as usize;
    let count = r.u32()? as usize;
    if layers == 0 || channels == 0 || count == 0 {
        return Err(Error::format(
            dims_at,
            format!("degenerate shape {layers}x{channels} with {count} frames"),
        ));
    }
    let per_frame = layers * channels;
    let expected = count * per_frame * 4;
    if r.remaining() != expected {
        return Err(Error::format(
            r.offset(),
            format!(
                "payload is {} bytes, header implies {expected}",
                r.remaining()
            ),
        ));
    }
    let mut frames = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let data = (0..per_frame)
            .map(|_| r.f32().map(|v| T::of(v as f64)))
            .collect::<Result<Vec<T>>>()?;
        frames.push(
            LatentCode::new(layers, channels, data).map_err(|e| Error::format(at, e.to_string()))?,
        );
    }
    LatentSequence::new(frames)
}

pub fn write_latents<T: Scalar>(seq: &LatentSequence<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_latents(seq)?)?;
    Ok(())
}

pub fn read_latents<T: Scalar>(path: impl AsRef<Path>) -> Result<LatentSequence<T>> {
    decode_latents(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(layers: usize, channels: usize, offset: f64) -> LatentCode<f64> {
        let data = (0..layers * channels).map(|i| i as f64 * 0.25 - offset).collect();
        LatentCode::new(layers, channels, data).unwrap()
    }

    #[test]
    fn coarse_medium_fine_split_sizes() {
        let code = ramp(18, 512, 3.0);
        let parts = stage_split(&code, &StageLayout::coarse_medium_fine()).unwrap();
        let sizes: Vec<_> = parts.iter().map(|p| p.shape()).collect();
        assert_eq!(sizes, vec![(8, 512), (5, 512), (5, 512)]);
        assert_eq!(LatentCode::concat(&parts).unwrap(), code);
    }

    #[test]
    fn single_stage_is_identity() {
        let code = ramp(18, 512, 0.0);
        let parts = stage_split(&code, &StageLayout::single(18)).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0], code);
    }

    #[test]
    fn gap_in_layout_rejected() {
        let err = StageLayout::unweighted(vec![0..8, 9..13]).unwrap_err();
        assert!(matches!(err, Error::Layout(_)), "{err}");
        assert!("0-8,9-13".parse::<StageLayout>().is_err());
    }

    #[test]
    fn layout_must_match_code() {
        let code = ramp(4, 8, 0.0);
        assert!(stage_split(&code, &StageLayout::coarse_medium_fine()).is_err());
    }

    #[test]
    fn schedule_is_flat_then_linear() {
        let l = StageLayout::coarse_medium_fine();
        let w = l.lambda_weights();
        assert!(w[..8].iter().all(|&v| v == 1.0));
        assert!((w[17] - 0.01).abs() < 1e-12);
        for pair in w[7..].windows(2) {
            assert!(pair[1] < pair[0]);
        }
        // equal steps after the first stage
        let step = w[8] - w[9];
        for pair in w[8..].windows(2) {
            assert!(((pair[0] - pair[1]) - step).abs() < 1e-12);
        }
        assert_eq!(l.to_string(), "0-8,8-13,13-18");
        assert_eq!("0-8,8-13,13-18".parse::<StageLayout>().unwrap(), l);
    }

    #[test]
    fn file_roundtrip() {
        for (layers, channels, n) in [(18, 512, 3), (4, 32, 2)] {
            let seq = LatentSequence::new((0..n).map(|i| ramp(layers, channels, i as f64)).collect()).unwrap();
            let bytes = encode_latents(&seq).unwrap();
            let back: LatentSequence<f64> = decode_latents(&bytes).unwrap();
            assert_eq!(back, seq);
            assert_eq!(encode_latents(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn unsupported_version() {
        let seq = LatentSequence::new(vec![ramp(2, 2, 0.0)]).unwrap();
        let mut bytes = encode_latents(&seq).unwrap();
        bytes[4..6].copy_from_slice(&99u16.to_le_bytes());
        let err = decode_latents::<f64>(&bytes).unwrap_err();
        assert!(matches!(err, Error::UnsupportedVersion { found: 99, .. }), "{err}");
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let seq = LatentSequence::new(vec![ramp(2, 2, 0.0)]).unwrap();
        let bytes = encode_latents(&seq).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_latents::<f64>(&bad), Err(Error::Format { offset: 0, .. })));
        let err = decode_latents::<f64>(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 14, .. }), "{err}");
    }

    #[test]
    fn inhomogeneous_sequence_rejected() {
        assert!(LatentSequence::new(vec![ramp(2, 2, 0.0), ramp(2, 3, 0.0)]).is_err());
        assert!(LatentSequence::<f64>::new(vec![]).is_err());
    }

    #[test]
    fn non_finite_rejected() {
        assert!(LatentCode::new(1, 2, vec![0.0, f64::NAN]).is_err());
    }
}
