//! Latent sequences, padded batches, generation-length allocation and
//! silence padding.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

/// 44100 Hz audio downsampled 4096×.
pub const DEFAULT_FRAME_RATE_HZ: f64 = 44100.0 / 4096.0;
pub const DEFAULT_SAMPLE_RATE: u32 = 44100;
pub const DEFAULT_DOWNSAMPLE_RATIO: u32 = 4096;

/// A variable-length sequence of `C`-wide latent frames.
///
/// Frames are stored frame-major (`L × C`, one row per frame), which is the
/// layout the model consumes. [`LatentSequence::from_channel_major`] and
/// [`LatentSequence::to_channel_major`] convert to and from the `C × L`
/// layout used on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentSequence {
    frames: Tensor<f32>,
    pub frame_rate_hz: f64,
}

impl LatentSequence {
    /// `frames` is `L × C`.
    pub fn new(frames: Tensor<f32>) -> Result<Self> {
        if frames.rows() == 0 {
            bail!(Empty, "latent sequence needs at least one frame");
        }
        if frames.cols() == 0 {
            bail!(Shape, "latent sequence needs at least one channel");
        }
        if !frames.all_finite() {
            bail!(NonFinite, "latent frames");
        }
        Ok(Self { frames, frame_rate_hz: DEFAULT_FRAME_RATE_HZ })
    }

    pub fn from_channel_major(channels: usize, len: usize, data: &[f32]) -> Result<Self> {
        if data.len() != channels * len {
            bail!(Shape, "expected {}·{} values, got {}", channels, len, data.len());
        }
        Self::new(Tensor::from_fn(len, channels, |j, c| data[c * len + j]))
    }

    pub fn to_channel_major(&self) -> Vec<f32> {
        let (l, c) = self.frames.shape();
        let mut out = vec![0.0; l * c];
        for j in 0..l {
            for (ch, &v) in self.frames.row(j).iter().enumerate() {
                out[ch * l + j] = v;
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn channels(&self) -> usize {
        self.frames.cols()
    }

    /// `L × C` frames.
    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn frame(&self, j: usize) -> &[f32] {
        self.frames.row(j)
    }

    /// Value of channel `c` at frame `j`.
    pub fn get(&self, c: usize, j: usize) -> f32 {
        self.frames.get(j, c)
    }

    pub fn into_frames(self) -> Tensor<f32> {
        self.frames
    }
}

/// A prompt and its latent, the unit of every dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub latent: LatentSequence,
}

/// Right-padded stack of sequences. `data` is `(B·L_max) × C` with item `b`
/// occupying rows `b·L_max .. (b+1)·L_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedBatch {
    pub data: Tensor<f32>,
    pub valid_len: Vec<usize>,
    pub max_len: usize,
}

impl PaddedBatch {
    /// Builds a batch from raw storage, zeroing anything beyond `valid_len`.
    pub fn from_parts(mut data: Tensor<f32>, valid_len: Vec<usize>, max_len: usize) -> Result<Self> {
        if data.rows() != valid_len.len() * max_len {
            bail!(Shape, "batch storage has {} rows, expected {}", data.rows(), valid_len.len() * max_len);
        }
        if let Some(&bad) = valid_len.iter().find(|&&v| v > max_len) {
            bail!(InvalidArgument, "valid length {bad} exceeds max length {max_len}");
        }
        for (b, &v) in valid_len.iter().enumerate() {
            for j in v..max_len {
                data.row_mut(b * max_len + j).iter_mut().for_each(|x| *x = 0.0);
            }
        }
        Ok(Self { data, valid_len, max_len })
    }

    pub fn batch_size(&self) -> usize {
        self.valid_len.len()
    }

    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    /// Flattened `B × L_max` mask, true iff `j < valid_len[b]`.
    pub fn validity_mask(&self) -> Vec<bool> {
        validity_mask(&self.valid_len, self.max_len)
    }

    pub fn is_valid(&self, b: usize, j: usize) -> bool {
        j < self.valid_len[b]
    }

    /// The unpadded item `b`.
    pub fn item(&self, b: usize) -> LatentSequence {
        let frames = self.data.slice_rows(b * self.max_len, self.valid_len[b]);
        LatentSequence { frames, frame_rate_hz: DEFAULT_FRAME_RATE_HZ }
    }

    pub fn items(&self) -> Vec<LatentSequence> {
        (0..self.batch_size()).map(|b| self.item(b)).collect()
    }

    pub fn total_valid(&self) -> usize {
        self.valid_len.iter().sum()
    }
}

pub fn validity_mask(valid_len: &[usize], max_len: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(valid_len.len() * max_len);
    for &v in valid_len {
        m.extend((0..max_len).map(|j| j < v));
    }
    m
}

/// Stacks sequences with zero right-padding to the longest length.
pub fn build_batch(items: &[LatentSequence]) -> Result<PaddedBatch> {
    build_batch_padded(items, 0)
}

/// Like [`build_batch`] but pads to at least `min_len` frames.
pub fn build_batch_padded(items: &[LatentSequence], min_len: usize) -> Result<PaddedBatch> {
    let Some(first) = items.first() else { bail!(Empty, "cannot batch an empty list") };
    let c = first.channels();
    if let Some(bad) = items.iter().find(|s| s.channels() != c) {
        bail!(Shape, "mixed channel counts {} and {}", c, bad.channels());
    }
    let max_len = items.iter().map(|s| s.len()).max().unwrap_or(0).max(min_len);
    let mut data = Tensor::zeros(items.len() * max_len, c);
    for (b, s) in items.iter().enumerate() {
        let start = b * max_len * c;
        data.data_mut()[start..start + s.len() * c].copy_from_slice(s.frames.data());
    }
    Ok(PaddedBatch { data, valid_len: items.iter().map(|s| s.len()).collect(), max_len })
}

/// Frame counts for a generation request.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationLength {
    pub requested_seconds: f64,
    pub silence_seconds: f64,
    pub sample_rate: u32,
    pub downsample_ratio: u32,
    /// Allocated frames, including the silence region.
    pub len: usize,
    /// Frames kept after trimming.
    pub len_eff: usize,
}

/// `ceil(x)` that ignores floating-point dust above an exact integer.
fn ceil_frames(x: f64) -> usize {
    let r = libm::round(x);
    if libm::fabs(x - r) < 1e-9 {
        r as usize
    } else {
        libm::ceil(x) as usize
    }
}

pub fn allocate_generation_length(d: f64, d_silence: f64, f_s: u32, r: u32) -> Result<GenerationLength> {
    if !(d > 0.0) || !d.is_finite() {
        bail!(InvalidArgument, "requested duration must be positive, got {d}");
    }
    if !(d_silence >= 0.0) || !d_silence.is_finite() {
        bail!(InvalidArgument, "silence duration must be non-negative, got {d_silence}");
    }
    if f_s == 0 || r == 0 {
        bail!(InvalidArgument, "sample rate and downsample ratio must be positive");
    }
    let per_frame = r as f64 / f_s as f64;
    Ok(GenerationLength {
        requested_seconds: d,
        silence_seconds: d_silence,
        sample_rate: f_s,
        downsample_ratio: r,
        len: ceil_frames((d + d_silence) / per_frame),
        len_eff: ceil_frames(d / per_frame),
    })
}

/// Appends `round(Exp(mean_seconds)·frame_rate)` copies of `silence`.
pub fn silence_augment(seq: &LatentSequence, rng: &mut Rng, mean_seconds: f64, silence: &[f32]) -> Result<LatentSequence> {
    if silence.len() != seq.channels() {
        bail!(Shape, "silence latent has {} channels, sequence has {}", silence.len(), seq.channels());
    }
    let k = libm::round(rng::exponential(rng, mean_seconds) * seq.frame_rate_hz) as usize;
    Ok(append_frames(seq, silence, k))
}

pub fn append_frames(seq: &LatentSequence, frame: &[f32], k: usize) -> LatentSequence {
    let (l, c) = seq.frames.shape();
    let mut data = Vec::with_capacity((l + k) * c);
    data.extend_from_slice(seq.frames.data());
    for _ in 0..k {
        data.extend_from_slice(frame);
    }
    LatentSequence { frames: Tensor::from_vec(l + k, c, data), frame_rate_hz: seq.frame_rate_hz }
}

/// The first `len_eff` frames.
pub fn trim(seq: &LatentSequence, len_eff: usize) -> Result<LatentSequence> {
    if len_eff == 0 {
        bail!(InvalidArgument, "cannot trim to zero frames");
    }
    if len_eff > seq.len() {
        bail!(InvalidArgument, "trim length {len_eff} exceeds sequence length {}", seq.len());
    }
    Ok(LatentSequence { frames: seq.frames.slice_rows(0, len_eff), frame_rate_hz: seq.frame_rate_hz })
}
