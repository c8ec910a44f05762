//! Clip sampling: split a video into S temporal parts and draw one k-frame
//! clip per part, either spread uniformly across the part or as a run of
//! consecutive frames with a fixed offset.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;

/// One video: ordered frame tensors of shape [channels, height, width].
#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frames: Vec<Tensor>,
    pub label: usize,
}

impl VideoSample {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frame_shape(&self) -> &[usize] {
        self.frames[0].shape()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    UniformSpread,
    Consecutive,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::UniformSpread => "uniform-spread",
            Strategy::Consecutive => "consecutive",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    /// S: temporal parts per video.
    pub parts: usize,
    /// k: frames per clip.
    pub frames_per_clip: usize,
    /// o: spacing between consecutive-strategy frames.
    pub offset: usize,
    pub strategy: Strategy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            parts: 3,
            frames_per_clip: 8,
            offset: 2,
            strategy: Strategy::UniformSpread,
        }
    }
}

impl SamplerConfig {
    /// Minimum frame count a video must have under this config.
    pub fn min_frames(&self) -> usize {
        match self.strategy {
            Strategy::UniformSpread => self.parts * self.frames_per_clip,
            Strategy::Consecutive => self.parts * (self.frames_per_clip * self.offset + 1),
        }
    }
}

/// Random draws come from a seeded rng; `Center` replaces every draw by the
/// midpoint of its valid range so evaluation is reproducible.
pub enum Draw<'a> {
    Random(&'a mut ChaCha8Rng),
    Center,
}

impl Draw<'_> {
    fn pick(&mut self, range_len: usize) -> usize {
        debug_assert!(range_len > 0);
        match self {
            Draw::Random(rng) => rng.random_range(0..range_len),
            Draw::Center => range_len / 2,
        }
    }
}

/// Split `frame_count` frames into S contiguous equal parts of
/// M = floor(frame_count / S) frames; trailing remainder frames are unused.
pub fn segment_video(frame_count: usize, cfg: &SamplerConfig) -> Result<Vec<Range<usize>>> {
    let required = cfg.min_frames();
    if frame_count < required {
        return Err(Error::VideoTooShort {
            frames: frame_count,
            required,
        });
    }
    let part_len = frame_count / cfg.parts;
    Ok((0..cfg.parts)
        .map(|i| i * part_len..(i + 1) * part_len)
        .collect())
}

/// Strategy 1: split the part into k equal sub-fragments of
/// floor(M/k) frames and draw one frame uniformly from each.
pub fn sample_uniform_spread(part: Range<usize>, frames_per_clip: usize, draw: &mut Draw) -> Result<Vec<usize>> {
    let part_len = part.len();
    let step = part_len / frames_per_clip;
    if step == 0 {
        return Err(Error::SegmentTooShort {
            len: part_len,
            needed: frames_per_clip,
            strategy: "uniform-spread",
        });
    }
    Ok((0..frames_per_clip)
        .map(|i| part.start + step * i + draw.pick(step))
        .collect())
}

/// Strategy 2: one uniform start in [0, M - k*o), then k frames spaced
/// exactly o apart.
pub fn sample_consecutive(
    part: Range<usize>,
    frames_per_clip: usize,
    offset: usize,
    draw: &mut Draw,
) -> Result<Vec<usize>> {
    let part_len = part.len();
    let span = frames_per_clip * offset;
    if part_len <= span {
        return Err(Error::SegmentTooShort {
            len: part_len,
            needed: span + 1,
            strategy: "consecutive",
        });
    }
    let start = part.start + draw.pick(part_len - span);
    Ok((0..frames_per_clip).map(|i| start + i * offset).collect())
}

fn sample_part(part: Range<usize>, cfg: &SamplerConfig, draw: &mut Draw) -> Result<Vec<usize>> {
    match cfg.strategy {
        Strategy::UniformSpread => sample_uniform_spread(part, cfg.frames_per_clip, draw),
        Strategy::Consecutive => {
            sample_consecutive(part, cfg.frames_per_clip, cfg.offset, draw)
        }
    }
}

/// S clips of k frame indices each plus the gathered clip tensors of shape
/// [channels, k, height, width].
#[derive(Debug, Clone)]
pub struct ClipSet {
    pub indices: Vec<Vec<usize>>,
    pub tensors: Vec<Tensor>,
}

/// Stack the frames at `indices` into a [channels, k, height, width] tensor.
pub fn gather_clip(video: &VideoSample, indices: &[usize]) -> Tensor {
    let shape = video.frame_shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = indices.len();
    let plane = h * w;
    let mut data = vec![0.0; c * k * plane];
    for (t, &fi) in indices.iter().enumerate() {
        let frame = video.frames[fi].data();
        for ch in 0..c {
            let src = &frame[ch * plane..(ch + 1) * plane];
            let dst_base = (ch * k + t) * plane;
            data[dst_base..dst_base + plane].copy_from_slice(src);
        }
    }
    Tensor::new(vec![c, k, h, w], data).expect("clip shape")
}

pub fn assemble_clips(video: &VideoSample, cfg: &SamplerConfig, draw: &mut Draw) -> Result<ClipSet> {
    let parts = segment_video(video.frame_count(), cfg)?;
    let mut indices = Vec::with_capacity(parts.len());
    for part in parts {
        indices.push(sample_part(part, cfg, draw)?);
    }
    let tensors = indices.iter().map(|idx| gather_clip(video, idx)).collect();
    Ok(ClipSet { indices, tensors })
}

/// Every non-overlapping k-frame window, for all-clips evaluation.
pub fn tile_windows(frame_count: usize, frames_per_clip: usize) -> Vec<Vec<usize>> {
    let count = frame_count / frames_per_clip;
    (0..count)
        .map(|w| (w * frames_per_clip..(w + 1) * frames_per_clip).collect())
        .collect()
}
