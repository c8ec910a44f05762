//! Synthetic long-term-motion dataset: a bright blob on a dark field whose
//! class is the *order* of two sub-motions, so any single short clip is
//! ambiguous between the pair that shares its local motion. Plus the raw
//! little-endian file format the CLI reads and writes.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::sampler::VideoSample;
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::io::Read;
use std::path::Path;

#[derive(Debug, Clone)]
pub struct Dataset {
    pub videos: Vec<VideoSample>,
    pub class_count: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct GenConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            classes: 4,
            train_per_class: 25,
            test_per_class: 10,
            frames: 48,
            height: 32,
            width: 32,
            seed: 7,
        }
    }
}

// (dx, dy) unit steps: right, up, left, down
const DIRECTIONS: [(f64, f64); 4] = [(1.0, 0.0), (0.0, -1.0), (-1.0, 0.0), (0.0, 1.0)];

/// Ordered sub-motion pairs; adjacent entries are reverses of each other so
/// classes 2j and 2j+1 share the same local-motion set and differ only in
/// order.
const CLASS_MOTIONS: [(usize, usize); 8] = [
    (0, 1), // right then up
    (1, 0), // up then right
    (2, 3), // left then down
    (3, 2), // down then left
    (0, 3), // right then down
    (3, 0), // down then right
    (2, 1), // left then up
    (1, 2), // up then left
];

fn render_frame(height: usize, width: usize, cx: f64, cy: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let sigma2 = 2.0 * 2.0f64 * 2.0; // 2 * sigma^2 with sigma = 2
    let mut data = Vec::with_capacity(height * width);
    for y in 0..height {
        for x in 0..width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let blob = (-(dx * dx + dy * dy) / sigma2).exp();
            let noise = (rng.random::<f64>() - 0.5) * 0.04;
            data.push(blob + noise);
        }
    }
    // standardize per frame so the network sees unit-scale inputs
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt() + 1e-6;
    for v in &mut data {
        // quantize through f32 so in-memory data matches file roundtrips
        *v = (((*v - mean) / std) as f32) as f64;
    }
    Tensor::new(vec![1, height, width], data).expect("frame shape")
}

fn generate_video(class: usize, cfg: &GenConfig, rng: &mut ChaCha8Rng) -> VideoSample {
    let (first, second) = CLASS_MOTIONS[class];
    let d1 = DIRECTIONS[first];
    let d2 = DIRECTIONS[second];

    // phase boundary near the middle, nudged off multiples of the default
    // clip length so tiled windows straddle it
    let lo = (cfg.frames as f64 * 0.42) as usize;
    let hi = (cfg.frames as f64 * 0.58) as usize;
    let mut boundary = rng.random_range(lo..=hi.max(lo));
    if boundary % 8 == 0 {
        boundary += 1;
    }

    let span = cfg.width.min(cfg.height) as f64;
    let dist1 = span * (0.35 + 0.10 * rng.random::<f64>());
    let dist2 = span * (0.35 + 0.10 * rng.random::<f64>());
    let leg1 = (d1.0 * dist1, d1.1 * dist1);
    let leg2 = (d2.0 * dist2, d2.1 * dist2);

    // keep the whole path inside a margin
    let margin = 4.0;
    let offs_x = [0.0, leg1.0, leg1.0 + leg2.0];
    let offs_y = [0.0, leg1.1, leg1.1 + leg2.1];
    let min_x = offs_x.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_x = offs_x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_y = offs_y.iter().cloned().fold(f64::INFINITY, f64::min);
    let max_y = offs_y.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lo_x = margin - min_x;
    let hi_x = (cfg.width as f64 - 1.0 - margin) - max_x;
    let lo_y = margin - min_y;
    let hi_y = (cfg.height as f64 - 1.0 - margin) - max_y;
    let start_x = lo_x + (hi_x - lo_x).max(0.0) * rng.random::<f64>();
    let start_y = lo_y + (hi_y - lo_y).max(0.0) * rng.random::<f64>();

    let phase2_len = (cfg.frames - boundary).max(1);
    let frames = (0..cfg.frames)
        .map(|t| {
            let (cx, cy) = if t < boundary {
                let p = t as f64 / boundary as f64;
                (start_x + leg1.0 * p, start_y + leg1.1 * p)
            } else {
                let p = (t - boundary) as f64 / phase2_len as f64;
                (start_x + leg1.0 + leg2.0 * p, start_y + leg1.1 + leg2.1 * p)
            };
            render_frame(cfg.height, cfg.width, cx, cy, rng)
        })
        .collect();
    VideoSample { frames, label: class }
}

/// Deterministic per seed; returns (train, test) splits with balanced
/// per-class counts.
pub fn generate_synthetic(cfg: &GenConfig) -> (Dataset, Dataset) {
    assert!(
        (2..=CLASS_MOTIONS.len()).contains(&cfg.classes),
        "classes must be in 2..=8"
    );
    let make = |split_tag: u64, per_class: usize| -> Dataset {
        let mut videos = Vec::with_capacity(cfg.classes * per_class);
        for class in 0..cfg.classes {
            for idx in 0..per_class {
                let seed = derive_seed(cfg.seed, &[split_tag, class as u64, idx as u64]);
                videos.push(generate_video(class, cfg, &mut rng_from(seed)));
            }
        }
        Dataset { videos, class_count: cfg.classes }
    };
    (make(1, cfg.train_per_class), make(2, cfg.test_per_class))
}

const DATASET_MAGIC: &[u8; 4] = b"TCDS";
const DATASET_VERSION: u16 = 1;

/// Header (counts, shapes, dtype fp32), contiguous frame tensors, then the
/// label table. Everything little-endian.
pub fn write_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    buf.extend_from_slice(&(dataset.class_count as u32).to_le_bytes());
    buf.extend_from_slice(&(dataset.videos.len() as u32).to_le_bytes());
    let shape = if dataset.videos.is_empty() {
        vec![0, 0, 0]
    } else {
        dataset.videos[0].frame_shape().to_vec()
    };
    for dim in &shape {
        buf.extend_from_slice(&(*dim as u32).to_le_bytes());
    }
    for video in &dataset.videos {
        buf.extend_from_slice(&(video.frame_count() as u32).to_le_bytes());
    }
    for video in &dataset.videos {
        for frame in &video.frames {
            if frame.shape() != shape {
                return Err(Error::ShapeMismatch {
                    context: "dataset frames must share one shape",
                    expected: shape.clone(),
                    got: frame.shape().to_vec(),
                });
            }
            for &v in frame.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    for video in &dataset.videos {
        buf.extend_from_slice(&(video.label as u32).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

fn read_u16(r: &mut impl Read) -> Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadContainer(format!(
            "bad dataset magic {magic:?} in {}",
            path.display()
        )));
    }
    let version = read_u16(&mut r)?;
    if version != DATASET_VERSION {
        return Err(Error::BadContainer(format!("unsupported dataset version {version}")));
    }
    let class_count = read_u32(&mut r)? as usize;
    let video_count = read_u32(&mut r)? as usize;
    let channels = read_u32(&mut r)? as usize;
    let height = read_u32(&mut r)? as usize;
    let width = read_u32(&mut r)? as usize;
    let mut frame_counts = Vec::with_capacity(video_count);
    for _ in 0..video_count {
        frame_counts.push(read_u32(&mut r)? as usize);
    }
    let plane = channels * height * width;
    let mut videos = Vec::with_capacity(video_count);
    for &count in &frame_counts {
        let mut frames = Vec::with_capacity(count);
        for _ in 0..count {
            let mut data = Vec::with_capacity(plane);
            for _ in 0..plane {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)?;
                data.push(f32::from_le_bytes(b) as f64);
            }
            frames.push(Tensor::new(vec![channels, height, width], data)?);
        }
        videos.push(VideoSample { frames, label: 0 });
    }
    for video in &mut videos {
        let label = read_u32(&mut r)? as usize;
        if label >= class_count {
            return Err(Error::BadContainer(format!(
                "label {label} out of range for {class_count} classes"
            )));
        }
        video.label = label;
    }
    Ok(Dataset { videos, class_count })
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn balanced_and_sized_by_construction() {
        let cfg = GenConfig {
            classes: 4,
            train_per_class: 50,
            test_per_class: 5,
            frames: 48,
            height: 16,
            width: 16,
            seed: 7,
        };
        let (train, test) = generate_synthetic(&cfg);
        assert_eq!(train.videos.len(), 200);
        assert_eq!(test.videos.len(), 20);
        for class in 0..4 {
            let count = train.videos.iter().filter(|v| v.label == class).count();
            assert_eq!(count, 50);
        }
        for video in &train.videos {
            assert_eq!(video.frame_count(), 48);
            assert!(video.frame_count() >= 3 * 8 * 2);
        }
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let cfg = GenConfig {
            train_per_class: 2,
            test_per_class: 1,
            height: 12,
            width: 12,
            ..GenConfig::default()
        };
        let (a, _) = generate_synthetic(&cfg);
        let (b, _) = generate_synthetic(&cfg);
        for (x, y) in a.videos.iter().zip(b.videos.iter()) {
            for (fx, fy) in x.frames.iter().zip(y.frames.iter()) {
                assert_eq!(fx.data(), fy.data());
            }
        }
    }

    #[test]
    fn file_roundtrip_preserves_everything() {
        let cfg = GenConfig {
            train_per_class: 2,
            test_per_class: 1,
            height: 10,
            width: 10,
            frames: 48,
            ..GenConfig::default()
        };
        let (train, _) = generate_synthetic(&cfg);
        let dir = tempdir().unwrap();
        let path = dir.path().join("train.tcd");
        write_dataset(&path, &train).unwrap();
        let loaded = read_dataset(&path).unwrap();
        assert_eq!(loaded.class_count, train.class_count);
        assert_eq!(loaded.videos.len(), train.videos.len());
        for (a, b) in loaded.videos.iter().zip(train.videos.iter()) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.frame_count(), b.frame_count());
            for (fa, fb) in a.frames.iter().zip(b.frames.iter()) {
                assert_eq!(fa.data(), fb.data());
            }
        }
    }

    #[test]
    fn written_files_are_byte_identical_per_seed() {
        let cfg = GenConfig {
            train_per_class: 1,
            test_per_class: 1,
            height: 8,
            width: 8,
            ..GenConfig::default()
        };
        let dir = tempdir().unwrap();
        let (train_a, _) = generate_synthetic(&cfg);
        let (train_b, _) = generate_synthetic(&cfg);
        let path_a = dir.path().join("a.tcd");
        let path_b = dir.path().join("b.tcd");
        write_dataset(&path_a, &train_a).unwrap();
        write_dataset(&path_b, &train_b).unwrap();
        assert_eq!(std::fs::read(path_a).unwrap(), std::fs::read(path_b).unwrap());
    }

    #[test]
    fn frames_are_standardized() {
        let cfg = GenConfig {
            train_per_class: 1,
            test_per_class: 1,
            ..GenConfig::default()
        };
        let (train, _) = generate_synthetic(&cfg);
        for video in &train.videos {
            for frame in &video.frames {
                assert!(frame.all_finite());
                let n = frame.len() as f64;
                let mean = frame.data().iter().sum::<f64>() / n;
                let var = frame.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                assert!(mean.abs() < 1e-3);
                assert!((var.sqrt() - 1.0).abs() < 1e-3);
            }
        }
    }
}
