use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{DynamicImage, GrayImage, RgbImage};
use ndarray::{s, Array4, ArrayView3};

use crate::{Error, Result};

/// Decoded video: a `T × H × W × C` stack of 8-bit frames.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub video_id: String,
    pub frames: Array4<u8>,
    pub fps: f64,
}

pub const MIN_EDGE: usize = 32;

impl FrameSequence {
    pub fn new(video_id: impl Into<String>, frames: Array4<u8>, fps: f64) -> Result<Self> {
        let video_id = video_id.into();
        let (t, h, w, c) = frames.dim();
        if t == 0 {
            return Err(Error::NoFrames { uri: video_id });
        }
        if h < MIN_EDGE || w < MIN_EDGE {
            return Err(Error::Shape(format!(
                "video {video_id}: frames are {h}x{w}, need at least {MIN_EDGE}x{MIN_EDGE}"
            )));
        }
        if c != 1 && c != 3 {
            return Err(Error::Shape(format!(
                "video {video_id}: {c} channels, expected 1 or 3"
            )));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("video {video_id}: fps {fps}")));
        }
        Ok(Self {
            video_id,
            frames,
            fps,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn height(&self) -> usize {
        self.frames.dim().1
    }

    pub fn width(&self) -> usize {
        self.frames.dim().2
    }

    pub fn channels(&self) -> usize {
        self.frames.dim().3
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, u8> {
        self.frames.slice(s![t, .., .., ..])
    }

    /// New sequence made of the frames at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> FrameSequence {
        let (_, h, w, c) = self.frames.dim();
        let mut out = Array4::zeros((indices.len(), h, w, c));
        for (dst, &src) in indices.iter().enumerate() {
            out.slice_mut(s![dst, .., .., ..]).assign(&self.frame(src));
        }
        FrameSequence {
            video_id: self.video_id.clone(),
            frames: out,
            fps: self.fps,
        }
    }
}

/// Source of decoded frames.
pub trait VideoDecoder: Send + Sync {
    fn decode(&self, uri: &str, video_id: &str) -> Result<FrameSequence>;
}

/// Lossless decoder for a directory of numbered image frames
/// (`frame_0000.png`, `0001.ppm`, ...). Numbering must be contiguous.
#[derive(Clone, Debug)]
pub struct FrameDirDecoder {
    pub fps: f64,
}

impl Default for FrameDirDecoder {
    fn default() -> Self {
        Self { fps: 24.0 }
    }
}

const FRAME_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

fn frame_index(stem: &str) -> Option<u64> {
    let digits: String = stem
        .chars()
        .rev()
        .take_while(char::is_ascii_digit)
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    digits.parse().ok()
}

impl VideoDecoder for FrameDirDecoder {
    fn decode(&self, uri: &str, video_id: &str) -> Result<FrameSequence> {
        let dir = Path::new(uri);
        let decode_err = |message: String| Error::Decode {
            uri: uri.to_string(),
            message,
        };
        let entries = fs::read_dir(dir).map_err(|e| decode_err(e.to_string()))?;
        let mut by_index = BTreeMap::new();
        for entry in entries {
            let path = entry.map_err(|e| decode_err(e.to_string()))?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            if !ext.is_some_and(|e| FRAME_EXTENSIONS.contains(&e.as_str())) {
                continue;
            }
            let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
            let Some(index) = frame_index(stem) else {
                return Err(decode_err(format!("frame {} has no number", path.display())));
            };
            if let Some(prev) = by_index.insert(index, path.clone()) {
                return Err(decode_err(format!(
                    "frames {} and {} share index {index}",
                    prev.display(),
                    path.display()
                )));
            }
        }
        let (Some(&first), Some(&last)) = (by_index.keys().next(), by_index.keys().next_back())
        else {
            return Err(Error::NoFrames {
                uri: uri.to_string(),
            });
        };
        let missing: Vec<u64> = (first..=last).filter(|i| !by_index.contains_key(i)).collect();
        if !missing.is_empty() {
            return Err(Error::MissingFrames {
                uri: uri.to_string(),
                missing,
            });
        }

        let mut frames: Option<Array4<u8>> = None;
        for (t, path) in by_index.values().enumerate() {
            let img = image::open(path).map_err(|e| decode_err(format!("{}: {e}", path.display())))?;
            let (w, h) = (img.width() as usize, img.height() as usize);
            let (c, raw) = match img {
                DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
                DynamicImage::ImageRgb8(rgb) => (3, rgb.into_raw()),
                other => (3, other.to_rgb8().into_raw()),
            };
            let stack = frames.get_or_insert_with(|| Array4::zeros((by_index.len(), h, w, c)));
            let (_, eh, ew, ec) = stack.dim();
            if (eh, ew, ec) != (h, w, c) {
                return Err(decode_err(format!(
                    "{} is {h}x{w}x{c}, earlier frames are {eh}x{ew}x{ec}",
                    path.display()
                )));
            }
            let view = ArrayView3::from_shape((h, w, c), &raw).expect("image buffer layout");
            stack.slice_mut(s![t, .., .., ..]).assign(&view);
        }
        FrameSequence::new(video_id, frames.expect("at least one frame"), self.fps)
    }
}

/// Writes every frame as `frame_NNNNN.png`; lossless for 1- and 3-channel input.
pub fn write_frame_dir(seq: &FrameSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (_, h, w, c) = seq.frames.dim();
    for t in 0..seq.len() {
        let raw: Vec<u8> = seq.frame(t).iter().copied().collect();
        let path = dir.join(format!("frame_{t:05}.png"));
        let res = if c == 1 {
            GrayImage::from_raw(w as u32, h as u32, raw).map(|g| g.save(&path))
        } else {
            RgbImage::from_raw(w as u32, h as u32, raw).map(|g| g.save(&path))
        };
        res.expect("frame buffer matches dimensions")
            .map_err(|e| Error::Decode {
                uri: path.to_string_lossy().into_owned(),
                message: e.to_string(),
            })?;
    }
    Ok(())
}
