//! The three views of a video: uniformly spaced key frames, grid mini-patch
//! fragments and a slow/fast clip pair.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `SeedableRng::seed_from_u64`
//! (rand 0.9), and per-cell offsets are drawn with `Rng::random_range` in
//! row-major cell order, top offset before left offset.

use ndarray::{s, Array4};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::media_io::FrameSequence;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingSpec {
    /// Cells per side of the mini-patch grid.
    pub grid_size: usize,
    /// Side of the assembled fragment frame in pixels.
    pub fragment_edge: usize,
    pub seed: u64,
    /// Slow-path frame count.
    pub clip_length: usize,
    /// Fast-path rate multiplier.
    pub alpha: usize,
    pub semantic_frame_count: usize,
    /// Frames taken (uniformly) from the video before fragment sampling.
    pub technical_frames: usize,
}

impl Default for SamplingSpec {
    fn default() -> Self {
        Self {
            grid_size: 32,
            fragment_edge: 224,
            seed: 0,
            clip_length: 8,
            alpha: 4,
            semantic_frame_count: 8,
            technical_frames: 16,
        }
    }
}

impl SamplingSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.grid_size == 0 || !self.fragment_edge.is_multiple_of(self.grid_size) {
            return bad(format!(
                "fragment_edge {} must be a positive multiple of grid_size {}",
                self.fragment_edge, self.grid_size
            ));
        }
        if self.fragment_edge == 0 {
            return bad("fragment_edge must be positive".into());
        }
        if self.alpha == 0 || self.clip_length == 0 {
            return bad("alpha and clip_length must be at least 1".into());
        }
        if self.semantic_frame_count == 0 || self.technical_frames == 0 {
            return bad("frame counts must be at least 1".into());
        }
        Ok(())
    }

    pub fn patch_edge(&self) -> usize {
        self.fragment_edge / self.grid_size
    }

    pub fn fast_length(&self) -> usize {
        self.alpha * self.clip_length
    }
}

/// Indices `round(k·(T−1)/(count−1))` for `k = 0..count`, or `[0]` when
/// `count == 1`. Halves round up; repeats appear when `count > T`.
pub fn uniform_indices(total: usize, count: usize) -> Vec<usize> {
    assert!(total >= 1 && count >= 1, "uniform_indices needs total, count >= 1");
    if count == 1 {
        return vec![0];
    }
    let (span, steps) = (total - 1, count - 1);
    (0..count)
        .map(|k| (2 * k * span + steps) / (2 * steps))
        .collect()
}

pub fn uniform_frame_sample(video: &FrameSequence, count: usize) -> FrameSequence {
    video.select(&uniform_indices(video.len(), count))
}

/// Source rectangle of one fragment cell, identical for every frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellSource {
    pub grid_row: usize,
    pub grid_col: usize,
    pub y: usize,
    pub x: usize,
    pub edge: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FragmentVideo {
    pub video_id: String,
    pub frames: Array4<u8>,
    /// Row-major over the grid.
    pub provenance: Vec<CellSource>,
    pub patch_edge: usize,
}

impl FragmentVideo {
    pub fn len(&self) -> usize {
        self.frames.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn boundaries(extent: usize, cells: usize) -> Vec<usize> {
    (0..=cells).map(|i| i * extent / cells).collect()
}

/// Grid mini-patch sampling over every frame of `video`.
///
/// Cell boundaries fall at `floor(i·H/G)`; one `patch_edge²` patch is drawn
/// uniformly from inside each cell and the same offsets are used for all frames.
pub fn grid_minipatch_sample(video: &FrameSequence, spec: &SamplingSpec) -> Result<FragmentVideo> {
    spec.validate()?;
    let (t, h, w, c) = video.frames.dim();
    let g = spec.grid_size;
    let pe = spec.patch_edge();
    if h < g * pe || w < g * pe {
        return Err(Error::Shape(format!(
            "video {} is {h}x{w}, grid mini-patch sampling needs at least {min}x{min}",
            video.video_id,
            min = g * pe
        )));
    }
    let rows = boundaries(h, g);
    let cols = boundaries(w, g);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut provenance = Vec::with_capacity(g * g);
    for i in 0..g {
        for j in 0..g {
            let (y0, y1) = (rows[i], rows[i + 1]);
            let (x0, x1) = (cols[j], cols[j + 1]);
            if y1 - y0 < pe || x1 - x0 < pe {
                return Err(Error::Shape(format!(
                    "cell ({i},{j}) is {}x{}, smaller than the {pe}px patch",
                    y1 - y0,
                    x1 - x0
                )));
            }
            let y = rng.random_range(y0..=y1 - pe);
            let x = rng.random_range(x0..=x1 - pe);
            provenance.push(CellSource {
                grid_row: i,
                grid_col: j,
                y,
                x,
                edge: pe,
            });
        }
    }
    let e = spec.fragment_edge;
    let mut frames = Array4::zeros((t, e, e, c));
    for cell in &provenance {
        let (oy, ox) = (cell.grid_row * pe, cell.grid_col * pe);
        frames
            .slice_mut(s![.., oy..oy + pe, ox..ox + pe, ..])
            .assign(&video.frames.slice(s![.., cell.y..cell.y + pe, cell.x..cell.x + pe, ..]));
    }
    Ok(FragmentVideo {
        video_id: video.video_id.clone(),
        frames,
        provenance,
        patch_edge: pe,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SlowFastClip {
    pub video_id: String,
    pub slow: Array4<u8>,
    pub fast: Array4<u8>,
    pub slow_indices: Vec<usize>,
    pub fast_indices: Vec<usize>,
}

/// Slow path: `clip_length` uniform frames; fast path: `alpha · clip_length`
/// uniform frames; both drawn from the full decoded frame pool.
pub fn slowfast_sample(video: &FrameSequence, spec: &SamplingSpec) -> SlowFastClip {
    let slow_indices = uniform_indices(video.len(), spec.clip_length);
    let fast_indices = uniform_indices(video.len(), spec.fast_length());
    SlowFastClip {
        video_id: video.video_id.clone(),
        slow: video.select(&slow_indices).frames,
        fast: video.select(&fast_indices).frames,
        slow_indices,
        fast_indices,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn video(t: usize, h: usize, w: usize, c: usize) -> FrameSequence {
        let frames = Array4::from_shape_fn((t, h, w, c), |(t, y, x, ch)| {
            ((t * 13 + y * 251 + x * 7 + ch * 89) % 256) as u8
        });
        FrameSequence::new("v", frames, 24.0).unwrap()
    }

    #[test]
    fn uniform_index_examples() {
        // k·15/7 for k = 0..8 → 0, 2.14, 4.29, 6.43, 8.57, 10.71, 12.86, 15
        assert_eq!(uniform_indices(16, 8), vec![0, 2, 4, 6, 9, 11, 13, 15]);
        assert_eq!(uniform_indices(8, 8), (0..8).collect::<Vec<_>>());
        let short = uniform_indices(3, 8);
        assert_eq!(short.first(), Some(&0));
        assert_eq!(short.last(), Some(&2));
        assert!(short.windows(2).all(|w| w[0] <= w[1]));
        assert_eq!(uniform_indices(10, 1), vec![0]);
        assert_eq!(uniform_indices(1, 4), vec![0; 4]);
    }

    #[test]
    fn gms_shapes_at_defaults() {
        let v = video(16, 448, 448, 3);
        let f = grid_minipatch_sample(&v, &SamplingSpec::default()).unwrap();
        assert_eq!(f.frames.dim(), (16, 224, 224, 3));
        assert_eq!(f.patch_edge, 7);
        assert_eq!(f.provenance.len(), 32 * 32);
        // 448 / 32 = 14-pixel cells, each holding one 7×7 patch
        for cell in &f.provenance {
            let (y0, x0) = (cell.grid_row * 14, cell.grid_col * 14);
            assert!(cell.y >= y0 && cell.y + 7 <= y0 + 14);
            assert!(cell.x >= x0 && cell.x + 7 <= x0 + 14);
        }
    }

    #[test]
    fn gms_seed_determinism() {
        let v = video(2, 300, 260, 1);
        let spec = SamplingSpec::default();
        let a = grid_minipatch_sample(&v, &spec).unwrap();
        let b = grid_minipatch_sample(&v, &spec).unwrap();
        assert_eq!(a, b);
        let other = SamplingSpec { seed: 7, ..spec };
        let c = grid_minipatch_sample(&v, &other).unwrap();
        assert_ne!(a.provenance, c.provenance);
    }

    #[test]
    fn gms_rejects_small_video() {
        let v = video(1, 223, 448, 3);
        assert!(grid_minipatch_sample(&v, &SamplingSpec::default()).is_err());
        let spec = SamplingSpec {
            fragment_edge: 100,
            ..SamplingSpec::default()
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn slowfast_examples() {
        let spec = SamplingSpec::default();
        let c = slowfast_sample(&video(64, 32, 32, 1), &spec);
        assert_eq!(c.slow.dim().0, 8);
        assert_eq!(c.fast.dim().0, 32);

        let c = slowfast_sample(&video(32, 32, 32, 1), &spec);
        assert_eq!(c.fast_indices, (0..32).collect::<Vec<_>>());

        let c = slowfast_sample(&video(8, 32, 32, 1), &spec);
        assert_eq!(c.slow_indices, (0..8).collect::<Vec<_>>());
        let expected: Vec<usize> = (0..32).map(|k| (k as f64 * 7.0 / 31.0).round() as usize).collect();
        assert_eq!(c.fast_indices, expected);
        for i in 0..8 {
            let occurrences = c.fast_indices.iter().filter(|&&x| x == i).count();
            assert!((3..=5).contains(&occurrences), "index {i} in {:?}", c.fast_indices);
        }
        assert!(c.fast_indices.windows(2).all(|w| w[0] <= w[1]));
    }

    proptest! {
        #[test]
        fn index_lists_are_monotone_and_span(total in 1usize..200, count in 1usize..80) {
            let idx = uniform_indices(total, count);
            prop_assert_eq!(idx.len(), count);
            prop_assert!(idx.windows(2).all(|w| w[0] <= w[1]));
            prop_assert_eq!(idx[0], 0);
            if count >= 2 {
                prop_assert_eq!(*idx.last().unwrap(), total - 1);
            }
            if count <= total {
                prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
            }
        }

        #[test]
        fn gms_provenance_is_bit_exact(
            h in 64usize..140,
            w in 64usize..140,
            seed in any::<u64>(),
            grid in prop::sample::select(vec![4usize, 8]),
        ) {
            let spec = SamplingSpec { grid_size: grid, fragment_edge: grid * 8, seed, ..SamplingSpec::default() };
            let v = video(3, h, w, 3);
            let f = grid_minipatch_sample(&v, &spec).unwrap();
            prop_assert_eq!(f.frames.dim(), (3, grid * 8, grid * 8, 3));
            for cell in &f.provenance {
                let (oy, ox) = (cell.grid_row * 8, cell.grid_col * 8);
                for t in 0..3 {
                    let out = f.frames.slice(s![t, oy..oy + 8, ox..ox + 8, ..]);
                    let src = v.frames.slice(s![t, cell.y..cell.y + 8, cell.x..cell.x + 8, ..]);
                    prop_assert_eq!(out, src);
                }
            }
        }
    }
}
