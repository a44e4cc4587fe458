//! Deterministic pixel-statistics extractors standing in for pretrained backbones.
//!
//! All statistics are computed on intensities scaled to `[0, 1]`.

use ndarray::{s, Array2, ArrayView2, ArrayView3, ArrayView4, Axis};

use super::{ExtractorInput, FeatureExtractor};
use crate::{Error, Matrix, Modality, Result};

fn luma(frame: ArrayView3<'_, u8>) -> Array2<f64> {
    let (h, w, c) = frame.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        if c == 1 {
            frame[[y, x, 0]] as f64 / 255.0
        } else {
            (0.299 * frame[[y, x, 0]] as f64
                + 0.587 * frame[[y, x, 1]] as f64
                + 0.114 * frame[[y, x, 2]] as f64)
                / 255.0
        }
    })
}

fn mean_std<'a>(values: impl IntoIterator<Item = &'a f64>) -> (f64, f64) {
    let (mut n, mut sum, mut sq) = (0.0, 0.0, 0.0);
    for &v in values {
        n += 1.0;
        sum += v;
        sq += v * v;
    }
    if n == 0.0 {
        return (0.0, 0.0);
    }
    let mean = sum / n;
    (mean, (sq / n - mean * mean).max(0.0).sqrt())
}

/// Linear-interpolated quantile of an already sorted slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

/// Means over a `4 × 4` grid of a plane.
fn grid_means(plane: ArrayView2<'_, f64>) -> impl Iterator<Item = (f64, f64)> + '_ {
    let (h, w) = plane.dim();
    (0..16).map(move |cell| {
        let (i, j) = (cell / 4, cell % 4);
        let block = plane.slice(s![i * h / 4..(i + 1) * h / 4, j * w / 4..(j + 1) * w / 4]);
        mean_std(block.iter())
    })
}

fn mean_abs_gradients(plane: ArrayView2<'_, f64>) -> (f64, f64) {
    let (h, w) = plane.dim();
    let dx = if w > 1 {
        (&plane.slice(s![.., 1..]) - &plane.slice(s![.., ..w - 1])).mapv(f64::abs).mean().unwrap_or(0.0)
    } else {
        0.0
    };
    let dy = if h > 1 {
        (&plane.slice(s![1.., ..]) - &plane.slice(s![..h - 1, ..])).mapv(f64::abs).mean().unwrap_or(0.0)
    } else {
        0.0
    };
    (dx, dy)
}

/// Per-frame appearance statistics: grid means and contrasts, a luma histogram,
/// colour moments and a handful of global descriptors. 64 values per frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToySemantic;

impl ToySemantic {
    pub const DIM: usize = 64;

    fn frame_features(frame: ArrayView3<'_, u8>) -> Vec<f64> {
        let (h, w, c) = frame.dim();
        let y = luma(frame);
        let mut f = Vec::with_capacity(Self::DIM);
        let grid: Vec<(f64, f64)> = grid_means(y.view()).collect();
        f.extend(grid.iter().map(|g| g.0));
        f.extend(grid.iter().map(|g| g.1));

        let mut hist = [0.0; 16];
        for &v in &y {
            hist[((v * 16.0) as usize).min(15)] += 1.0;
        }
        let n = (h * w) as f64;
        f.extend(hist.iter().map(|c| c / n));

        let channel = |ch: usize| frame.slice(s![.., .., ch.min(c - 1)]).mapv(|v| v as f64 / 255.0);
        let planes: Vec<Array2<f64>> = (0..3).map(channel).collect();
        let moments: Vec<(f64, f64)> = planes.iter().map(|p| mean_std(p.iter())).collect();
        f.extend(moments.iter().map(|m| m.0));
        f.extend(moments.iter().map(|m| m.1));

        let (lm, ls) = mean_std(y.iter());
        let (gx, gy) = mean_abs_gradients(y.view());
        let rg = &planes[0] - &planes[1];
        let yb = (&planes[0] + &planes[1]) * 0.5 - &planes[2];
        let (rg_m, rg_s) = mean_std(rg.iter());
        let (yb_m, yb_s) = mean_std(yb.iter());
        let colorfulness = (rg_s * rg_s + yb_s * yb_s).sqrt() + 0.3 * (rg_m * rg_m + yb_m * yb_m).sqrt();
        let mut sat = 0.0;
        for yy in 0..h {
            for xx in 0..w {
                let px = [planes[0][[yy, xx]], planes[1][[yy, xx]], planes[2][[yy, xx]]];
                let max = px.iter().cloned().fold(0.0, f64::max);
                let min = px.iter().cloned().fold(1.0, f64::min);
                if max > 0.0 {
                    sat += (max - min) / max;
                }
            }
        }
        let sorted_y = sorted(y.iter().copied().collect());
        f.extend([
            lm,
            ls,
            gx,
            gy,
            colorfulness,
            sat / n,
            sorted_y[0],
            sorted_y[sorted_y.len() - 1],
            quantile(&sorted_y, 0.5),
            quantile(&sorted_y, 0.95) - quantile(&sorted_y, 0.05),
        ]);
        debug_assert_eq!(f.len(), Self::DIM);
        f
    }
}

impl FeatureExtractor for ToySemantic {
    fn name(&self) -> &str {
        "toy-semantic"
    }

    fn modality(&self) -> Modality {
        Modality::Semantic
    }

    fn feature_dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, input: ExtractorInput<'_>) -> Result<Matrix> {
        let ExtractorInput::Frames(frames) = input else {
            return Err(Error::Shape("toy-semantic expects key frames".into()));
        };
        let rows: Vec<f64> = (0..frames.len())
            .flat_map(|t| Self::frame_features(frames.frame(t)))
            .collect();
        Ok(Array2::from_shape_vec((frames.len(), Self::DIM), rows).expect("row width"))
    }
}

/// Local-contrast and high-frequency statistics of each fragment frame,
/// measured inside each mini-patch so patch seams never count as edges.
/// 22 values per fragment frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyTechnical;

impl ToyTechnical {
    pub const DIM: usize = 22;

    /// Per-tile (std, mean |dx|, mean |dy|, mean |laplacian|).
    fn tile_stats(plane: ArrayView2<'_, f64>, pe: usize) -> Vec<[f64; 4]> {
        let (h, w) = plane.dim();
        let mut out = Vec::with_capacity((h / pe) * (w / pe));
        for ty in 0..h / pe {
            for tx in 0..w / pe {
                let tile = plane.slice(s![ty * pe..(ty + 1) * pe, tx * pe..(tx + 1) * pe]);
                let (_, sd) = mean_std(tile.iter());
                let (gx, gy) = mean_abs_gradients(tile);
                let mut lap = 0.0;
                let mut count = 0.0;
                for y in 1..pe.saturating_sub(1) {
                    for x in 1..pe - 1 {
                        let v = 4.0 * tile[[y, x]]
                            - tile[[y - 1, x]]
                            - tile[[y + 1, x]]
                            - tile[[y, x - 1]]
                            - tile[[y, x + 1]];
                        lap += v.abs();
                        count += 1.0;
                    }
                }
                out.push([sd, gx, gy, if count > 0.0 { lap / count } else { 0.0 }]);
            }
        }
        out
    }

    fn frame_features(planes: &[Array2<f64>], t: usize, pe: usize) -> Vec<f64> {
        let stats = Self::tile_stats(planes[t].view(), pe);
        let mut f = Vec::with_capacity(Self::DIM);
        for k in 0..4 {
            let col = sorted(stats.iter().map(|s| s[k]).collect());
            let (m, sd) = mean_std(col.iter());
            f.extend([m, sd, quantile(&col, 0.1), quantile(&col, 0.9)]);
        }
        // Temporal flicker between neighbouring fragment frames.
        let other = if t > 0 {
            Some(t - 1)
        } else if planes.len() > 1 {
            Some(1)
        } else {
            None
        };
        let (fm, fs) = match other {
            Some(o) => {
                let d = (&planes[t] - &planes[o]).mapv(f64::abs);
                mean_std(d.iter())
            }
            None => (0.0, 0.0),
        };
        f.extend([fm, fs]);
        let (lm, _) = mean_std(planes[t].iter());
        let contrast = f[0];
        let lap = f[12];
        f.extend([lm, lap / (contrast + 0.01), f[4] + f[8], quantile(&sorted(stats.iter().map(|s| s[0]).collect()), 0.5)]);
        debug_assert_eq!(f.len(), Self::DIM);
        f
    }
}

impl FeatureExtractor for ToyTechnical {
    fn name(&self) -> &str {
        "toy-technical"
    }

    fn modality(&self) -> Modality {
        Modality::Technical
    }

    fn feature_dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, input: ExtractorInput<'_>) -> Result<Matrix> {
        let ExtractorInput::Fragments(frag) = input else {
            return Err(Error::Shape("toy-technical expects fragments".into()));
        };
        let t = frag.len();
        if t == 0 {
            return Err(Error::Shape("empty fragment set".into()));
        }
        let planes: Vec<Array2<f64>> = frag
            .frames
            .axis_iter(Axis(0))
            .map(luma)
            .collect();
        let rows: Vec<f64> = (0..t)
            .flat_map(|i| Self::frame_features(&planes, i, frag.patch_edge.max(1)))
            .collect();
        Ok(Array2::from_shape_vec((t, Self::DIM), rows).expect("row width"))
    }
}

/// Frame-difference statistics along the fast path, concatenated with the
/// matching slow-path difference statistics. A static clip maps to all zeros.
/// 24 values per fast-path frame.
#[derive(Clone, Copy, Debug, Default)]
pub struct ToyMotion;

impl ToyMotion {
    pub const DIM: usize = 24;
    const FAST_DIM: usize = 22;

    fn planes(stack: ArrayView4<'_, u8>) -> Vec<Array2<f64>> {
        stack.axis_iter(Axis(0)).map(luma).collect()
    }

    /// Index of the neighbour a row's difference is measured against.
    fn partner(i: usize, len: usize) -> Option<usize> {
        if i > 0 {
            Some(i - 1)
        } else if len > 1 {
            Some(1)
        } else {
            None
        }
    }

    fn diff(planes: &[Array2<f64>], i: usize) -> Option<Array2<f64>> {
        Self::partner(i, planes.len()).map(|j| (&planes[i] - &planes[j]).mapv(f64::abs))
    }

    fn fast_row(planes: &[Array2<f64>], i: usize) -> Vec<f64> {
        let mut f = Vec::with_capacity(Self::FAST_DIM);
        let Some(d) = Self::diff(planes, i) else {
            return vec![0.0; Self::FAST_DIM];
        };
        let (m, sd) = mean_std(d.iter());
        let n = d.len() as f64;
        let above = |thr: f64| d.iter().filter(|&&v| v > thr).count() as f64 / n;
        f.extend([m, sd, above(8.0 / 255.0), above(32.0 / 255.0)]);
        let last = planes.len() - 1;
        let (prev, next) = (i.saturating_sub(1), (i + 1).min(last));
        let accel = (&planes[next] - &(&planes[i] * 2.0) + &planes[prev]).mapv(f64::abs);
        let (am, asd) = mean_std(accel.iter());
        f.extend([am, asd]);
        f.extend(grid_means(d.view()).map(|g| g.0));
        debug_assert_eq!(f.len(), Self::FAST_DIM);
        f
    }
}

impl FeatureExtractor for ToyMotion {
    fn name(&self) -> &str {
        "toy-motion"
    }

    fn modality(&self) -> Modality {
        Modality::Motion
    }

    fn feature_dim(&self) -> usize {
        Self::DIM
    }

    fn extract(&self, input: ExtractorInput<'_>) -> Result<Matrix> {
        let ExtractorInput::Clip(clip) = input else {
            return Err(Error::Shape("toy-motion expects a slow/fast clip".into()));
        };
        let fast = Self::planes(clip.fast.view());
        let slow = Self::planes(clip.slow.view());
        if fast.is_empty() || slow.is_empty() {
            return Err(Error::Shape("empty slow/fast clip".into()));
        }
        let alpha = (fast.len() / slow.len()).max(1);
        let slow_stats: Vec<(f64, f64)> = (0..slow.len())
            .map(|j| Self::diff(&slow, j).map_or((0.0, 0.0), |d| mean_std(d.iter())))
            .collect();
        let mut rows = Vec::with_capacity(fast.len() * Self::DIM);
        for i in 0..fast.len() {
            rows.extend(Self::fast_row(&fast, i));
            let (m, sd) = slow_stats[(i / alpha).min(slow.len() - 1)];
            rows.extend([m, sd]);
        }
        Ok(Array2::from_shape_vec((fast.len(), Self::DIM), rows).expect("row width"))
    }
}
