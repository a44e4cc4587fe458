//! Procedural labelled videos: moving shapes over a textured background with
//! one injected degradation whose strength fixes the MOS.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array3, Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::media_io::FrameSequence;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Degradation {
    Blur,
    Noise,
    Jitter,
    /// Frames held for several time steps (stutter / frozen motion).
    Freeze,
}

impl Degradation {
    pub const ALL: [Degradation; 4] = [
        Degradation::Blur,
        Degradation::Noise,
        Degradation::Jitter,
        Degradation::Freeze,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Degradation::Blur => "blur",
            Degradation::Noise => "noise",
            Degradation::Jitter => "jitter",
            Degradation::Freeze => "freeze",
        }
    }
}

impl fmt::Display for Degradation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Degradation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Degradation::ALL
            .into_iter()
            .find(|d| d.as_str() == s.trim())
            .ok_or_else(|| Error::Config(format!("unknown degradation {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_train: usize,
    pub n_holdout: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_train: 64,
            n_holdout: 16,
            frames: 32,
            height: 256,
            width: 256,
            fps: 24.0,
            seed: 2025,
        }
    }
}

impl SyntheticSpec {
    pub fn total(&self) -> usize {
        self.n_train + self.n_holdout
    }

    pub fn validate(&self) -> Result<()> {
        if self.total() == 0 || self.frames == 0 {
            return Err(Error::Config("synthetic set needs at least one video and frame".into()));
        }
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config("synthetic frames must be at least 32x32".into()));
        }
        Ok(())
    }
}

/// Ground truth for one generated video.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticLabel {
    pub video_id: String,
    pub degradation: Degradation,
    /// In `[0, 1]`.
    pub strength: f64,
    pub mos: f64,
    pub holdout: bool,
}

/// `5 − 4·strength`: strictly decreasing in strength, spanning `[1, 5]`.
pub fn mos_for_strength(strength: f64) -> f64 {
    5.0 - 4.0 * strength.clamp(0.0, 1.0)
}

/// Labels for the whole set: kinds cycle through [`Degradation::ALL`] and
/// strengths are drawn uniformly from `[0, 1]`.
pub fn labels(spec: &SyntheticSpec) -> Vec<SyntheticLabel> {
    let n = spec.total();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    (0..n)
        .map(|i| {
            let degradation = Degradation::ALL[i % 4];
            let strength: f64 = rng.random_range(0.0..=1.0);
            SyntheticLabel {
                video_id: format!("syn{i:04}"),
                degradation,
                strength,
                mos: mos_for_strength(strength),
                holdout: i >= spec.n_train,
            }
        })
        .collect()
}

struct Shape {
    center: (f64, f64),
    velocity: (f64, f64),
    radius: f64,
    color: [f64; 3],
    round: bool,
}

/// Clean content: a textured gradient background with a few
/// shapes moving linearly.
fn render_clean(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let (t, h, w) = (spec.frames, spec.height, spec.width);
    let base: [f64; 3] = [rng.random_range(40.0..200.0), rng.random_range(40.0..200.0), rng.random_range(40.0..200.0)];
    let tilt: [f64; 3] = [rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0), rng.random_range(-60.0..60.0)];
    let freq = (rng.random_range(0.05..0.3), rng.random_range(0.05..0.3));
    let amp = rng.random_range(10.0..30.0);
    let shapes: Vec<Shape> = (0..rng.random_range(3..6))
        .map(|_| Shape {
            center: (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64)),
            velocity: (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0)),
            radius: rng.random_range(12.0..40.0),
            color: [rng.random_range(0.0..255.0), rng.random_range(0.0..255.0), rng.random_range(0.0..255.0)],
            round: rng.random_bool(0.5),
        })
        .collect();
    let mut out = Array4::zeros((t, h, w, 3));
    let cos_y: Vec<f64> = (0..h).map(|y| (y as f64 * freq.1).cos()).collect();
    for f in 0..t {
        let phase = f as f64 * 0.15;
        let sin_x: Vec<f64> = (0..w).map(|x| (x as f64 * freq.0 + phase).sin()).collect();
        let centers: Vec<(f64, f64)> = shapes
            .iter()
            .map(|s| {
                (
                    (s.center.0 + s.velocity.0 * f as f64).rem_euclid(h as f64),
                    (s.center.1 + s.velocity.1 * f as f64).rem_euclid(w as f64),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let texture = amp * (sin_x[x] * cos_y[y]);
                let ramp = (x + y) as f64 / (h + w) as f64;
                let mut px = [0.0; 3];
                for c in 0..3 {
                    px[c] = base[c] + tilt[c] * ramp + texture;
                }
                for (s, &(cy, cx)) in shapes.iter().zip(&centers) {
                    let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                    let inside = if s.round {
                        dy * dy + dx * dx <= s.radius * s.radius
                    } else {
                        dy.abs() <= s.radius && dx.abs() <= s.radius * 0.7
                    };
                    if inside {
                        px = s.color;
                    }
                }
                for c in 0..3 {
                    out[[f, y, x, c]] = px[c];
                }
            }
        }
    }
    out
}

/// Separable box blur of radius `r` on one `h × w × c` frame, edges clamped.
fn box_blur(frame: &mut Array3<f64>, r: usize) {
    if r == 0 {
        return;
    }
    let (h, w, c) = frame.dim();
    let norm = 1.0 / (2 * r + 1) as f64;
    let src = frame.as_standard_layout().into_owned().into_raw_vec_and_offset().0;
    let mut tmp = vec![0.0; src.len()];
    for y in 0..h {
        let row = &src[y * w * c..(y + 1) * w * c];
        for x in 0..w {
            let acc = &mut tmp[(y * w + x) * c..(y * w + x + 1) * c];
            for k in 0..=2 * r {
                let xx = (x + k).saturating_sub(r).min(w - 1);
                for (a, v) in acc.iter_mut().zip(&row[xx * c..(xx + 1) * c]) {
                    *a += v;
                }
            }
            for a in acc.iter_mut() {
                *a *= norm;
            }
        }
    }
    let stride = w * c;
    let mut out = vec![0.0; src.len()];
    for y in 0..h {
        let acc = &mut out[y * stride..(y + 1) * stride];
        for k in 0..=2 * r {
            let yy = (y + k).saturating_sub(r).min(h - 1);
            for (a, v) in acc.iter_mut().zip(&tmp[yy * stride..(yy + 1) * stride]) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a *= norm;
        }
    }
    *frame = Array3::from_shape_vec((h, w, c), out).expect("shape preserved");
}

fn shift(frame: &Array3<f64>, dy: i64, dx: i64) -> Array3<f64> {
    let (h, w, c) = frame.dim();
    Array3::from_shape_fn((h, w, c), |(y, x, ch)| {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
        frame[[sy, sx, ch]]
    })
}

/// Applies `label`'s degradation to clean frames.
fn degrade(clean: Array4<f64>, label: &SyntheticLabel, rng: &mut ChaCha8Rng) -> Array4<f64> {
    let s = label.strength;
    let mut frames = clean;
    match label.degradation {
        Degradation::Blur => {
            let r = (s * 6.0).round() as usize;
            for mut f in frames.axis_iter_mut(Axis(0)) {
                let mut owned = f.to_owned();
                box_blur(&mut owned, r);
                box_blur(&mut owned, r);
                f.assign(&owned);
            }
        }
        Degradation::Noise => {
            let sigma = 48.0 * s;
            if sigma > 0.0 {
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                frames.mapv_inplace(|v| v + normal.sample(rng));
            }
        }
        Degradation::Jitter => {
            let amp = (14.0 * s).round() as i64;
            if amp > 0 {
                for mut f in frames.axis_iter_mut(Axis(0)) {
                    let (dy, dx) = (rng.random_range(-amp..=amp), rng.random_range(-amp..=amp));
                    let moved = shift(&f.to_owned(), dy, dx);
                    f.assign(&moved);
                }
            }
        }
        Degradation::Freeze => {
            let hold = 1 + (s * 7.0).round() as usize;
            let source = frames.clone();
            for (t, mut f) in frames.axis_iter_mut(Axis(0)).enumerate() {
                f.assign(&source.index_axis(Axis(0), (t / hold) * hold));
            }
        }
    }
    frames
}

/// Renders the video at position `index` of the set.
pub fn generate_video(spec: &SyntheticSpec, label: &SyntheticLabel, index: usize) -> Result<FrameSequence> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ ((index as u64 + 1) << 20));
    let clean = render_clean(spec, &mut rng);
    let frames = degrade(clean, label, &mut rng).mapv(|v| v.round().clamp(0.0, 255.0) as u8);
    FrameSequence::new(label.video_id.clone(), frames, spec.fps)
}
