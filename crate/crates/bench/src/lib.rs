//! Deterministic inputs shared by the benchmarks.

use std::collections::BTreeMap;

use mdvqa::model::{ModelConfig, VideoFeatures};
use mdvqa::{FrameSequence, Matrix, Modality};
use ndarray::{Array2, Array4};

/// A `frames × size × size × 3` clip of hashed pixel values.
pub fn patterned_video(frames: usize, size: usize) -> FrameSequence {
    let data = Array4::from_shape_fn((frames, size, size, 3), |(t, y, x, c)| {
        (t.wrapping_mul(31) ^ y.wrapping_mul(131) ^ x.wrapping_mul(71) ^ c.wrapping_mul(17)) as u8
    });
    FrameSequence::new("bench", data, 24.0).expect("non-empty clip")
}

/// Two score vectors of length `n` with moderate agreement and a few ties.
pub fn score_pairs(n: usize) -> (Vec<f64>, Vec<f64>) {
    let x: Vec<f64> = (0..n).map(|i| ((i * 7919) % 1000) as f64 / 250.0).collect();
    let y: Vec<f64> = x
        .iter()
        .enumerate()
        .map(|(i, v)| v + ((i * 104_729) % 97) as f64 / 50.0)
        .collect();
    (x, y)
}

fn patterned(rows: usize, cols: usize, salt: usize) -> Matrix {
    Array2::from_shape_fn((rows, cols), |(r, c)| (((r * 37 + c * 11 + salt) % 29) as f64 - 14.0) / 14.0)
}

/// Raw features with the default toy widths and token counts.
pub fn toy_features(config: &ModelConfig, salt: usize) -> VideoFeatures {
    let rows = [(Modality::Semantic, 8), (Modality::Technical, 16), (Modality::Motion, config.motion_tokens)];
    let blocks: BTreeMap<Modality, Matrix> = rows
        .into_iter()
        .map(|(m, r)| (m, patterned(r, config.feature_dims[&m], salt)))
        .collect();
    VideoFeatures {
        video_id: format!("bench{salt}"),
        blocks,
    }
}
