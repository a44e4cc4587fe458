//! Feature extraction and projection into the decoder's embedding space.

mod toy;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;

use crate::media_io::{FeatureCache, FrameSequence};
use crate::sampling::{FragmentVideo, SlowFastClip};
use crate::{Error, Matrix, Modality, Result};

pub use toy::{ToyMotion, ToySemantic, ToyTechnical};

/// What an extractor is shown.
#[derive(Clone, Copy)]
pub enum ExtractorInput<'a> {
    Frames(&'a FrameSequence),
    Fragments(&'a FragmentVideo),
    Clip(&'a SlowFastClip),
}

impl ExtractorInput<'_> {
    fn video_id(&self) -> &str {
        match self {
            ExtractorInput::Frames(f) => &f.video_id,
            ExtractorInput::Fragments(f) => &f.video_id,
            ExtractorInput::Clip(c) => &c.video_id,
        }
    }
}

/// A feature extractor maps one view of a video to an `N × feature_dim` matrix.
pub trait FeatureExtractor: Send + Sync {
    fn name(&self) -> &str;
    fn modality(&self) -> Modality;
    fn feature_dim(&self) -> usize;
    fn extract(&self, input: ExtractorInput<'_>) -> Result<Matrix>;
}

/// Extractors registered by name; config files refer to these names.
#[derive(Clone)]
pub struct ExtractorRegistry {
    by_name: BTreeMap<String, Arc<dyn FeatureExtractor>>,
}

impl fmt::Debug for ExtractorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.by_name.keys()).finish()
    }
}

impl Default for ExtractorRegistry {
    fn default() -> Self {
        let mut r = Self {
            by_name: BTreeMap::new(),
        };
        r.register(Arc::new(ToySemantic));
        r.register(Arc::new(ToyTechnical));
        r.register(Arc::new(ToyMotion));
        r
    }
}

impl ExtractorRegistry {
    pub fn register(&mut self, extractor: Arc<dyn FeatureExtractor>) {
        self.by_name.insert(extractor.name().to_string(), extractor);
    }

    pub fn get(&self, name: &str, modality: Modality) -> Result<Arc<dyn FeatureExtractor>> {
        let e = self
            .by_name
            .get(name)
            .ok_or_else(|| Error::Config(format!("no extractor named {name:?}")))?;
        if e.modality() != modality {
            return Err(Error::Config(format!(
                "extractor {name:?} produces {} features, not {modality}",
                e.modality()
            )));
        }
        Ok(Arc::clone(e))
    }
}

/// Raw features for one modality, before projection.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub modality: Modality,
    pub features: Matrix,
}

impl EncoderOutput {
    /// Wraps externally extracted features (e.g. a pretrained backbone) as-is.
    pub fn from_cache(cache: &FeatureCache, expected: Modality) -> Result<Self> {
        if cache.modality != expected {
            return Err(Error::ModalityMismatch {
                expected,
                found: cache.modality,
            });
        }
        Ok(Self {
            modality: expected,
            features: cache.to_matrix()?,
        })
    }
}

fn run(
    extractor: &dyn FeatureExtractor,
    modality: Modality,
    input: ExtractorInput<'_>,
    expected_rows: Option<usize>,
) -> Result<EncoderOutput> {
    let video_id = input.video_id().to_string();
    let fail = |message: String| Error::Extractor {
        video_id: video_id.clone(),
        message,
    };
    if extractor.modality() != modality {
        return Err(fail(format!(
            "{} extractor used for {modality} features",
            extractor.modality()
        )));
    }
    let features = extractor.extract(input).map_err(|e| match e {
        e @ Error::Extractor { .. } => e,
        other => fail(other.to_string()),
    })?;
    if features.ncols() != extractor.feature_dim() {
        return Err(fail(format!(
            "{} returned width {}, declared {}",
            extractor.name(),
            features.ncols(),
            extractor.feature_dim()
        )));
    }
    if let Some(rows) = expected_rows {
        if features.nrows() != rows {
            return Err(fail(format!("expected {rows} feature rows, got {}", features.nrows())));
        }
    }
    if features.nrows() == 0 {
        return Err(fail("extractor produced no rows".into()));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return Err(fail("extractor produced non-finite features".into()));
    }
    Ok(EncoderOutput { modality, features })
}

/// One feature row per key frame, in order.
pub fn encode_semantic(frames: &FrameSequence, extractor: &dyn FeatureExtractor) -> Result<EncoderOutput> {
    run(
        extractor,
        Modality::Semantic,
        ExtractorInput::Frames(frames),
        Some(frames.len()),
    )
}

pub fn encode_technical(fragments: &FragmentVideo, extractor: &dyn FeatureExtractor) -> Result<EncoderOutput> {
    if fragments.is_empty() {
        return Err(Error::Extractor {
            video_id: fragments.video_id.clone(),
            message: "empty fragment set".into(),
        });
    }
    run(extractor, Modality::Technical, ExtractorInput::Fragments(fragments), None)
}

/// One feature row per fast-path frame.
pub fn encode_motion(clip: &SlowFastClip, extractor: &dyn FeatureExtractor) -> Result<EncoderOutput> {
    if clip.fast_indices.is_empty() || clip.slow_indices.is_empty() {
        return Err(Error::Extractor {
            video_id: clip.video_id.clone(),
            message: "empty slow/fast clip".into(),
        });
    }
    run(
        extractor,
        Modality::Motion,
        ExtractorInput::Clip(clip),
        Some(clip.fast_indices.len()),
    )
}

/// Modality-tagged tokens in decoder space.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenBlock {
    pub modality: Modality,
    pub tokens: Matrix,
}

impl TokenBlock {
    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn width(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Affine map `features · weight + bias` from feature width to `d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionLayer {
    /// `d_feat × d_model`
    pub weight: Matrix,
    /// `1 × d_model`
    pub bias: Matrix,
}

impl ProjectionLayer {
    /// Weight uniform in `±1/sqrt(d_feat)`, zero bias.
    pub fn init<R: Rng>(d_feat: usize, d_model: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_feat as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((d_feat, d_model), |_| rng.random_range(-bound..bound)),
            bias: Array2::zeros((1, d_model)),
        }
    }

    pub fn d_feat(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_model(&self) -> usize {
        self.weight.ncols()
    }
}

pub fn project(out: &EncoderOutput, layer: &ProjectionLayer) -> Result<TokenBlock> {
    if out.features.ncols() != layer.d_feat() {
        return Err(Error::Shape(format!(
            "{} features are {} wide, projection expects {}",
            out.modality,
            out.features.ncols(),
            layer.d_feat()
        )));
    }
    Ok(TokenBlock {
        modality: out.modality,
        tokens: out.features.dot(&layer.weight) + &layer.bias,
    })
}

/// Learnable absolute positions for the motion tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PositionalEmbedding {
    pub table: Matrix,
}

impl PositionalEmbedding {
    pub fn init<R: Rng>(rows: usize, d_model: usize, rng: &mut R) -> Self {
        Self {
            table: Array2::from_shape_fn((rows, d_model), |_| rng.random_range(-0.02..0.02)),
        }
    }
}

pub fn add_positional(block: &TokenBlock, pe: &PositionalEmbedding) -> Result<TokenBlock> {
    if block.modality != Modality::Motion {
        return Err(Error::Shape(format!(
            "positional embedding applies to motion tokens, got {}",
            block.modality
        )));
    }
    if block.tokens.dim() != pe.table.dim() {
        return Err(Error::Shape(format!(
            "motion block is {:?}, positional table is {:?}",
            block.tokens.dim(),
            pe.table.dim()
        )));
    }
    Ok(TokenBlock {
        modality: Modality::Motion,
        tokens: &block.tokens + &pe.table,
    })
}
