//! The complete scoring model: feature normalisation, projections, prompt
//! assembly, decoder with LoRA, and the level read-out; plus checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use byteorder::{ByteOrder, LittleEndian};
use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{PositionalEmbedding, ProjectionLayer};
use crate::media_io::{cache_path, FeatureCache, MosRange};
use crate::prompting::{
    AssemblyMode, FusionLayer, FusionVars, HashEmbedder, PromptPlan, PromptTemplate, ToyTokenizer,
};
use crate::regressor::{
    decoder_forward_tape, rescale_score, score_from_logits, AdapterVars, DecoderConfig, DecoderVars,
    LayerVars, LevelLogits, LoraConfig, LoraSet, LoraTarget, QualityScore, ToyDecoder,
};
use crate::tape::{Tape, Var};
use crate::{Error, Matrix, Modality, Result};

pub const CHECKPOINT_FORMAT: &str = "mdvqa-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameter groups addressed by the freeze configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FeatureNorm,
    SemanticExtractor,
    SemanticProjection,
    TechnicalProjection,
    MotionProjection,
    Positional,
    Fusion,
    DecoderBase,
    Readout,
    Lora,
}

impl Component {
    pub const ALL: [Component; 10] = [
        Component::FeatureNorm,
        Component::SemanticExtractor,
        Component::SemanticProjection,
        Component::TechnicalProjection,
        Component::MotionProjection,
        Component::Positional,
        Component::Fusion,
        Component::DecoderBase,
        Component::Readout,
        Component::Lora,
    ];

    /// Components that never receive updates.
    pub const ALWAYS_FROZEN: [Component; 2] = [Component::FeatureNorm, Component::DecoderBase];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::FeatureNorm => "feature_norm",
            Component::SemanticExtractor => "semantic_extractor",
            Component::SemanticProjection => "semantic_projection",
            Component::TechnicalProjection => "technical_projection",
            Component::MotionProjection => "motion_projection",
            Component::Positional => "positional",
            Component::Fusion => "fusion",
            Component::DecoderBase => "decoder_base",
            Component::Readout => "readout",
            Component::Lora => "lora",
        }
    }

    pub fn projection(m: Modality) -> Self {
        match m {
            Modality::Semantic => Component::SemanticProjection,
            Modality::Technical => Component::TechnicalProjection,
            Modality::Motion => Component::MotionProjection,
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        Component::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown component {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub decoder: DecoderConfig,
    pub assembly: AssemblyMode,
    /// Encoders removed from the prompt.
    pub drop: Vec<Modality>,
    pub lora: LoraConfig,
    pub text_seed: u64,
    pub feature_dims: BTreeMap<Modality, usize>,
    /// Expected motion token count; sizes the positional table.
    pub motion_tokens: usize,
    pub mos_range: MosRange,
}

impl Default for ModelConfig {
    fn default() -> Self {
        use crate::encoders::{ToyMotion, ToySemantic, ToyTechnical};
        Self {
            decoder: DecoderConfig::default(),
            assembly: AssemblyMode::Anchors,
            drop: Vec::new(),
            lora: LoraConfig::default(),
            text_seed: 0,
            feature_dims: BTreeMap::from([
                (Modality::Semantic, ToySemantic::DIM),
                (Modality::Technical, ToyTechnical::DIM),
                (Modality::Motion, ToyMotion::DIM),
            ]),
            motion_tokens: 32,
            mos_range: MosRange::default(),
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.decoder.d_model
    }

    pub fn template(&self) -> PromptTemplate {
        self.drop
            .iter()
            .fold(PromptTemplate::default_template(), |t, &m| t.without(m))
    }

    pub fn feature_dim(&self, m: Modality) -> Result<usize> {
        self.feature_dims
            .get(&m)
            .copied()
            .ok_or_else(|| Error::Config(format!("no feature width configured for {m}")))
    }

    pub fn plan(&self) -> Result<PromptPlan> {
        PromptPlan::build(
            &self.template(),
            self.assembly,
            &ToyTokenizer,
            &HashEmbedder::new(self.d_model(), self.text_seed),
        )
    }

    pub fn validate(&self) -> Result<()> {
        self.decoder.validate()?;
        self.lora.validate(self.d_model(), self.d_model())?;
        if self.motion_tokens == 0 {
            return Err(Error::Config("motion_tokens must be positive".into()));
        }
        for m in Modality::ALL {
            if self.feature_dim(m)? == 0 {
                return Err(Error::Config(format!("{m} feature width is zero")));
            }
        }
        self.plan().map(|_| ())
    }
}

/// Raw per-video features keyed by modality.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub video_id: String,
    pub blocks: BTreeMap<Modality, Matrix>,
}

impl VideoFeatures {
    /// Loads `<dir>/<id>.<modality>.feat` for each requested modality.
    pub fn load(dir: &Path, video_id: &str, modalities: &[Modality]) -> Result<Self> {
        let mut blocks = BTreeMap::new();
        for &m in modalities {
            let path = cache_path(dir, video_id, m);
            if !path.exists() {
                return Err(Error::MissingCache {
                    video_id: video_id.to_string(),
                    path,
                });
            }
            let cache = FeatureCache::load_expecting(&path, m)?;
            if cache.video_id != video_id {
                return Err(Error::Cache {
                    path,
                    message: format!("holds features for {:?}", cache.video_id),
                });
            }
            blocks.insert(m, cache.to_matrix()?);
        }
        Ok(Self {
            video_id: video_id.to_string(),
            blocks,
        })
    }
}

/// Per-column standardisation fitted on training features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNorm {
    /// `1 × d`
    pub mean: Matrix,
    /// `1 × d`
    pub inv_std: Matrix,
}

impl FeatureNorm {
    pub fn identity(d: usize) -> Self {
        Self {
            mean: Array2::zeros((1, d)),
            inv_std: Array2::ones((1, d)),
        }
    }

    /// Columns with (near) zero spread are mapped to zero.
    pub fn fit(rows: &[&Matrix]) -> Result<Self> {
        let views: Vec<_> = rows.iter().map(|m| m.view()).collect();
        let all = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Shape(format!("feature widths differ: {e}")))?;
        let n = all.nrows() as f64;
        let mean = all.sum_axis(Axis(0)) / n;
        let var = all
            .rows()
            .into_iter()
            .fold(Array2::<f64>::zeros((1, all.ncols())), |mut acc, r| {
                acc.row_mut(0)
                    .zip_mut_with(&(&r - &mean), |a, d| *a += d * d);
                acc
            })
            / n;
        let inv_std = var.mapv(|v| if v > 1e-12 { 1.0 / v.sqrt() } else { 0.0 });
        Ok(Self {
            mean: mean.insert_axis(Axis(0)),
            inv_std,
        })
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        (x - &self.mean) * &self.inv_std
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub feature_norm: BTreeMap<Modality, FeatureNorm>,
    /// Learnable head on semantic features, frozen by default.
    pub semantic_extractor: Matrix,
    pub projections: BTreeMap<Modality, ProjectionLayer>,
    pub positional: PositionalEmbedding,
    pub fusion: FusionLayer,
    pub decoder: ToyDecoder,
    pub lora: LoraSet,
    plan: PromptPlan,
}

/// Trainable leaves of one forward pass, by parameter name.
pub type PlacedParams = Vec<(String, Var)>;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model();
        let mut feature_norm = BTreeMap::new();
        let mut projections = BTreeMap::new();
        for m in Modality::ALL {
            let dim = config.feature_dim(m)?;
            feature_norm.insert(m, FeatureNorm::identity(dim));
            projections.insert(m, ProjectionLayer::init(dim, d, &mut rng));
        }
        let sem = config.feature_dim(Modality::Semantic)?;
        let positional = PositionalEmbedding::init(config.motion_tokens, d, &mut rng);
        let fusion = FusionLayer::init(d, &mut rng);
        let decoder = ToyDecoder::init(config.decoder, &mut rng)?;
        let lora = LoraSet::init(&decoder, &config.lora, &mut rng)?;
        let plan = config.plan()?;
        Ok(Self {
            config,
            feature_norm,
            semantic_extractor: Array2::eye(sem),
            projections,
            positional,
            fusion,
            decoder,
            lora,
            plan,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model()
    }

    /// Modalities the prompt consumes.
    pub fn required_modalities(&self) -> Vec<Modality> {
        let mut m = self.plan.modalities();
        m.sort();
        m.dedup();
        m
    }

    pub fn fit_feature_norm(&mut self, samples: &[&VideoFeatures]) -> Result<()> {
        for m in self.required_modalities() {
            let rows: Vec<&Matrix> = samples
                .iter()
                .map(|s| s.blocks.get(&m).ok_or(Error::MissingModality(m)))
                .collect::<Result<_>>()?;
            if !rows.is_empty() {
                self.feature_norm.insert(m, FeatureNorm::fit(&rows)?);
            }
        }
        Ok(())
    }

    /// Every parameter with its name and group, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Component, &Matrix)> {
        let mut out: Vec<(String, Component, &Matrix)> = Vec::new();
        for (m, n) in &self.feature_norm {
            out.push((format!("feature_norm.{m}.mean"), Component::FeatureNorm, &n.mean));
            out.push((format!("feature_norm.{m}.inv_std"), Component::FeatureNorm, &n.inv_std));
        }
        out.push(("semantic_extractor.weight".into(), Component::SemanticExtractor, &self.semantic_extractor));
        for (m, p) in &self.projections {
            out.push((format!("projection.{m}.weight"), Component::projection(*m), &p.weight));
            out.push((format!("projection.{m}.bias"), Component::projection(*m), &p.bias));
        }
        out.push(("positional.motion".into(), Component::Positional, &self.positional.table));
        out.push(("fusion.query".into(), Component::Fusion, &self.fusion.query));
        out.push(("fusion.key".into(), Component::Fusion, &self.fusion.key));
        out.push(("fusion.value".into(), Component::Fusion, &self.fusion.value));
        for (i, l) in self.decoder.layers.iter().enumerate() {
            for (name, m) in [
                ("query", &l.query),
                ("key", &l.key),
                ("value", &l.value),
                ("output", &l.output),
                ("ff_in", &l.ff_in),
                ("ff_in_bias", &l.ff_in_bias),
                ("ff_out", &l.ff_out),
                ("ff_out_bias", &l.ff_out_bias),
            ] {
                out.push((format!("decoder.{i}.{name}"), Component::DecoderBase, m));
            }
        }
        out.push(("readout.weight".into(), Component::Readout, &self.decoder.readout.weight));
        out.push(("readout.bias".into(), Component::Readout, &self.decoder.readout.bias));
        for (i, layer) in self.lora.layers.iter().enumerate() {
            for (t, ad) in layer {
                out.push((format!("lora.{i}.{t}.a"), Component::Lora, &ad.a));
                out.push((format!("lora.{i}.{t}.b"), Component::Lora, &ad.b));
            }
        }
        out
    }

    /// Mutable counterpart of [`Model::named_params`], same order.
    pub fn named_params_mut(&mut self) -> Vec<(String, Component, &mut Matrix)> {
        let mut out: Vec<(String, Component, &mut Matrix)> = Vec::new();
        for (m, n) in &mut self.feature_norm {
            out.push((format!("feature_norm.{m}.mean"), Component::FeatureNorm, &mut n.mean));
            out.push((format!("feature_norm.{m}.inv_std"), Component::FeatureNorm, &mut n.inv_std));
        }
        out.push((
            "semantic_extractor.weight".into(),
            Component::SemanticExtractor,
            &mut self.semantic_extractor,
        ));
        for (m, p) in &mut self.projections {
            out.push((format!("projection.{m}.weight"), Component::projection(*m), &mut p.weight));
            out.push((format!("projection.{m}.bias"), Component::projection(*m), &mut p.bias));
        }
        out.push(("positional.motion".into(), Component::Positional, &mut self.positional.table));
        out.push(("fusion.query".into(), Component::Fusion, &mut self.fusion.query));
        out.push(("fusion.key".into(), Component::Fusion, &mut self.fusion.key));
        out.push(("fusion.value".into(), Component::Fusion, &mut self.fusion.value));
        for (i, l) in self.decoder.layers.iter_mut().enumerate() {
            for (name, m) in [
                ("query", &mut l.query),
                ("key", &mut l.key),
                ("value", &mut l.value),
                ("output", &mut l.output),
                ("ff_in", &mut l.ff_in),
                ("ff_in_bias", &mut l.ff_in_bias),
                ("ff_out", &mut l.ff_out),
                ("ff_out_bias", &mut l.ff_out_bias),
            ] {
                out.push((format!("decoder.{i}.{name}"), Component::DecoderBase, m));
            }
        }
        let readout = &mut self.decoder.readout;
        out.push(("readout.weight".into(), Component::Readout, &mut readout.weight));
        out.push(("readout.bias".into(), Component::Readout, &mut readout.bias));
        for (i, layer) in self.lora.layers.iter_mut().enumerate() {
            for (t, ad) in layer {
                out.push((format!("lora.{i}.{t}.a"), Component::Lora, &mut ad.a));
                out.push((format!("lora.{i}.{t}.b"), Component::Lora, &mut ad.b));
            }
        }
        out
    }

    /// Records the forward pass for one video on `tape`.
    ///
    /// Parameters in `trainable` become gradient leaves and are returned by
    /// name; everything else enters as a constant.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        features: &VideoFeatures,
        trainable: &BTreeSet<Component>,
    ) -> Result<(Var, PlacedParams)> {
        let mut placed = Vec::new();
        let mut put = |tape: &mut Tape, name: String, comp: Component, m: &Matrix| {
            if trainable.contains(&comp) && !Component::ALWAYS_FROZEN.contains(&comp) {
                let v = tape.param(m.clone());
                placed.push((name, v));
                v
            } else {
                tape.constant(m.clone())
            }
        };

        let mut blocks = BTreeMap::new();
        for m in self.required_modalities() {
            let raw = features.blocks.get(&m).ok_or(Error::MissingModality(m))?;
            let proj = &self.projections[&m];
            if raw.ncols() != proj.d_feat() {
                return Err(Error::Shape(format!(
                    "video {}: {m} features are {} wide, model expects {}",
                    features.video_id,
                    raw.ncols(),
                    proj.d_feat()
                )));
            }
            if raw.nrows() == 0 {
                return Err(Error::Shape(format!("video {}: no {m} feature rows", features.video_id)));
            }
            let mut x = tape.constant(self.feature_norm[&m].apply(raw));
            if m == Modality::Semantic {
                let w = put(
                    tape,
                    "semantic_extractor.weight".into(),
                    Component::SemanticExtractor,
                    &self.semantic_extractor,
                );
                x = tape.matmul(x, w);
            }
            let comp = Component::projection(m);
            let w = put(tape, format!("projection.{m}.weight"), comp, &proj.weight);
            let b = put(tape, format!("projection.{m}.bias"), comp, &proj.bias);
            let y = tape.matmul(x, w);
            let mut y = tape.add_row(y, b);
            if m == Modality::Motion {
                if raw.nrows() != self.positional.table.nrows() {
                    return Err(Error::Shape(format!(
                        "video {}: {} motion tokens, positional table has {}",
                        features.video_id,
                        raw.nrows(),
                        self.positional.table.nrows()
                    )));
                }
                let p = put(tape, "positional.motion".into(), Component::Positional, &self.positional.table);
                y = tape.add(y, p);
            }
            blocks.insert(m, y);
        }

        let fusion = if self.plan.mode() == AssemblyMode::Fusion {
            Some(FusionVars {
                query: put(tape, "fusion.query".into(), Component::Fusion, &self.fusion.query),
                key: put(tape, "fusion.key".into(), Component::Fusion, &self.fusion.key),
                value: put(tape, "fusion.value".into(), Component::Fusion, &self.fusion.value),
            })
        } else {
            None
        };
        let (seq, _) = self.plan.realize(tape, &blocks, fusion.as_ref())?;

        let mut layers = Vec::with_capacity(self.decoder.layers.len());
        for (i, l) in self.decoder.layers.iter().enumerate() {
            let base = |tape: &mut Tape, m: &Matrix| tape.constant(m.clone());
            let mut adapters = BTreeMap::new();
            if let Some(map) = self.lora.layers.get(i) {
                for (&t, ad) in map {
                    let a = put(tape, format!("lora.{i}.{t}.a"), Component::Lora, &ad.a);
                    let b = put(tape, format!("lora.{i}.{t}.b"), Component::Lora, &ad.b);
                    adapters.insert(
                        t,
                        AdapterVars {
                            a,
                            b,
                            scaling: ad.scaling,
                        },
                    );
                }
            }
            layers.push(LayerVars {
                query: base(tape, &l.query),
                key: base(tape, &l.key),
                value: base(tape, &l.value),
                output: base(tape, &l.output),
                ff_in: base(tape, &l.ff_in),
                ff_in_bias: base(tape, &l.ff_in_bias),
                ff_out: base(tape, &l.ff_out),
                ff_out_bias: base(tape, &l.ff_out_bias),
                adapters,
            });
        }
        let vars = DecoderVars {
            heads: self.decoder.config.heads,
            d_model: self.decoder.config.d_model,
            layers,
            readout_weight: put(tape, "readout.weight".into(), Component::Readout, &self.decoder.readout.weight),
            readout_bias: put(tape, "readout.bias".into(), Component::Readout, &self.decoder.readout.bias),
        };
        let logits = decoder_forward_tape(tape, seq, &vars)?;
        Ok((logits, placed))
    }

    pub fn logits(&self, features: &VideoFeatures) -> Result<LevelLogits> {
        let mut tape = Tape::new();
        let (out, _) = self.forward_tape(&mut tape, features, &BTreeSet::new())?;
        LevelLogits::from_row(tape.value(out))
    }

    /// Score on the `[1, 5]` level scale.
    pub fn score(&self, features: &VideoFeatures) -> Result<QualityScore> {
        score_from_logits(&self.logits(features)?)
    }

    /// Score mapped onto the configured MOS range.
    pub fn predict(&self, features: &VideoFeatures) -> Result<f64> {
        let r = self.config.mos_range;
        rescale_score(self.score(features)?, r.lo, r.hi)
    }

    pub fn trainable_count(&self, trainable: &BTreeSet<Component>) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, c, _)| trainable.contains(c) && !Component::ALWAYS_FROZEN.contains(c))
            .map(|(_, _, m)| m.len())
            .sum()
    }

    pub fn lora_targets(&self) -> Vec<LoraTarget> {
        self.config.lora.targets.clone()
    }

    pub fn save(&self, path: impl AsRef<Path>, extra: Option<serde_json::Value>) -> Result<()> {
        let path = path.as_ref();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self
                .named_params()
                .into_iter()
                .map(|(name, _, m)| (name, StoredMatrix::encode(m)))
                .collect(),
            extra,
        };
        let text = serde_json::to_string(&file)?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint; `expected_d_model` guards against mixing widths.
    pub fn load(
        path: impl AsRef<Path>,
        expected_d_model: Option<usize>,
    ) -> Result<(Self, Option<serde_json::Value>)> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: CheckpointFile = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if file.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint", path.display())));
        }
        if file.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "{}: version {} unsupported (expected {CHECKPOINT_VERSION})",
                path.display(),
                file.version
            )));
        }
        if let Some(d) = expected_d_model {
            if d != file.config.d_model() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint d_model {} does not match configured {d}",
                    path.display(),
                    file.config.d_model()
                )));
            }
        }
        let mut model = Model::new(file.config, 0)?;
        let mut stored = file.params;
        for (name, _, m) in model.named_params_mut() {
            let s = stored
                .remove(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            let value = s.decode()?;
            if value.dim() != m.dim() {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} is {:?}, expected {:?}",
                    value.dim(),
                    m.dim()
                )));
            }
            *m = value;
        }
        if let Some(name) = stored.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected parameter {name}")));
        }
        Ok((model, file.extra))
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: BTreeMap<String, StoredMatrix>,
    extra: Option<serde_json::Value>,
}

/// A matrix stored as base64 little-endian `f64`, exact on round trip.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: String,
}

impl StoredMatrix {
    pub fn encode(m: &Matrix) -> Self {
        let values: Vec<f64> = m.iter().copied().collect();
        let mut bytes = vec![0u8; values.len() * 8];
        LittleEndian::write_f64_into(&values, &mut bytes);
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data: B64.encode(bytes),
        }
    }

    pub fn decode(&self) -> Result<Matrix> {
        let bytes = B64
            .decode(&self.data)
            .map_err(|e| Error::Checkpoint(format!("bad matrix encoding: {e}")))?;
        if bytes.len() != self.rows * self.cols * 8 {
            return Err(Error::Checkpoint(format!(
                "{}x{} matrix with {} bytes",
                self.rows,
                self.cols,
                bytes.len()
            )));
        }
        let mut values = vec![0.0; self.rows * self.cols];
        LittleEndian::read_f64_into(&bytes, &mut values);
        Array2::from_shape_vec((self.rows, self.cols), values)
            .map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            decoder: DecoderConfig {
                layers: 1,
                heads: 2,
                d_model: 16,
                d_ff: 32,
            },
            lora: LoraConfig {
                rank: 2,
                ..LoraConfig::default()
            },
            feature_dims: BTreeMap::from([
                (Modality::Semantic, 6),
                (Modality::Technical, 5),
                (Modality::Motion, 4),
            ]),
            motion_tokens: 8,
            ..ModelConfig::default()
        }
    }

    fn features(seed: u64) -> VideoFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = |r, c| Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0));
        VideoFeatures {
            video_id: format!("v{seed}"),
            blocks: BTreeMap::from([
                (Modality::Semantic, m(4, 6)),
                (Modality::Technical, m(3, 5)),
                (Modality::Motion, m(8, 4)),
            ]),
        }
    }

    #[test]
    fn names_are_unique_and_aligned() {
        let mut model = Model::new(small_config(), 1).unwrap();
        let names: Vec<String> = model.named_params().into_iter().map(|(n, _, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut_names: Vec<String> = model.named_params_mut().into_iter().map(|(n, _, _)| n).collect();
        assert_eq!(names, mut_names);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let model = Model::new(small_config(), 2).unwrap();
        let f = features(3);
        let trainable: BTreeSet<Component> = Component::ALL.into_iter().collect();
        let mut tape = Tape::new();
        let (out, placed) = model.forward_tape(&mut tape, &f, &trainable).unwrap();
        let seed = Array2::from_shape_vec((1, 5), vec![0.3, -0.2, 0.5, 0.1, -0.7]).unwrap();
        let objective = |m: &Model| -> f64 {
            let l = m.logits(&f).unwrap().0;
            l.iter().zip(seed.iter()).map(|(a, b)| a * b).sum()
        };
        let grads = tape.backward(out, seed.clone());
        let placed_names: BTreeSet<&str> = placed.iter().map(|(n, _)| n.as_str()).collect();
        assert!(placed_names.contains("semantic_extractor.weight"));
        assert!(placed_names.contains("lora.0.key.b"));
        assert!(!placed_names.iter().any(|n| n.starts_with("decoder.")));
        for (name, var) in &placed {
            let g = grads.get(*var).cloned().unwrap_or_else(|| Array2::zeros((1, 1)));
            let (r, c) = (0, g.ncols() - 1);
            let h = 1e-6;
            let mut up = model.clone();
            let mut down = model.clone();
            for (n, _, m) in up.named_params_mut() {
                if &n == name {
                    m[[r, c]] += h;
                }
            }
            for (n, _, m) in down.named_params_mut() {
                if &n == name {
                    m[[r, c]] -= h;
                }
            }
            let fd = (objective(&up) - objective(&down)) / (2.0 * h);
            assert!(
                (fd - g[[r, c]]).abs() <= 1e-5 * fd.abs().max(1e-3),
                "{name}: fd {fd} vs {}",
                g[[r, c]]
            );
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = Model::new(small_config(), 4).unwrap();
        model.fit_feature_norm(&[&features(1), &features(2)]).unwrap();
        model.save(&path, Some(serde_json::json!({"k": 1}))).unwrap();
        let (back, extra) = Model::load(&path, Some(16)).unwrap();
        assert_eq!(extra, Some(serde_json::json!({"k": 1})));
        for ((n1, _, a), (n2, _, b)) in model.named_params().into_iter().zip(back.named_params()) {
            assert_eq!(n1, n2);
            assert_eq!(a, b);
        }
        let f = features(9);
        assert_eq!(model.predict(&f).unwrap().to_bits(), back.predict(&f).unwrap().to_bits());
        assert!(matches!(Model::load(&path, Some(32)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn missing_modality_and_drops() {
        let model = Model::new(small_config(), 5).unwrap();
        let mut f = features(1);
        f.blocks.remove(&Modality::Technical);
        assert!(matches!(model.score(&f), Err(Error::MissingModality(Modality::Technical))));
        let cfg = ModelConfig {
            drop: vec![Modality::Technical],
            ..small_config()
        };
        let dropped = Model::new(cfg, 5).unwrap();
        assert_eq!(dropped.required_modalities(), vec![Modality::Semantic, Modality::Motion]);
        assert!(dropped.score(&f).is_ok());
    }

    #[test]
    fn every_assembly_mode_scores() {
        for mode in AssemblyMode::ALL {
            let cfg = ModelConfig {
                assembly: mode,
                ..small_config()
            };
            let s = Model::new(cfg, 6).unwrap().score(&features(2)).unwrap().0;
            assert!((1.0..=5.0).contains(&s));
        }
    }

    #[test]
    fn feature_norm_standardises() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0, 5.0, 3.0, 5.0]).unwrap();
        let n = FeatureNorm::fit(&[&a]).unwrap();
        let z = n.apply(&a);
        assert_eq!(z.column(0).to_vec(), vec![-1.0, 1.0]);
        assert_eq!(z.column(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn stored_matrix_is_exact() {
        let m = Array2::from_shape_vec((1, 3), vec![0.1, -1e-300, f64::MAX]).unwrap();
        assert_eq!(StoredMatrix::encode(&m).decode().unwrap(), m);
    }
}
