//! Prompt templates with semantic anchors, and assembly of the multimodal
//! input sequence.
//!
//! Assembly always runs on a [`Tape`] so the same code serves inference and
//! training; [`assemble`] and [`assemble_ablation`] wrap it for plain matrices.

mod tokenizer;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::TokenBlock;
use crate::tape::{Tape, Var};
use crate::{Error, Matrix, Modality, Result};

pub use tokenizer::{HashEmbedder, TextEmbedder, Token, Tokenizer, ToyTokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorId {
    Semantic,
    Technical,
    Motion,
    Task,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticAnchor {
    pub id: AnchorId,
    pub text: String,
}

pub const SEMANTIC_ANCHOR: &str = "The key frames of this video are";
pub const TECHNICAL_ANCHOR: &str = "the technical quality features of the video are";
pub const MOTION_ANCHOR: &str = "the motion quality features of the video are";
pub const TASK_ANCHOR: &str = "Please assess the quality of this video";

pub fn default_anchors() -> [SemanticAnchor; 4] {
    [
        (AnchorId::Semantic, SEMANTIC_ANCHOR),
        (AnchorId::Technical, TECHNICAL_ANCHOR),
        (AnchorId::Motion, MOTION_ANCHOR),
        (AnchorId::Task, TASK_ANCHOR),
    ]
    .map(|(id, text)| SemanticAnchor {
        id,
        text: text.to_string(),
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TemplateSegment {
    Text(String),
    Slot(Modality),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PromptTemplate {
    pub segments: Vec<TemplateSegment>,
    /// Used alone by the anchor-free assembly modes.
    pub task_anchor: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        Self::default_template()
    }
}

impl PromptTemplate {
    pub fn default_template() -> Self {
        Self::from_anchors(&default_anchors())
    }

    /// Joins anchors with the canonical punctuation:
    /// `A1:` `[sem]` `, A2:` `[tec]` `and A3:` `[mot]` `. A4`.
    pub fn from_anchors(anchors: &[SemanticAnchor; 4]) -> Self {
        let text = |id: AnchorId| {
            anchors
                .iter()
                .find(|a| a.id == id)
                .map(|a| a.text.clone())
                .unwrap_or_default()
        };
        use TemplateSegment::*;
        Self {
            segments: vec![
                Text(format!("{}:", text(AnchorId::Semantic))),
                Slot(Modality::Semantic),
                Text(format!(", {}:", text(AnchorId::Technical))),
                Slot(Modality::Technical),
                Text(format!("and {}:", text(AnchorId::Motion))),
                Slot(Modality::Motion),
                Text(format!(". {}", text(AnchorId::Task))),
            ],
            task_anchor: text(AnchorId::Task),
        }
    }

    /// Drops the slot for `modality` together with the anchor text introducing it.
    pub fn without(&self, modality: Modality) -> Self {
        let mut segments = self.segments.clone();
        if let Some(pos) = segments
            .iter()
            .position(|s| *s == TemplateSegment::Slot(modality))
        {
            segments.remove(pos);
            if pos > 0 && matches!(segments[pos - 1], TemplateSegment::Text(_)) {
                segments.remove(pos - 1);
            }
        }
        Self {
            segments,
            task_anchor: self.task_anchor.clone(),
        }
    }

    pub fn slots(&self) -> Vec<Modality> {
        self.segments
            .iter()
            .filter_map(|s| match s {
                TemplateSegment::Slot(m) => Some(*m),
                TemplateSegment::Text(_) => None,
            })
            .collect()
    }

    /// Slots must be unique and appear in semantic, technical, motion order.
    pub fn validate(&self) -> Result<()> {
        let slots = self.slots();
        if slots.is_empty() {
            return Err(Error::Config("template has no slots".into()));
        }
        if !slots.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("template slots out of order: {slots:?}")));
        }
        Ok(())
    }

    /// The prompt as text with a marker in place of each token block.
    pub fn render_text(&self) -> String {
        self.segments
            .iter()
            .map(|s| match s {
                TemplateSegment::Text(t) => t.as_str(),
                TemplateSegment::Slot(m) => slot_marker(*m),
            })
            .collect()
    }
}

pub fn slot_marker(m: Modality) -> &'static str {
    match m {
        Modality::Semantic => "<Semantic TOKEN>",
        Modality::Technical => "<Technical Quality TOKEN>",
        Modality::Motion => "<Motion Quality TOKEN>",
    }
}

/// How token blocks are combined with text.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssemblyMode {
    /// Each block is introduced by its anchor text.
    #[default]
    Anchors,
    /// Blocks back to back, followed only by the task anchor.
    DirectConcat,
    /// Technical and motion tokens cross-attended onto the semantic tokens,
    /// followed by the task anchor.
    Fusion,
}

impl AssemblyMode {
    pub const ALL: [AssemblyMode; 3] = [
        AssemblyMode::Anchors,
        AssemblyMode::DirectConcat,
        AssemblyMode::Fusion,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AssemblyMode::Anchors => "anchors",
            AssemblyMode::DirectConcat => "direct_concat",
            AssemblyMode::Fusion => "fusion",
        }
    }
}

impl fmt::Display for AssemblyMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AssemblyMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "anchors" => Ok(AssemblyMode::Anchors),
            "direct_concat" | "direct-concat" => Ok(AssemblyMode::DirectConcat),
            "fusion" => Ok(AssemblyMode::Fusion),
            other => Err(Error::Config(format!("unknown assembly mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    Text(String),
    Visual(Modality),
    /// Cross-attention output with semantic rows as queries.
    Fused,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub len: usize,
}

/// The decoder input: `L × d_model` embeddings plus the segment map.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiModalSequence {
    pub embeddings: Matrix,
    pub segments: Vec<Segment>,
}

impl MultiModalSequence {
    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.embeddings.ncols()
    }

    /// Segments must tile `[0, L)` contiguously.
    pub fn check_partition(&self) -> Result<()> {
        let mut next = 0;
        for seg in &self.segments {
            if seg.start != next || seg.len == 0 {
                return Err(Error::Shape(format!("segment {seg:?} breaks the partition at {next}")));
            }
            next += seg.len;
        }
        if next != self.len() {
            return Err(Error::Shape(format!("segments cover {next} of {} rows", self.len())));
        }
        Ok(())
    }
}

/// Single-head cross-attention weights for the fusion baseline (`d × d`, `out × in`).
#[derive(Clone, Debug, PartialEq)]
pub struct FusionLayer {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
}

impl FusionLayer {
    pub fn init<R: Rng>(d_model: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (d_model as f64).sqrt();
        let mut m = || Array2::from_shape_fn((d_model, d_model), |_| rng.random_range(-bound..bound));
        Self {
            query: m(),
            key: m(),
            value: m(),
        }
    }
}

/// Fusion weights already placed on a tape.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
}

impl FusionVars {
    pub fn constants(tape: &mut Tape, layer: &FusionLayer) -> Self {
        Self {
            query: tape.constant(layer.query.clone()),
            key: tape.constant(layer.key.clone()),
            value: tape.constant(layer.value.clone()),
        }
    }
}

#[derive(Clone, Debug)]
enum PlanItem {
    Text { text: String, embeddings: Matrix },
    Visual(Modality),
    Fused,
}

/// A template resolved for one assembly mode with its text already embedded.
#[derive(Clone, Debug)]
pub struct PromptPlan {
    items: Vec<PlanItem>,
    mode: AssemblyMode,
    d_model: usize,
}

impl PromptPlan {
    pub fn build(
        template: &PromptTemplate,
        mode: AssemblyMode,
        tokenizer: &dyn Tokenizer,
        embedder: &dyn TextEmbedder,
    ) -> Result<Self> {
        template.validate()?;
        let text = |t: &str| -> Result<PlanItem> {
            let tokens = tokenizer.tokenize(t);
            if tokens.is_empty() {
                return Err(Error::Config(format!("template text {t:?} has no tokens")));
            }
            Ok(PlanItem::Text {
                text: t.to_string(),
                embeddings: embedder.embed(&tokens),
            })
        };
        let slots = template.slots();
        let mut items = Vec::new();
        match mode {
            AssemblyMode::Anchors => {
                for seg in &template.segments {
                    items.push(match seg {
                        TemplateSegment::Text(t) => text(t)?,
                        TemplateSegment::Slot(m) => PlanItem::Visual(*m),
                    });
                }
            }
            AssemblyMode::DirectConcat => {
                items.extend(slots.iter().map(|&m| PlanItem::Visual(m)));
                items.push(text(&template.task_anchor)?);
            }
            AssemblyMode::Fusion => {
                if !slots.contains(&Modality::Semantic) {
                    return Err(Error::MissingModality(Modality::Semantic));
                }
                if slots.len() < 2 {
                    return Err(Error::Config(
                        "fusion needs technical or motion tokens to attend to".into(),
                    ));
                }
                items.push(PlanItem::Fused);
                items.push(text(&template.task_anchor)?);
            }
        }
        Ok(Self {
            items,
            mode,
            d_model: embedder.d_model(),
        })
    }

    pub fn mode(&self) -> AssemblyMode {
        self.mode
    }

    /// Modalities the plan consumes, in order.
    pub fn modalities(&self) -> Vec<Modality> {
        let mut out = Vec::new();
        for item in &self.items {
            match item {
                PlanItem::Visual(m) => out.push(*m),
                PlanItem::Fused => out.extend(Modality::ALL),
                PlanItem::Text { .. } => {}
            }
        }
        out
    }

    /// Concatenates text and visual rows on `tape`.
    ///
    /// For fusion the technical and motion blocks (whichever are present) form
    /// the keys and values.
    pub fn realize(
        &self,
        tape: &mut Tape,
        blocks: &BTreeMap<Modality, Var>,
        fusion: Option<&FusionVars>,
    ) -> Result<(Var, Vec<Segment>)> {
        let mut parts = Vec::with_capacity(self.items.len());
        let mut segments = Vec::with_capacity(self.items.len());
        let mut start = 0;
        for item in &self.items {
            let width_check = |tape: &Tape, v: Var, what: &dyn fmt::Display| {
                let w = tape.value(v).ncols();
                if w != self.d_model {
                    Err(Error::Shape(format!(
                        "{what} tokens are {w} wide, text embeddings are {}",
                        self.d_model
                    )))
                } else {
                    Ok(())
                }
            };
            let (var, kind) = match item {
                PlanItem::Text { text, embeddings } => {
                    (tape.constant(embeddings.clone()), SegmentKind::Text(text.clone()))
                }
                PlanItem::Visual(m) => {
                    let v = *blocks.get(m).ok_or(Error::MissingModality(*m))?;
                    width_check(tape, v, m)?;
                    (v, SegmentKind::Visual(*m))
                }
                PlanItem::Fused => {
                    let sem = *blocks
                        .get(&Modality::Semantic)
                        .ok_or(Error::MissingModality(Modality::Semantic))?;
                    width_check(tape, sem, &Modality::Semantic)?;
                    let context: Vec<Var> = [Modality::Technical, Modality::Motion]
                        .iter()
                        .filter_map(|m| blocks.get(m).copied())
                        .collect();
                    if context.is_empty() {
                        return Err(Error::MissingModality(Modality::Technical));
                    }
                    for &c in &context {
                        width_check(tape, c, &"context")?;
                    }
                    let fusion = fusion
                        .ok_or_else(|| Error::Config("fusion mode needs fusion weights".into()))?;
                    let ctx = tape.concat_rows(&context);
                    let q = tape.matmul_nt(sem, fusion.query);
                    let k = tape.matmul_nt(ctx, fusion.key);
                    let v = tape.matmul_nt(ctx, fusion.value);
                    let attended = tape.attention(q, k, v, 1, false);
                    (tape.add(sem, attended), SegmentKind::Fused)
                }
            };
            let len = tape.value(var).nrows();
            segments.push(Segment { kind, start, len });
            start += len;
            parts.push(var);
        }
        Ok((tape.concat_rows(&parts), segments))
    }
}

fn assemble_numeric(
    plan: &PromptPlan,
    blocks: &BTreeMap<Modality, TokenBlock>,
    fusion: Option<&FusionLayer>,
) -> Result<MultiModalSequence> {
    let mut tape = Tape::new();
    let mut vars = BTreeMap::new();
    for (m, block) in blocks {
        if block.modality != *m {
            return Err(Error::Shape(format!(
                "{} block stored under {m}",
                block.modality
            )));
        }
        vars.insert(*m, tape.constant(block.tokens.clone()));
    }
    let fusion_vars = fusion.map(|f| FusionVars::constants(&mut tape, f));
    let (out, segments) = plan.realize(&mut tape, &vars, fusion_vars.as_ref())?;
    Ok(MultiModalSequence {
        embeddings: tape.value(out).clone(),
        segments,
    })
}

/// Interleaves anchor text and token blocks following `template`.
pub fn assemble(
    template: &PromptTemplate,
    blocks: &BTreeMap<Modality, TokenBlock>,
    tokenizer: &dyn Tokenizer,
    embedder: &dyn TextEmbedder,
) -> Result<MultiModalSequence> {
    let plan = PromptPlan::build(template, AssemblyMode::Anchors, tokenizer, embedder)?;
    assemble_numeric(&plan, blocks, None)
}

pub fn assemble_ablation(
    mode: AssemblyMode,
    template: &PromptTemplate,
    blocks: &BTreeMap<Modality, TokenBlock>,
    tokenizer: &dyn Tokenizer,
    embedder: &dyn TextEmbedder,
    fusion: Option<&FusionLayer>,
) -> Result<MultiModalSequence> {
    let plan = PromptPlan::build(template, mode, tokenizer, embedder)?;
    assemble_numeric(&plan, blocks, fusion)
}
