//! Multi-dimensional no-reference video quality assessment.
//!
//! A video is sampled three ways (key frames, grid mini-patch fragments and a
//! slow/fast clip pair), each view is encoded into a block of tokens, the blocks
//! are woven into a prompt between natural-language anchors, and a decoder reads
//! out five quality-level logits which are collapsed into a score in `[1, 5]`.
//!
//! The crate ships deterministic toy feature extractors and a small toy decoder
//! so the whole chain trains and evaluates on a CPU. Pretrained backbone
//! features can be imported through [`media_io::FeatureCache`].

pub mod config;
pub mod encoders;
mod error;
pub mod media_io;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod pipeline;
pub mod prompting;
pub mod regressor;
pub mod sampling;
pub mod synthetic;
pub mod tape;
pub mod training;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::Config;
pub use error::{Error, Result};
pub use media_io::{DatasetManifest, FeatureCache, FrameSequence, ScoreRecord};
pub use metrics::EvalReport;
pub use model::Model;
pub use prompting::{AssemblyMode, MultiModalSequence, PromptTemplate};
pub use regressor::{LevelLogits, QualityScore};
pub use sampling::{FragmentVideo, SamplingSpec, SlowFastClip};
pub use training::{TrainConfig, TrainState};

/// Dense row-major matrix used throughout: rows are tokens or samples.
pub type Matrix = ndarray::Array2<f64>;

/// The three visual views of a video.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Semantic,
    Technical,
    Motion,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Semantic, Modality::Technical, Modality::Motion];

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Semantic => "semantic",
            Modality::Technical => "technical",
            Modality::Motion => "motion",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Modality::Semantic => 0,
            Modality::Technical => 1,
            Modality::Motion => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "semantic" | "semantics" => Ok(Modality::Semantic),
            "technical" | "tec" => Ok(Modality::Technical),
            "motion" => Ok(Modality::Motion),
            other => Err(Error::Config(format!("unknown modality {other:?}"))),
        }
    }
}
