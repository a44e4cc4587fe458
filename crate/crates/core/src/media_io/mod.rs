//! Dataset manifests, frame decoding, prediction files and feature caches.

mod cache;
mod frames;
mod manifest;
mod predictions;

pub use cache::{cache_path, FeatureCache, CACHE_MAGIC, CACHE_VERSION};
pub use frames::{write_frame_dir, FrameDirDecoder, FrameSequence, VideoDecoder};
pub use manifest::{write_manifest, DatasetManifest, ManifestRecord, MosRange};
pub use predictions::{read_predictions, write_predictions, ScoreRecord};
