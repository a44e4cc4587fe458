//! Orchestration used by the command-line tool: synthetic data, feature
//! preparation, training, prediction, evaluation and reports.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::SystemTime;

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::Config;
use crate::encoders::{
    encode_motion, encode_semantic, encode_technical, ExtractorRegistry, FeatureExtractor,
};
use crate::media_io::{
    cache_path, read_predictions, write_frame_dir, write_manifest, write_predictions,
    DatasetManifest, FeatureCache, FrameSequence, ManifestRecord, ScoreRecord, VideoDecoder,
};
use crate::metrics::{rank_reports, EvalReport};
use crate::model::{Model, ModelConfig, VideoFeatures};
use crate::prompting::AssemblyMode;
use crate::sampling::{grid_minipatch_sample, slowfast_sample, uniform_frame_sample, SamplingSpec};
use crate::synthetic::{generate_video, labels, SyntheticLabel, SyntheticSpec};
use crate::training::{self, FitOutcome, Sample, TrainConfig, TrainState};
use crate::{Error, Modality, Result};

/// One extractor per modality.
#[derive(Clone)]
pub struct Extractors {
    pub semantic: Arc<dyn FeatureExtractor>,
    pub technical: Arc<dyn FeatureExtractor>,
    pub motion: Arc<dyn FeatureExtractor>,
}

impl Extractors {
    pub fn from_config(cfg: &Config, registry: &ExtractorRegistry) -> Result<Self> {
        let get = |m: Modality| {
            let name = cfg
                .extractors
                .get(&m)
                .ok_or_else(|| Error::Config(format!("no extractor configured for {m}")))?;
            registry.get(name, m)
        };
        Ok(Self {
            semantic: get(Modality::Semantic)?,
            technical: get(Modality::Technical)?,
            motion: get(Modality::Motion)?,
        })
    }

    pub fn get(&self, m: Modality) -> &dyn FeatureExtractor {
        match m {
            Modality::Semantic => self.semantic.as_ref(),
            Modality::Technical => self.technical.as_ref(),
            Modality::Motion => self.motion.as_ref(),
        }
    }
}

/// Identifies the extractor and the sampling settings behind a cache.
pub fn producer_tag(extractor: &dyn FeatureExtractor, spec: &SamplingSpec) -> String {
    format!(
        "{}|grid={},edge={},seed={},clip={},alpha={},semantic={},technical={}",
        extractor.name(),
        spec.grid_size,
        spec.fragment_edge,
        spec.seed,
        spec.clip_length,
        spec.alpha,
        spec.semantic_frame_count,
        spec.technical_frames
    )
}

/// Samples the three views of `video` and encodes the requested modalities.
pub fn extract_features(
    video: &FrameSequence,
    spec: &SamplingSpec,
    extractors: &Extractors,
    modalities: &[Modality],
) -> Result<VideoFeatures> {
    spec.validate()?;
    let mut blocks = std::collections::BTreeMap::new();
    for &m in modalities {
        let out = match m {
            Modality::Semantic => {
                let frames = uniform_frame_sample(video, spec.semantic_frame_count);
                encode_semantic(&frames, extractors.get(m))?
            }
            Modality::Technical => {
                let frames = uniform_frame_sample(video, spec.technical_frames);
                let fragments = grid_minipatch_sample(&frames, spec)?;
                encode_technical(&fragments, extractors.get(m))?
            }
            Modality::Motion => encode_motion(&slowfast_sample(video, spec), extractors.get(m))?,
        };
        blocks.insert(m, out.features);
    }
    Ok(VideoFeatures {
        video_id: video.video_id.clone(),
        blocks,
    })
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Generates the synthetic set entirely in memory and extracts all features.
pub fn synthetic_features(
    spec: &SyntheticSpec,
    sampling: &SamplingSpec,
    extractors: &Extractors,
) -> Result<Vec<(SyntheticLabel, VideoFeatures)>> {
    labels(spec)
        .into_par_iter()
        .enumerate()
        .map(|(i, label)| {
            let video = generate_video(spec, &label, i)?;
            let feats = extract_features(&video, sampling, extractors, &Modality::ALL)?;
            Ok((label, feats))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSummary {
    pub manifest: PathBuf,
    pub train_manifest: PathBuf,
    pub holdout_manifest: PathBuf,
    pub videos: usize,
}

/// Writes frame directories, `manifest.csv`, `train.csv`, `holdout.csv` and
/// `labels.csv` under `out`.
pub fn cmd_make_synthetic(out: &Path, spec: &SyntheticSpec, workers: usize) -> Result<SyntheticSummary> {
    spec.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let all = labels(spec);
    pool(workers)?.install(|| {
        all.par_iter().enumerate().try_for_each(|(i, label)| {
            let video = generate_video(spec, label, i)?;
            write_frame_dir(&video, out.join("videos").join(&label.video_id))
        })
    })?;
    let record = |l: &SyntheticLabel| ManifestRecord {
        video_id: l.video_id.clone(),
        uri: format!("videos/{}", l.video_id),
        mos: Some(l.mos),
        prompt: None,
    };
    let summary = SyntheticSummary {
        manifest: out.join("manifest.csv"),
        train_manifest: out.join("train.csv"),
        holdout_manifest: out.join("holdout.csv"),
        videos: all.len(),
    };
    let records: Vec<ManifestRecord> = all.iter().map(record).collect();
    write_manifest(&records, &summary.manifest)?;
    let train: Vec<ManifestRecord> = all.iter().filter(|l| !l.holdout).map(record).collect();
    let hold: Vec<ManifestRecord> = all.iter().filter(|l| l.holdout).map(record).collect();
    if !train.is_empty() {
        write_manifest(&train, &summary.train_manifest)?;
    }
    if !hold.is_empty() {
        write_manifest(&hold, &summary.holdout_manifest)?;
    }
    let labels_path = out.join("labels.csv");
    let mut w = csv::Writer::from_path(&labels_path)?;
    for l in &all {
        w.serialize(l)?;
    }
    w.flush().map_err(|e| Error::io(&labels_path, e))?;
    Ok(summary)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct PrepareReport {
    /// Cache files written in this run.
    pub written: usize,
    /// Videos whose caches were all fresh.
    pub skipped: usize,
    pub failures: Vec<(String, String)>,
}

fn source_mtime(path: &Path) -> Option<SystemTime> {
    let meta = fs::metadata(path).ok()?;
    let mut latest = meta.modified().ok()?;
    if meta.is_dir() {
        for entry in fs::read_dir(path).ok()?.flatten() {
            if let Ok(m) = entry.metadata().and_then(|m| m.modified()) {
                latest = latest.max(m);
            }
        }
    }
    Some(latest)
}

fn cache_is_fresh(path: &Path, video_id: &str, modality: Modality, producer: &str, source: Option<SystemTime>) -> bool {
    let Ok(meta) = fs::metadata(path) else {
        return false;
    };
    let (Some(src), Ok(written)) = (source, meta.modified()) else {
        return false;
    };
    if written < src {
        return false;
    }
    matches!(
        FeatureCache::load_expecting(path, modality),
        Ok(c) if c.producer == producer && c.video_id == video_id
    )
}

/// Computes missing or stale caches `<cache_dir>/<id>.<modality>.feat`.
///
/// Failures are collected per video; other videos are still processed.
pub fn cmd_prepare(
    manifest: &DatasetManifest,
    cache_dir: &Path,
    cfg: &Config,
    registry: &ExtractorRegistry,
    decoder: &dyn VideoDecoder,
    workers: usize,
) -> Result<PrepareReport> {
    cfg.validate(registry)?;
    let extractors = Extractors::from_config(cfg, registry)?;
    fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    cfg.save(cache_dir.join("config.toml"))?;
    let results: Vec<std::result::Result<usize, (String, String)>> = pool(workers)?.install(|| {
        manifest
            .records
            .par_iter()
            .map(|record| {
                let id = &record.video_id;
                let uri = manifest.resolve_uri(record);
                let source = source_mtime(Path::new(&uri));
                let stale: Vec<Modality> = Modality::ALL
                    .into_iter()
                    .filter(|&m| {
                        let producer = producer_tag(extractors.get(m), &cfg.sampling);
                        !cache_is_fresh(&cache_path(cache_dir, id, m), id, m, &producer, source)
                    })
                    .collect();
                if stale.is_empty() {
                    return Ok(0);
                }
                let run = || -> Result<usize> {
                    let video = decoder.decode(&uri, id)?;
                    let feats = extract_features(&video, &cfg.sampling, &extractors, &stale)?;
                    for (m, f) in &feats.blocks {
                        let producer = producer_tag(extractors.get(*m), &cfg.sampling);
                        FeatureCache::from_matrix(id.clone(), *m, f, producer)
                            .save(cache_path(cache_dir, id, *m))?;
                    }
                    Ok(feats.blocks.len())
                };
                run().map_err(|e| (id.clone(), e.to_string()))
            })
            .collect()
    });
    let mut report = PrepareReport::default();
    for r in results {
        match r {
            Ok(0) => report.skipped += 1,
            Ok(n) => report.written += n,
            Err((id, msg)) => {
                warn!("prepare {id}: {msg}");
                report.failures.push((id, msg));
            }
        }
    }
    info!(
        "prepare: {} cache files written, {} videos up to date, {} failed",
        report.written,
        report.skipped,
        report.failures.len()
    );
    Ok(report)
}

/// Modalities a model with these settings reads.
pub fn required_modalities(model: &ModelConfig) -> Result<Vec<Modality>> {
    let mut m = model.plan()?.modalities();
    m.sort();
    m.dedup();
    Ok(m)
}

pub fn load_features(
    manifest: &DatasetManifest,
    cache_dir: &Path,
    modalities: &[Modality],
) -> Result<Vec<VideoFeatures>> {
    manifest
        .records
        .par_iter()
        .map(|r| VideoFeatures::load(cache_dir, &r.video_id, modalities))
        .collect()
}

pub fn load_samples(
    manifest: &DatasetManifest,
    cache_dir: &Path,
    modalities: &[Modality],
) -> Result<Vec<Sample>> {
    if let Some(r) = manifest.records.iter().find(|r| r.mos.is_none()) {
        return Err(Error::Manifest {
            path: manifest.base_dir.clone(),
            message: format!("video {} has no mos", r.video_id),
        });
    }
    let feats = load_features(manifest, cache_dir, modalities)?;
    Ok(feats
        .into_iter()
        .zip(&manifest.records)
        .map(|(features, r)| Sample {
            features,
            mos: r.mos.unwrap_or_default(),
        })
        .collect())
}

#[derive(Serialize)]
struct LogRow {
    epoch: usize,
    train_loss: f64,
    train_plcc_loss: f64,
    train_rank_loss: f64,
    lr: f64,
    val_main_score: Option<f64>,
    val_plcc: Option<f64>,
    val_srocc: Option<f64>,
}

pub fn write_train_log(state: &TrainState, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for l in &state.history {
        w.serialize(LogRow {
            epoch: l.epoch,
            train_loss: l.train_loss,
            train_plcc_loss: l.train_plcc_loss,
            train_rank_loss: l.train_rank_loss,
            lr: l.lr,
            val_main_score: l.val.map(|v| v.main_score),
            val_plcc: l.val.map(|v| v.plcc),
            val_srocc: l.val.map(|v| v.srocc),
        })?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Paths written by [`cmd_train`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainArtifacts {
    /// Best-validation model (final model without validation data).
    pub model: PathBuf,
    /// Final training state, resumable.
    pub state: PathBuf,
    pub log: PathBuf,
    pub config: PathBuf,
}

impl TrainArtifacts {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            model: dir.join("model.ckpt"),
            state: dir.join("state.ckpt"),
            log: dir.join("train_log.csv"),
            config: dir.join("config.toml"),
        }
    }
}

/// Trains from cached features; resumes from `resume_from` when given.
pub fn cmd_train(
    train: &DatasetManifest,
    val: Option<&DatasetManifest>,
    cache_dir: &Path,
    out_dir: &Path,
    cfg: &Config,
    registry: &ExtractorRegistry,
    resume_from: Option<&Path>,
) -> Result<(FitOutcome, TrainArtifacts)> {
    cfg.validate(registry)?;
    if train.is_empty() {
        return Err(Error::Degenerate("training manifest is empty".into()));
    }
    let model_cfg = cfg.resolved_model(registry)?;
    let modalities = required_modalities(&model_cfg)?;
    let train_samples = load_samples(train, cache_dir, &modalities)?;
    let val_samples = val
        .map(|v| load_samples(v, cache_dir, &modalities))
        .transpose()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let artifacts = TrainArtifacts::in_dir(out_dir);
    cfg.save(&artifacts.config)?;
    let outcome = match resume_from {
        Some(path) => {
            let mut state = TrainState::load(path)?;
            if state.model.config != model_cfg {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with different model settings",
                    path.display()
                )));
            }
            state.config.epochs = cfg.train.epochs;
            training::resume(state, &train_samples, val_samples.as_deref())?
        }
        None => training::fit(
            &train_samples,
            val_samples.as_deref(),
            model_cfg,
            cfg.train.clone(),
        )?,
    };
    outcome.best.save(&artifacts.model, None)?;
    outcome.state.save(&artifacts.state)?;
    write_train_log(&outcome.state, &artifacts.log)?;
    Ok((outcome, artifacts))
}

/// Writes `<out>` and the config echo `<out>.config.toml`.
pub fn cmd_predict(
    manifest: &DatasetManifest,
    cache_dir: &Path,
    checkpoint: &Path,
    out: &Path,
    cfg: &Config,
) -> Result<Vec<ScoreRecord>> {
    let (model, _) = Model::load(checkpoint, Some(cfg.model.decoder.d_model))?;
    if manifest.is_empty() {
        return Err(Error::Degenerate("prediction manifest is empty".into()));
    }
    let feats = load_features(manifest, cache_dir, &model.required_modalities())?;
    let mut records = training::predict(&model, &feats)?;
    for (r, m) in records.iter_mut().zip(&manifest.records) {
        r.mos = m.mos;
    }
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_predictions(&records, out)?;
    cfg.save(config_echo_path(out))?;
    Ok(records)
}

pub fn config_echo_path(artifact: &Path) -> PathBuf {
    let mut name = artifact.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    artifact.with_file_name(name)
}

/// Pairs predictions with manifest MOS by id; id sets must match exactly.
pub fn align(predictions: &[ScoreRecord], manifest: &DatasetManifest) -> Result<(Vec<f64>, Vec<f64>)> {
    let pred_ids: BTreeSet<&str> = predictions.iter().map(|r| r.video_id.as_str()).collect();
    let man_ids: BTreeSet<&str> = manifest.records.iter().map(|r| r.video_id.as_str()).collect();
    if pred_ids != man_ids || pred_ids.len() != predictions.len() {
        return Err(Error::IdMismatch {
            only_predictions: pred_ids.difference(&man_ids).map(|s| s.to_string()).collect(),
            only_manifest: man_ids.difference(&pred_ids).map(|s| s.to_string()).collect(),
        });
    }
    let mut x = Vec::with_capacity(predictions.len());
    let mut y = Vec::with_capacity(predictions.len());
    let by_id: std::collections::HashMap<&str, f64> =
        predictions.iter().map(|r| (r.video_id.as_str(), r.score)).collect();
    for r in &manifest.records {
        let mos = r.mos.ok_or_else(|| Error::Manifest {
            path: manifest.base_dir.clone(),
            message: format!("video {} has no mos", r.video_id),
        })?;
        x.push(by_id[r.video_id.as_str()]);
        y.push(mos);
    }
    Ok((x, y))
}

/// Computes the full report; also writes `<out_kv>` when given.
pub fn cmd_evaluate(predictions: &Path, manifest: &DatasetManifest, out_kv: Option<&Path>) -> Result<EvalReport> {
    let preds = read_predictions(predictions)?;
    let (x, y) = align(&preds, manifest)?;
    let report = EvalReport::compute(&x, &y)?;
    if let Some(path) = out_kv {
        fs::write(path, report.to_kv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

fn model_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}

/// Evaluates each prediction file and ranks by MainScore.
pub fn cmd_report(manifest: &DatasetManifest, predictions: &[PathBuf]) -> Result<Vec<(String, EvalReport)>> {
    if predictions.is_empty() {
        return Err(Error::Config("report needs at least one prediction file".into()));
    }
    let mut rows = predictions
        .iter()
        .map(|p| Ok((model_name(p), cmd_evaluate(p, manifest, None)?)))
        .collect::<Result<Vec<_>>>()?;
    rank_reports(&mut rows);
    Ok(rows)
}

pub fn render_report_table(rows: &[(String, EvalReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(5);
    let mut out = format!(
        "{:>4}  {:<width$}  {:>9}  {:>6}  {:>6}\n",
        "Rank", "Model", "MainScore", "PLCC", "SROCC"
    );
    for (i, (name, r)) in rows.iter().enumerate() {
        out.push_str(&format!(
            "{:>4}  {:<width$}  {:>9.3}  {:>6.3}  {:>6.3}\n",
            i + 1,
            name,
            r.main_score,
            r.plcc,
            r.srocc
        ));
    }
    out
}

pub fn write_report_csv(rows: &[(String, EvalReport)], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rank", "model", "main_score", "plcc", "srocc", "krcc", "rmse", "n"])?;
    for (i, (name, r)) in rows.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            name.clone(),
            r.main_score.to_string(),
            r.plcc.to_string(),
            r.srocc.to_string(),
            r.krcc.to_string(),
            r.rmse.to_string(),
            r.n.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// One row of the ablation grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationSetting {
    pub category: &'static str,
    pub label: &'static str,
    pub assembly: AssemblyMode,
    pub drop: Vec<Modality>,
}

/// Encoder removals, the two anchor-free assembly baselines, and the full model.
pub fn ablation_settings() -> Vec<AblationSetting> {
    let encoder = "Multi-dimensional encoder";
    let anchors = "Semantic anchors";
    let row = |category, label, assembly, drop: &[Modality]| AblationSetting {
        category,
        label,
        assembly,
        drop: drop.to_vec(),
    };
    vec![
        row(encoder, "Without Tec Quality", AssemblyMode::Anchors, &[Modality::Technical]),
        row(encoder, "Without Motion Quality", AssemblyMode::Anchors, &[Modality::Motion]),
        row(encoder, "Without Video Semantics", AssemblyMode::Anchors, &[Modality::Semantic]),
        row(anchors, "Directly Concat", AssemblyMode::DirectConcat, &[]),
        row(anchors, "Fusion", AssemblyMode::Fusion, &[]),
        row("Full model", "Anchors", AssemblyMode::Anchors, &[]),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub report: EvalReport,
    pub final_train_loss: f64,
}

/// Trains and evaluates every setting of [`ablation_settings`].
pub fn run_ablation(
    train: &[Sample],
    val: &[Sample],
    base: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationRow>> {
    ablation_settings()
        .into_iter()
        .map(|setting| {
            let model_cfg = ModelConfig {
                assembly: setting.assembly,
                drop: setting.drop.clone(),
                ..base.clone()
            };
            let out = training::fit(train, Some(val), model_cfg, cfg.clone())?;
            let report = training::evaluate(&out.best, val)?;
            let final_train_loss = out.state.history.last().map_or(f64::NAN, |l| l.train_loss);
            info!("ablation {}: main score {:.4}", setting.label, report.main_score);
            Ok(AblationRow {
                setting,
                report,
                final_train_loss,
            })
        })
        .collect()
}

pub fn render_ablation_table(rows: &[AblationRow]) -> String {
    let cw = rows.iter().map(|r| r.setting.category.len()).max().unwrap_or(0).max(8);
    let mw = rows.iter().map(|r| r.setting.label.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<cw$}  {:<mw$}  {:>9}  {:>6}  {:>6}\n",
        "Category", "Model", "MainScore", "PLCC", "SROCC"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<cw$}  {:<mw$}  {:>9.3}  {:>6.3}  {:>6.3}\n",
            r.setting.category, r.setting.label, r.report.main_score, r.report.plcc, r.report.srocc
        ));
    }
    out
}

pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["category", "model", "main_score", "plcc", "srocc", "krcc", "rmse", "final_train_loss"])?;
    for r in rows {
        w.write_record([
            r.setting.category.to_string(),
            r.setting.label.to_string(),
            r.report.main_score.to_string(),
            r.report.plcc.to_string(),
            r.report.srocc.to_string(),
            r.report.krcc.to_string(),
            r.report.rmse.to_string(),
            r.final_train_loss.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::media_io::{FrameDirDecoder, MosRange};

    fn tiny_synthetic() -> SyntheticSpec {
        SyntheticSpec {
            n_train: 3,
            n_holdout: 1,
            frames: 8,
            height: 64,
            width: 64,
            ..SyntheticSpec::default()
        }
    }

    fn tiny_config() -> Config {
        let mut c = Config::toy();
        for (k, v) in [
            ("sampling.grid_size", "8"),
            ("sampling.fragment_edge", "56"),
            ("sampling.technical_frames", "4"),
            ("sampling.clip_length", "4"),
            ("sampling.alpha", "2"),
            ("sampling.semantic_frames", "4"),
            ("model.d_model", "16"),
            ("model.d_ff", "32"),
            ("model.heads", "2"),
            ("lora.rank", "2"),
            ("train.epochs", "2"),
            ("train.batch_size", "2"),
        ] {
            c.set(k, v).unwrap();
        }
        c
    }

    #[test]
    fn prepare_is_idempotent_and_reports_failures() {
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_make_synthetic(dir.path(), &tiny_synthetic(), 2).unwrap();
        assert_eq!(summary.videos, 4);
        let manifest = DatasetManifest::load(&summary.manifest, MosRange::default()).unwrap();
        let cache = dir.path().join("cache");
        let cfg = tiny_config();
        let reg = ExtractorRegistry::default();
        let dec = FrameDirDecoder::default();
        let first = cmd_prepare(&manifest, &cache, &cfg, &reg, &dec, 2).unwrap();
        assert_eq!(first.written, 12);
        assert!(first.failures.is_empty());
        let second = cmd_prepare(&manifest, &cache, &cfg, &reg, &dec, 2).unwrap();
        assert_eq!((second.written, second.skipped), (0, 4));
        assert!(cache.join("config.toml").exists());

        let mut broken = manifest.clone();
        broken.records[1].uri = "videos/does-not-exist".into();
        broken.records[1].video_id = "ghost".into();
        let other_cache = dir.path().join("cache2");
        let r = cmd_prepare(&broken, &other_cache, &cfg, &reg, &dec, 1).unwrap();
        assert_eq!(r.written, 9);
        assert_eq!(r.failures.len(), 1);
        assert_eq!(r.failures[0].0, "ghost");
    }

    #[test]
    fn train_predict_evaluate_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let summary = cmd_make_synthetic(dir.path(), &tiny_synthetic(), 1).unwrap();
        let manifest = DatasetManifest::load(&summary.manifest, MosRange::default()).unwrap();
        let cache = dir.path().join("cache");
        let cfg = tiny_config();
        let reg = ExtractorRegistry::default();
        cmd_prepare(&manifest, &cache, &cfg, &reg, &FrameDirDecoder::default(), 1).unwrap();
        let run = dir.path().join("run");
        let (outcome, art) = cmd_train(&manifest, Some(&manifest), &cache, &run, &cfg, &reg, None).unwrap();
        assert_eq!(outcome.state.history.len(), 2);
        assert!(art.model.exists() && art.state.exists() && art.log.exists() && art.config.exists());

        let preds = run.join("preds.csv");
        let a = cmd_predict(&manifest, &cache, &art.model, &preds, &cfg).unwrap();
        let b = cmd_predict(&manifest, &cache, &art.model, &preds, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 4);
        assert!(config_echo_path(&preds).exists());

        let mut wide = cfg.clone();
        wide.set("model.d_model", "32").unwrap();
        assert!(matches!(
            cmd_predict(&manifest, &cache, &art.model, &preds, &wide),
            Err(Error::Checkpoint(_))
        ));

        fs::remove_file(cache_path(&cache, "syn0002", Modality::Motion)).unwrap();
        let err = cmd_predict(&manifest, &cache, &art.model, &run.join("p2.csv"), &cfg).unwrap_err();
        assert!(err.to_string().contains("syn0002"), "{err}");
    }

    #[test]
    fn evaluate_checks_ids_and_perfect_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let records: Vec<ManifestRecord> = (0..5)
            .map(|i| ManifestRecord {
                video_id: format!("v{i}"),
                uri: format!("v{i}"),
                mos: Some(1.0 + i as f64 * 0.7),
                prompt: None,
            })
            .collect();
        let mpath = dir.path().join("m.csv");
        write_manifest(&records, &mpath).unwrap();
        let manifest = DatasetManifest::load(&mpath, MosRange::default()).unwrap();
        let perfect: Vec<ScoreRecord> = records
            .iter()
            .map(|r| ScoreRecord {
                video_id: r.video_id.clone(),
                score: r.mos.unwrap(),
                mos: None,
            })
            .collect();
        let ppath = dir.path().join("perfect.csv");
        write_predictions(&perfect, &ppath).unwrap();
        let kv = dir.path().join("eval.kv");
        let r = cmd_evaluate(&ppath, &manifest, Some(&kv)).unwrap();
        for v in [r.plcc, r.srocc, r.krcc, r.main_score] {
            assert!((v - 1.0).abs() < 1e-12, "{r:?}");
        }
        assert_eq!(r.rmse, 0.0);
        assert_eq!(EvalReport::from_kv(&fs::read_to_string(&kv).unwrap()).unwrap(), r);

        let partial = dir.path().join("partial.csv");
        write_predictions(&perfect[..3], &partial).unwrap();
        match cmd_evaluate(&partial, &manifest, None) {
            Err(Error::IdMismatch { only_manifest, only_predictions }) => {
                assert_eq!(only_manifest, vec!["v3".to_string(), "v4".to_string()]);
                assert!(only_predictions.is_empty());
            }
            other => panic!("expected id mismatch, got {other:?}"),
        }

        let noisy: Vec<ScoreRecord> = perfect
            .iter()
            .enumerate()
            .map(|(i, r)| ScoreRecord {
                score: if i == 1 { 4.9 } else { r.score },
                ..r.clone()
            })
            .collect();
        let npath = dir.path().join("noisy.csv");
        write_predictions(&noisy, &npath).unwrap();
        let rows = cmd_report(&manifest, &[npath, ppath]).unwrap();
        assert_eq!(rows[0].0, "perfect");
        let table = render_report_table(&rows);
        assert!(table.lines().next().unwrap().contains("MainScore"));
        write_report_csv(&rows, &dir.path().join("report.csv")).unwrap();
    }

    #[test]
    fn ablation_grid_shape() {
        let s = ablation_settings();
        assert_eq!(s.len(), 6);
        for setting in &s {
            let cfg = ModelConfig {
                assembly: setting.assembly,
                drop: setting.drop.clone(),
                ..ModelConfig::default()
            };
            cfg.validate().unwrap();
        }
    }
}
