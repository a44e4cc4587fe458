//! End-to-end optimisation of the scoring model under the combined loss.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::media_io::ScoreRecord;
use crate::metrics::EvalReport;
use crate::model::{Component, Model, ModelConfig, StoredMatrix, VideoFeatures};
use crate::objectives::{training_loss, LossWeights, TotalLoss};
use crate::regressor::{score_from_logits, score_gradient, to_level_scale, LevelLogits};
use crate::tape::Tape;
use crate::{Error, Matrix, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Linear,
    Cosine,
    Constant,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "linear" => Ok(Schedule::Linear),
            "cosine" => Ok(Schedule::Cosine),
            "constant" => Ok(Schedule::Constant),
            other => Err(Error::Config(format!("unknown schedule {other:?}"))),
        }
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Schedule::Linear => "linear",
            Schedule::Cosine => "cosine",
            Schedule::Constant => "constant",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub freeze: BTreeSet<Component>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 0.05,
            epochs: 10,
            warmup_epochs: 2.5,
            batch_size: 8,
            schedule: Schedule::Linear,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            loss: LossWeights::default(),
            freeze: BTreeSet::from([Component::SemanticExtractor]),
        }
    }
}

impl TrainConfig {
    /// Settings for the toy model on the synthetic set: a larger step size,
    /// everything else as in the default recipe.
    pub fn toy() -> Self {
        Self {
            lr: TOY_LR,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs.is_finite()) {
            return bad(format!("warmup_epochs {} must be finite and >= 0", self.warmup_epochs));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay {} must be >= 0", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("optimizer betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.loss.lambda_rank.is_nan() || self.loss.lambda_rank < 0.0 {
            return bad(format!("lambda_rank {} must be >= 0", self.loss.lambda_rank));
        }
        Ok(())
    }

    /// Components receiving updates.
    pub fn trainable(&self) -> BTreeSet<Component> {
        Component::ALL
            .into_iter()
            .filter(|c| !self.freeze.contains(c) && !Component::ALWAYS_FROZEN.contains(c))
            .collect()
    }

    pub fn steps_per_epoch(&self, n_train: usize) -> usize {
        batches(n_train, self.batch_size)
    }

    pub fn warmup_steps(&self, steps_per_epoch: usize) -> usize {
        (self.warmup_epochs * steps_per_epoch as f64).round() as usize
    }
}

pub const TOY_LR: f64 = 1e-3;

fn batches(n: usize, batch_size: usize) -> usize {
    let full = n / batch_size;
    let rest = n % batch_size;
    // A trailing single sample is folded into the previous batch.
    match (full, rest) {
        (0, 0) => 0,
        (0, _) => 1,
        (f, 1) => f,
        (f, 0) => f,
        (f, _) => f + 1,
    }
}

/// Learning rate at `step` of `total_steps`, with warmup over `warmup_steps`.
pub fn lr_schedule(step: usize, total_steps: usize, warmup_steps: usize, cfg: &TrainConfig) -> f64 {
    let warmup = warmup_steps.min(total_steps);
    let step = step.min(total_steps);
    if step < warmup {
        return cfg.lr * step as f64 / warmup as f64;
    }
    let remaining = total_steps - warmup;
    if remaining == 0 {
        return cfg.lr;
    }
    let progress = (step - warmup) as f64 / remaining as f64;
    match cfg.schedule {
        Schedule::Linear => cfg.lr * (1.0 - progress),
        Schedule::Cosine => cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()),
        Schedule::Constant => cfg.lr,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Matrix,
    pub v: Matrix,
}

/// Adam with decoupled weight decay; state keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamW {
    pub t: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl AdamW {
    pub fn update(
        &mut self,
        model: &mut Model,
        grads: &BTreeMap<String, Matrix>,
        lr: f64,
        cfg: &TrainConfig,
        trainable: &BTreeSet<Component>,
    ) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (name, comp, p) in model.named_params_mut() {
            if !trainable.contains(&comp) {
                continue;
            }
            let Some(g) = grads.get(&name) else {
                continue;
            };
            let mom = self.moments.entry(name).or_insert_with(|| Moments {
                m: Array2::zeros(p.dim()),
                v: Array2::zeros(p.dim()),
            });
            ndarray::Zip::from(&mut *p)
                .and(&mut mom.m)
                .and(&mut mom.v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                    *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                    let step = (*m / bc1) / ((*v / bc2).sqrt() + cfg.eps) + cfg.weight_decay * *p;
                    *p -= lr * step;
                });
        }
    }
}

/// Features with a ground-truth MOS.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: VideoFeatures,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_plcc_loss: f64,
    pub train_rank_loss: f64,
    pub lr: f64,
    pub val: Option<EvalReport>,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: AdamW,
    pub step: usize,
    pub epoch: usize,
    pub history: Vec<EpochLog>,
}

#[derive(Serialize, Deserialize)]
struct Snapshot {
    config: TrainConfig,
    step: usize,
    epoch: usize,
    history: Vec<EpochLog>,
    adam_t: u64,
    adam_m: BTreeMap<String, StoredMatrix>,
    adam_v: BTreeMap<String, StoredMatrix>,
}

/// Outcome of one optimisation step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: TotalLoss,
    pub lr: f64,
}

impl TrainState {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            model,
            config,
            optimizer: AdamW::default(),
            step: 0,
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// One update on `batch` with learning rate `lr`.
    pub fn train_step(&mut self, batch: &[&Sample], lr: f64) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::Degenerate("empty training batch".into()));
        }
        let trainable = self.config.trainable();
        let range = self.model.config.mos_range;
        let model = &self.model;
        let passes: Vec<_> = batch
            .par_iter()
            .map(|s| -> Result<_> {
                let mut tape = Tape::new();
                let (out, placed) = model.forward_tape(&mut tape, &s.features, &trainable)?;
                let logits = LevelLogits::from_row(tape.value(out)).map_err(|e| {
                    Error::NonFinite(format!("video {}: {e}", s.features.video_id))
                })?;
                Ok((tape, out, placed, logits))
            })
            .collect::<Result<_>>()?;
        let scores: Vec<f64> = passes
            .iter()
            .map(|(_, _, _, l)| score_from_logits(l).map(|s| s.0))
            .collect::<Result<_>>()?;
        let targets: Vec<f64> = batch
            .iter()
            .map(|s| to_level_scale(s.mos, range.lo, range.hi))
            .collect::<Result<_>>()?;
        let loss = training_loss(&scores, &targets, self.config.loss)?;
        if !loss.total.is_finite() || loss.grad.iter().any(|g| !g.is_finite()) {
            let ids: Vec<&str> = batch.iter().map(|s| s.features.video_id.as_str()).collect();
            return Err(Error::NonFinite(format!(
                "loss {} at step {} on batch {ids:?} (scores {scores:?})",
                loss.total, self.step
            )));
        }

        let per_sample: Vec<Vec<(String, Matrix)>> = passes
            .into_par_iter()
            .zip(loss.grad.par_iter())
            .map(|((tape, out, placed, logits), &dl_ds)| {
                let ds = score_gradient(&logits);
                let seed = Array2::from_shape_fn((1, 5), |(_, i)| dl_ds * ds[i]);
                let mut grads = tape.backward(out, seed);
                placed
                    .into_iter()
                    .filter_map(|(name, var)| grads.take(var).map(|g| (name, g)))
                    .collect()
            })
            .collect();
        let mut total: BTreeMap<String, Matrix> = BTreeMap::new();
        for sample in per_sample {
            for (name, g) in sample {
                match total.get_mut(&name) {
                    Some(acc) => *acc += &g,
                    None => {
                        total.insert(name, g);
                    }
                }
            }
        }
        self.optimizer
            .update(&mut self.model, &total, lr, &self.config, &trainable);
        self.step += 1;
        Ok(StepReport { loss, lr })
    }

    fn total_steps(&self, n_train: usize) -> (usize, usize) {
        let per_epoch = self.config.steps_per_epoch(n_train);
        (per_epoch * self.config.epochs, self.config.warmup_steps(per_epoch))
    }

    /// Batches of indices for `epoch`, shuffled from `(seed, epoch)` alone.
    pub fn epoch_batches(&self, n_train: usize, epoch: usize) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..n_train).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.config.seed ^ (epoch as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        );
        order.shuffle(&mut rng);
        let bs = self.config.batch_size;
        let mut out: Vec<Vec<usize>> = order.chunks(bs).map(<[usize]>::to_vec).collect();
        if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
            let last = out.pop().unwrap_or_default();
            if let Some(prev) = out.last_mut() {
                prev.extend(last);
            }
        }
        out
    }

    /// Runs one epoch and appends its log entry.
    pub fn run_epoch(&mut self, train: &[Sample], val: Option<&[Sample]>) -> Result<EpochLog> {
        let (total, warmup) = self.total_steps(train.len());
        let mut sums = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        let batches = self.epoch_batches(train.len(), self.epoch);
        for idx in &batches {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train[i]).collect();
            lr = lr_schedule(self.step, total, warmup, &self.config);
            let r = self.train_step(&batch, lr)?;
            sums.0 += r.loss.total;
            sums.1 += r.loss.plcc;
            sums.2 += r.loss.rank;
        }
        let n = batches.len().max(1) as f64;
        let val = match val {
            Some(v) if !v.is_empty() => match evaluate(&self.model, v) {
                Ok(r) => Some(r),
                Err(e) => {
                    warn!("epoch {}: validation metrics unavailable: {e}", self.epoch + 1);
                    None
                }
            },
            _ => None,
        };
        self.epoch += 1;
        let log = EpochLog {
            epoch: self.epoch,
            train_loss: sums.0 / n,
            train_plcc_loss: sums.1 / n,
            train_rank_loss: sums.2 / n,
            lr,
            val,
        };
        info!(
            "epoch {} loss {:.6} (plcc {:.6}, rank {:.6}){}",
            log.epoch,
            log.train_loss,
            log.train_plcc_loss,
            log.train_rank_loss,
            log.val
                .map(|v| format!(" val plcc {:.4} srocc {:.4}", v.plcc, v.srocc))
                .unwrap_or_default()
        );
        self.history.push(log.clone());
        Ok(log)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let snap = Snapshot {
            config: self.config.clone(),
            step: self.step,
            epoch: self.epoch,
            history: self.history.clone(),
            adam_t: self.optimizer.t,
            adam_m: self
                .optimizer
                .moments
                .iter()
                .map(|(k, m)| (k.clone(), StoredMatrix::encode(&m.m)))
                .collect(),
            adam_v: self
                .optimizer
                .moments
                .iter()
                .map(|(k, m)| (k.clone(), StoredMatrix::encode(&m.v)))
                .collect(),
        };
        self.model.save(path, Some(serde_json::to_value(snap)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (model, extra) = Model::load(path, None)?;
        let extra = extra.ok_or_else(|| Error::Checkpoint("no training state in checkpoint".into()))?;
        let snap: Snapshot = serde_json::from_value(extra)
            .map_err(|e| Error::Checkpoint(format!("training state: {e}")))?;
        let mut moments = BTreeMap::new();
        for (k, m) in snap.adam_m {
            let v = snap
                .adam_v
                .get(&k)
                .ok_or_else(|| Error::Checkpoint(format!("missing second moment for {k}")))?;
            moments.insert(
                k,
                Moments {
                    m: m.decode()?,
                    v: v.decode()?,
                },
            );
        }
        Ok(Self {
            model,
            config: snap.config,
            optimizer: AdamW {
                t: snap.adam_t,
                moments,
            },
            step: snap.step,
            epoch: snap.epoch,
            history: snap.history,
        })
    }
}

pub struct FitOutcome {
    pub state: TrainState,
    /// Model from the epoch with the best validation MainScore, or the final one.
    pub best: Model,
    pub best_epoch: usize,
}

/// Trains a fresh model.
pub fn fit(
    train: &[Sample],
    val: Option<&[Sample]>,
    model_config: ModelConfig,
    cfg: TrainConfig,
) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    let mut model = Model::new(model_config, cfg.seed)?;
    let feats: Vec<&VideoFeatures> = train.iter().map(|s| &s.features).collect();
    model.fit_feature_norm(&feats)?;
    resume(TrainState::new(model, cfg)?, train, val)
}

/// Continues training until `state.config.epochs`.
pub fn resume(mut state: TrainState, train: &[Sample], val: Option<&[Sample]>) -> Result<FitOutcome> {
    if train.is_empty() {
        return Err(Error::Degenerate("empty training set".into()));
    }
    let mut best = state.model.clone();
    let mut best_epoch = state.epoch;
    let mut best_score = f64::NEG_INFINITY;
    while state.epoch < state.config.epochs {
        let log = state.run_epoch(train, val)?;
        let score = log.val.map_or(f64::NEG_INFINITY, |v| v.main_score);
        if score > best_score || log.val.is_none() {
            best_score = score;
            best = state.model.clone();
            best_epoch = log.epoch;
        }
    }
    Ok(FitOutcome {
        state,
        best,
        best_epoch,
    })
}

/// Scores every video, in input order, on the MOS scale.
pub fn predict(model: &Model, features: &[VideoFeatures]) -> Result<Vec<ScoreRecord>> {
    features
        .par_iter()
        .map(|f| {
            Ok(ScoreRecord {
                video_id: f.video_id.clone(),
                score: model.predict(f)?,
                mos: None,
            })
        })
        .collect()
}

pub fn evaluate(model: &Model, samples: &[Sample]) -> Result<EvalReport> {
    let feats: Vec<VideoFeatures> = samples.iter().map(|s| s.features.clone()).collect();
    let preds = predict(model, &feats)?;
    let p: Vec<f64> = preds.iter().map(|r| r.score).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.mos).collect();
    EvalReport::compute(&p, &y)
}
