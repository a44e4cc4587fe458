//! Run configuration: a flat `key = value` file with dotted keys.
//!
//! Every key can also be set from the command line as `key=value`; both
//! paths go through [`Config::set`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::encoders::ExtractorRegistry;
use crate::media_io::MosRange;
use crate::model::{Component, ModelConfig};
use crate::regressor::LoraTarget;
use crate::sampling::SamplingSpec;
use crate::training::TrainConfig;
use crate::{Error, Modality, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    pub sampling: SamplingSpec,
    /// Extractor name per modality, looked up in an [`ExtractorRegistry`].
    pub extractors: BTreeMap<Modality, String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            sampling: SamplingSpec::default(),
            extractors: Modality::ALL
                .into_iter()
                .map(|m| (m, format!("toy-{m}")))
                .collect(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::Config(format!("{key}: cannot parse {value:?}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("{key}: expected true or false, got {other:?}"))),
    }
}

fn list(value: &str) -> impl Iterator<Item = &str> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn toml_scalar(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Array(items) => items.iter().map(toml_scalar).collect::<Vec<_>>().join(","),
        other => other.to_string(),
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, String)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, toml_scalar(other))),
        }
    }
}

fn quote(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl Config {
    /// The recipe scaled for the toy model (see [`TrainConfig::toy`]).
    pub fn toy() -> Self {
        Self {
            train: TrainConfig::toy(),
            ..Self::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name.trim() {
            "toy" => Ok(Self::toy()),
            "full" | "default" => Ok(Self::default()),
            other => Err(Error::Config(format!("unknown preset {other:?} (toy, full)"))),
        }
    }

    /// Applies one dotted key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim();
        let s = &mut self.sampling;
        let t = &mut self.train;
        let m = &mut self.model;
        match key {
            "seed" | "train.seed" => t.seed = parse(key, value)?,
            "data.mos_min" => m.mos_range.lo = parse(key, value)?,
            "data.mos_max" => m.mos_range.hi = parse(key, value)?,
            "sampling.grid_size" => s.grid_size = parse(key, value)?,
            "sampling.fragment_edge" => s.fragment_edge = parse(key, value)?,
            "sampling.seed" => s.seed = parse(key, value)?,
            "sampling.clip_length" => s.clip_length = parse(key, value)?,
            "sampling.alpha" => s.alpha = parse(key, value)?,
            "sampling.semantic_frames" => s.semantic_frame_count = parse(key, value)?,
            "sampling.technical_frames" => s.technical_frames = parse(key, value)?,
            "model.d_model" => m.decoder.d_model = parse(key, value)?,
            "model.layers" => m.decoder.layers = parse(key, value)?,
            "model.heads" => m.decoder.heads = parse(key, value)?,
            "model.d_ff" => m.decoder.d_ff = parse(key, value)?,
            "model.assembly" => m.assembly = parse(key, value)?,
            "model.drop" => m.drop = list(value).map(|v| parse(key, v)).collect::<Result<_>>()?,
            "model.text_seed" => m.text_seed = parse(key, value)?,
            "lora.rank" => m.lora.rank = parse(key, value)?,
            "lora.targets" => {
                m.lora.targets = list(value)
                    .map(|v| parse::<LoraTarget>(key, v))
                    .collect::<Result<_>>()?
            }
            "lora.scaling" => m.lora.scaling = parse(key, value)?,
            "loss.lambda_rank" => t.loss.lambda_rank = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "train.epochs" => t.epochs = parse(key, value)?,
            "train.warmup_epochs" => t.warmup_epochs = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.schedule" => t.schedule = parse(key, value)?,
            "train.beta1" => t.beta1 = parse(key, value)?,
            "train.beta2" => t.beta2 = parse(key, value)?,
            "train.eps" => t.eps = parse(key, value)?,
            _ => {
                if let Some(name) = key.strip_prefix("extractor.") {
                    let modality: Modality = name.parse()?;
                    self.extractors.insert(modality, value.trim().to_string());
                } else if let Some(name) = key.strip_prefix("freeze.") {
                    let comp: Component = name.parse()?;
                    if parse_bool(key, value)? {
                        t.freeze.insert(comp);
                    } else {
                        t.freeze.remove(&comp);
                    }
                } else {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Parses `text` on top of the preset it names (`preset = "..."`, default toy).
    pub fn from_str_with_base(text: &str, base: Option<Config>) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e| Error::Config(format!("config syntax: {e}")))?;
        let mut pairs = Vec::new();
        flatten("", &table, &mut pairs);
        let mut cfg = match pairs.iter().find(|(k, _)| k == "preset") {
            Some((_, name)) => Config::preset(name)?,
            None => base.unwrap_or_else(Config::toy),
        };
        for (k, v) in pairs.iter().filter(|(k, _)| k != "preset") {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_str_with_base(&text, None)
    }

    /// Checks every section; extractor names are resolved against `registry`.
    pub fn validate(&self, registry: &ExtractorRegistry) -> Result<()> {
        self.sampling.validate()?;
        self.train.validate()?;
        MosRange::new(self.model.mos_range.lo, self.model.mos_range.hi)?;
        self.resolved_model(registry)?.validate()
    }

    /// Model settings with feature widths and motion token count filled in.
    pub fn resolved_model(&self, registry: &ExtractorRegistry) -> Result<ModelConfig> {
        let mut model = self.model.clone();
        for m in Modality::ALL {
            let name = self
                .extractors
                .get(&m)
                .ok_or_else(|| Error::Config(format!("no extractor configured for {m}")))?;
            model.feature_dims.insert(m, registry.get(name, m)?.feature_dim());
        }
        model.motion_tokens = self.sampling.fast_length();
        Ok(model)
    }

    /// Echo of every key, sorted, in the same syntax [`Config::load`] reads.
    pub fn to_flat(&self) -> String {
        let s = &self.sampling;
        let t = &self.train;
        let m = &self.model;
        let mut lines: Vec<(String, String)> = vec![
            ("data.mos_min".into(), format!("{:?}", m.mos_range.lo)),
            ("data.mos_max".into(), format!("{:?}", m.mos_range.hi)),
            ("sampling.grid_size".into(), s.grid_size.to_string()),
            ("sampling.fragment_edge".into(), s.fragment_edge.to_string()),
            ("sampling.seed".into(), s.seed.to_string()),
            ("sampling.clip_length".into(), s.clip_length.to_string()),
            ("sampling.alpha".into(), s.alpha.to_string()),
            ("sampling.semantic_frames".into(), s.semantic_frame_count.to_string()),
            ("sampling.technical_frames".into(), s.technical_frames.to_string()),
            ("model.d_model".into(), m.decoder.d_model.to_string()),
            ("model.layers".into(), m.decoder.layers.to_string()),
            ("model.heads".into(), m.decoder.heads.to_string()),
            ("model.d_ff".into(), m.decoder.d_ff.to_string()),
            ("model.assembly".into(), quote(m.assembly.as_str())),
            (
                "model.drop".into(),
                quote(&m.drop.iter().map(|d| d.as_str()).collect::<Vec<_>>().join(",")),
            ),
            ("model.text_seed".into(), m.text_seed.to_string()),
            ("lora.rank".into(), m.lora.rank.to_string()),
            (
                "lora.targets".into(),
                quote(&m.lora.targets.iter().map(|t| t.as_str()).collect::<Vec<_>>().join(",")),
            ),
            ("lora.scaling".into(), format!("{:?}", m.lora.scaling)),
            ("loss.lambda_rank".into(), format!("{:?}", t.loss.lambda_rank)),
            ("train.lr".into(), format!("{:?}", t.lr)),
            ("train.weight_decay".into(), format!("{:?}", t.weight_decay)),
            ("train.epochs".into(), t.epochs.to_string()),
            ("train.warmup_epochs".into(), format!("{:?}", t.warmup_epochs)),
            ("train.batch_size".into(), t.batch_size.to_string()),
            ("train.schedule".into(), quote(&t.schedule.to_string())),
            ("train.beta1".into(), format!("{:?}", t.beta1)),
            ("train.beta2".into(), format!("{:?}", t.beta2)),
            ("train.eps".into(), format!("{:?}", t.eps)),
            ("train.seed".into(), t.seed.to_string()),
        ];
        for (modality, name) in &self.extractors {
            lines.push((format!("extractor.{modality}"), quote(name)));
        }
        let frozen: BTreeSet<Component> = t.freeze.iter().copied().collect();
        for c in Component::ALL {
            if !Component::ALWAYS_FROZEN.contains(&c) {
                lines.push((format!("freeze.{c}"), frozen.contains(&c).to_string()));
            }
        }
        lines.sort();
        let mut out = String::new();
        for (k, v) in lines {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_flat()).map_err(|e| Error::io(path, e))
    }
}
