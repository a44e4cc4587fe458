//! Five-level score head, LoRA adapters and the toy causal decoder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::prompting::MultiModalSequence;
use crate::tape::{Tape, Var};
use crate::{Error, Matrix, Result};

pub const LEVELS: usize = 5;
pub const LEVEL_NAMES: [&str; LEVELS] = ["bad", "poor", "fair", "good", "excellent"];

/// Raw scores over the quality words, ordered bad to excellent.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelLogits(pub [f64; LEVELS]);

impl LevelLogits {
    pub fn new(values: [f64; LEVELS]) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("level logits {values:?}")));
        }
        Ok(Self(values))
    }

    pub fn from_row(row: &Matrix) -> Result<Self> {
        if row.dim() != (1, LEVELS) {
            return Err(Error::Shape(format!("level logits must be 1x5, got {:?}", row.dim())));
        }
        let mut v = [0.0; LEVELS];
        v.iter_mut().zip(row.iter()).for_each(|(d, s)| *d = *s);
        Self::new(v)
    }

    /// Softmax over the five levels.
    pub fn probabilities(&self) -> [f64; LEVELS] {
        let max = self.0.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut p = self.0.map(|l| (l - max).exp());
        let sum: f64 = p.iter().sum();
        p.iter_mut().for_each(|x| *x /= sum);
        p
    }
}

/// A score on the `[1, 5]` level scale.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct QualityScore(pub f64);

impl QualityScore {
    pub fn value(self) -> f64 {
        self.0
    }
}

/// `s = Σ i·softmax(λ)_i` for levels `i = 1..5`.
pub fn score_from_logits(logits: &LevelLogits) -> Result<QualityScore> {
    let logits = LevelLogits::new(logits.0)?;
    let p = logits.probabilities();
    let s: f64 = p.iter().enumerate().map(|(i, pi)| (i + 1) as f64 * pi).sum();
    Ok(QualityScore(s.clamp(1.0, 5.0)))
}

/// `ds/dλ_i = p_i·(i − s)`.
pub fn score_gradient(logits: &LevelLogits) -> [f64; LEVELS] {
    let p = logits.probabilities();
    let s: f64 = p.iter().enumerate().map(|(i, pi)| (i + 1) as f64 * pi).sum();
    let mut g = [0.0; LEVELS];
    for (i, gi) in g.iter_mut().enumerate() {
        *gi = p[i] * ((i + 1) as f64 - s);
    }
    g
}

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Degenerate(format!("interval [{lo}, {hi}]")));
    }
    Ok(())
}

/// Maps `[1, 5]` linearly onto `[lo, hi]`.
pub fn rescale_score(score: QualityScore, lo: f64, hi: f64) -> Result<f64> {
    check_interval(lo, hi)?;
    Ok(lo + (score.0 - 1.0) * (hi - lo) / 4.0)
}

/// Maps `[lo, hi]` linearly onto `[1, 5]`.
pub fn to_level_scale(value: f64, lo: f64, hi: f64) -> Result<f64> {
    check_interval(lo, hi)?;
    Ok(1.0 + 4.0 * (value - lo) / (hi - lo))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    Query,
    Key,
    Value,
    Output,
}

impl LoraTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            LoraTarget::Query => "query",
            LoraTarget::Key => "key",
            LoraTarget::Value => "value",
            LoraTarget::Output => "output",
        }
    }
}

impl fmt::Display for LoraTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LoraTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "query" | "q" => Ok(LoraTarget::Query),
            "key" | "k" => Ok(LoraTarget::Key),
            "value" | "v" => Ok(LoraTarget::Value),
            "output" | "o" => Ok(LoraTarget::Output),
            other => Err(Error::Config(format!("unknown LoRA target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub targets: Vec<LoraTarget>,
    pub scaling: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            targets: vec![LoraTarget::Query, LoraTarget::Key],
            scaling: 1.0,
        }
    }
}

impl LoraConfig {
    pub fn validate(&self, d_in: usize, d_out: usize) -> Result<()> {
        if self.rank == 0 || self.rank > d_in.min(d_out) {
            return Err(Error::Config(format!(
                "LoRA rank {} outside [1, {}]",
                self.rank,
                d_in.min(d_out)
            )));
        }
        if !self.scaling.is_finite() {
            return Err(Error::Config("LoRA scaling must be finite".into()));
        }
        Ok(())
    }

    /// `r·(d_in + d_out)` per adapted matrix.
    pub fn trainable_per_target(&self, d_in: usize, d_out: usize) -> usize {
        self.rank * (d_in + d_out)
    }
}

/// Low-rank update `scaling · B · A` for a `d_out × d_in` weight.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter {
    /// `r × d_in`
    pub a: Matrix,
    /// `d_out × r`
    pub b: Matrix,
    pub scaling: f64,
}

impl LoraAdapter {
    /// `A` uniform in `±1/sqrt(d_in)`, `B = 0`.
    pub fn init<R: Rng>(d_in: usize, d_out: usize, cfg: &LoraConfig, rng: &mut R) -> Result<Self> {
        cfg.validate(d_in, d_out)?;
        let bound = 1.0 / (d_in as f64).sqrt();
        Ok(Self {
            a: Array2::from_shape_fn((cfg.rank, d_in), |_| rng.random_range(-bound..bound)),
            b: Array2::zeros((d_out, cfg.rank)),
            scaling: cfg.scaling,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn trainable_count(&self) -> usize {
        self.a.len() + self.b.len()
    }
}

/// The effective weight of an adapted projection.
#[derive(Clone, Copy, Debug)]
pub struct LoraWeight<'a> {
    pub base: &'a Matrix,
    pub adapter: &'a LoraAdapter,
}

impl LoraWeight<'_> {
    /// `W + scaling · B · A`.
    pub fn merged(&self) -> Matrix {
        self.base + &(self.adapter.b.dot(&self.adapter.a) * self.adapter.scaling)
    }

    /// `x · Wᵀ + scaling · (x · Aᵀ) · Bᵀ` without forming the merged weight.
    pub fn forward(&self, x: &Matrix) -> Matrix {
        let low = x.dot(&self.adapter.a.t()).dot(&self.adapter.b.t());
        x.dot(&self.base.t()) + &(low * self.adapter.scaling)
    }
}

pub fn lora_apply<'a>(base: &'a Matrix, adapter: &'a LoraAdapter) -> Result<LoraWeight<'a>> {
    let (d_out, d_in) = base.dim();
    let r = adapter.rank();
    if adapter.a.dim() != (r, d_in) || adapter.b.dim() != (d_out, r) {
        return Err(Error::Shape(format!(
            "LoRA factors A {:?}, B {:?} do not fit a {d_out}x{d_in} weight",
            adapter.a.dim(),
            adapter.b.dim()
        )));
    }
    if r == 0 || r > d_in.min(d_out) {
        return Err(Error::Config(format!("LoRA rank {r} outside [1, {}]", d_in.min(d_out))));
    }
    Ok(LoraWeight { base, adapter })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            d_model: 128,
            d_ff: 512,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("decoder sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }
}

/// One pre-norm block. Weights are stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer {
    pub query: Matrix,
    pub key: Matrix,
    pub value: Matrix,
    pub output: Matrix,
    pub ff_in: Matrix,
    pub ff_in_bias: Matrix,
    pub ff_out: Matrix,
    pub ff_out_bias: Matrix,
}

impl DecoderLayer {
    pub fn projection(&self, target: LoraTarget) -> &Matrix {
        match target {
            LoraTarget::Query => &self.query,
            LoraTarget::Key => &self.key,
            LoraTarget::Value => &self.value,
            LoraTarget::Output => &self.output,
        }
    }
}

/// Reads five level logits from the final sequence position.
#[derive(Clone, Debug, PartialEq)]
pub struct Readout {
    /// `d_model × 5`
    pub weight: Matrix,
    /// `1 × 5`
    pub bias: Matrix,
}

/// Stand-in for a large language model: causal pre-norm transformer blocks
/// followed by a five-way read-out of the last position.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyDecoder {
    pub config: DecoderConfig,
    pub layers: Vec<DecoderLayer>,
    pub readout: Readout,
}

impl ToyDecoder {
    pub fn init<R: Rng>(config: DecoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut uniform = |rows: usize, cols: usize| {
            let bound = 1.0 / (cols as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let layers = (0..config.layers)
            .map(|_| DecoderLayer {
                query: uniform(d, d),
                key: uniform(d, d),
                value: uniform(d, d),
                output: uniform(d, d),
                ff_in: uniform(config.d_ff, d),
                ff_in_bias: Array2::zeros((1, config.d_ff)),
                ff_out: uniform(d, config.d_ff),
                ff_out_bias: Array2::zeros((1, d)),
            })
            .collect();
        let readout = Readout {
            weight: uniform(LEVELS, d).reversed_axes().as_standard_layout().to_owned(),
            bias: Array2::zeros((1, LEVELS)),
        };
        Ok(Self {
            config,
            layers,
            readout,
        })
    }

    pub fn d_model(&self) -> usize {
        self.config.d_model
    }

    /// A copy with every adapter folded into its base weight.
    pub fn merged(&self, lora: &LoraSet) -> Result<ToyDecoder> {
        let mut out = self.clone();
        for (layer, adapters) in out.layers.iter_mut().zip(&lora.layers) {
            for (&target, adapter) in adapters {
                let merged = lora_apply(layer.projection(target), adapter)?.merged();
                match target {
                    LoraTarget::Query => layer.query = merged,
                    LoraTarget::Key => layer.key = merged,
                    LoraTarget::Value => layer.value = merged,
                    LoraTarget::Output => layer.output = merged,
                }
            }
        }
        Ok(out)
    }
}

/// Adapters for every decoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraSet {
    pub config: LoraConfig,
    pub layers: Vec<BTreeMap<LoraTarget, LoraAdapter>>,
}

impl LoraSet {
    pub fn init<R: Rng>(decoder: &ToyDecoder, config: &LoraConfig, rng: &mut R) -> Result<Self> {
        let layers = decoder
            .layers
            .iter()
            .map(|layer| {
                let mut targets: Vec<LoraTarget> = config.targets.clone();
                targets.sort();
                targets.dedup();
                targets
                    .into_iter()
                    .map(|t| {
                        let (d_out, d_in) = layer.projection(t).dim();
                        Ok((t, LoraAdapter::init(d_in, d_out, config, rng)?))
                    })
                    .collect::<Result<BTreeMap<_, _>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn trainable_count(&self) -> usize {
        self.layers
            .iter()
            .flat_map(|l| l.values())
            .map(LoraAdapter::trainable_count)
            .sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AdapterVars {
    pub a: Var,
    pub b: Var,
    pub scaling: f64,
}

#[derive(Clone, Debug)]
pub struct LayerVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    pub output: Var,
    pub ff_in: Var,
    pub ff_in_bias: Var,
    pub ff_out: Var,
    pub ff_out_bias: Var,
    pub adapters: BTreeMap<LoraTarget, AdapterVars>,
}

/// Decoder weights placed on a tape.
#[derive(Clone, Debug)]
pub struct DecoderVars {
    pub heads: usize,
    pub d_model: usize,
    pub layers: Vec<LayerVars>,
    pub readout_weight: Var,
    pub readout_bias: Var,
}

impl DecoderVars {
    /// Base weights always enter as constants; `trainable` decides whether
    /// adapters and the read-out head receive gradients.
    pub fn place(tape: &mut Tape, decoder: &ToyDecoder, lora: Option<&LoraSet>, trainable: bool) -> Self {
        let leaf = |tape: &mut Tape, m: &Matrix, grad: bool| {
            if grad {
                tape.param(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let layers = decoder
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let adapters = lora
                    .and_then(|set| set.layers.get(i))
                    .map(|map| {
                        map.iter()
                            .map(|(&t, ad)| {
                                let vars = AdapterVars {
                                    a: leaf(tape, &ad.a, trainable),
                                    b: leaf(tape, &ad.b, trainable),
                                    scaling: ad.scaling,
                                };
                                (t, vars)
                            })
                            .collect()
                    })
                    .unwrap_or_default();
                LayerVars {
                    query: leaf(tape, &l.query, false),
                    key: leaf(tape, &l.key, false),
                    value: leaf(tape, &l.value, false),
                    output: leaf(tape, &l.output, false),
                    ff_in: leaf(tape, &l.ff_in, false),
                    ff_in_bias: leaf(tape, &l.ff_in_bias, false),
                    ff_out: leaf(tape, &l.ff_out, false),
                    ff_out_bias: leaf(tape, &l.ff_out_bias, false),
                    adapters,
                }
            })
            .collect();
        Self {
            heads: decoder.config.heads,
            d_model: decoder.config.d_model,
            layers,
            readout_weight: leaf(tape, &decoder.readout.weight, trainable),
            readout_bias: leaf(tape, &decoder.readout.bias, trainable),
        }
    }
}

fn project_with(tape: &mut Tape, x: Var, base: Var, adapter: Option<&AdapterVars>) -> Var {
    let y = tape.matmul_nt(x, base);
    match adapter {
        None => y,
        Some(ad) => {
            let low = tape.matmul_nt(x, ad.a);
            let up = tape.matmul_nt(low, ad.b);
            let up = tape.scale(up, ad.scaling);
            tape.add(y, up)
        }
    }
}

/// Runs the decoder over `x` (`L × d_model`) and returns the `1 × 5` logits.
pub fn decoder_forward_tape(tape: &mut Tape, x: Var, vars: &DecoderVars) -> Result<Var> {
    let width = tape.value(x).ncols();
    if width != vars.d_model {
        return Err(Error::Shape(format!(
            "sequence width {width} does not match decoder d_model {}",
            vars.d_model
        )));
    }
    if tape.value(x).nrows() == 0 {
        return Err(Error::Shape("empty sequence".into()));
    }
    let mut h = x;
    for l in &vars.layers {
        let n = tape.layer_norm(h);
        let q = project_with(tape, n, l.query, l.adapters.get(&LoraTarget::Query));
        let k = project_with(tape, n, l.key, l.adapters.get(&LoraTarget::Key));
        let v = project_with(tape, n, l.value, l.adapters.get(&LoraTarget::Value));
        let att = tape.attention(q, k, v, vars.heads, true);
        let att = project_with(tape, att, l.output, l.adapters.get(&LoraTarget::Output));
        h = tape.add(h, att);
        let n = tape.layer_norm(h);
        let f = tape.matmul_nt(n, l.ff_in);
        let f = tape.add_row(f, l.ff_in_bias);
        let f = tape.gelu(f);
        let f = tape.matmul_nt(f, l.ff_out);
        let f = tape.add_row(f, l.ff_out_bias);
        h = tape.add(h, f);
    }
    let h = tape.layer_norm(h);
    let last = tape.last_row(h);
    let logits = tape.matmul(last, vars.readout_weight);
    Ok(tape.add_row(logits, vars.readout_bias))
}

pub fn decoder_forward(
    seq: &MultiModalSequence,
    decoder: &ToyDecoder,
    lora: Option<&LoraSet>,
) -> Result<LevelLogits> {
    let mut tape = Tape::new();
    let vars = DecoderVars::place(&mut tape, decoder, lora, false);
    let x = tape.constant(seq.embeddings.clone());
    let out = decoder_forward_tape(&mut tape, x, &vars)?;
    LevelLogits::from_row(tape.value(out))
}
