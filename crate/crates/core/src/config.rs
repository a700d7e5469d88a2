//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! include = base.cfg
//! Learning Rate = 1e-4
//! Training Steps = 5k
//! phases = 1000:0.5, 500:0.99
//! ```
//!
//! Keys are case-insensitive and may be written either in snake_case or as
//! the long hyperparameter names ("Warm-up Steps", "Head Size", ...). Later
//! assignments override earlier ones; includes are resolved relative to the
//! including file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attribution::UnrollConfig;
use crate::error::{NnnError, Result};
use crate::model::ModelConfig;
use crate::probe::ProbeConfig;
use crate::train::{DecayShape, Phase, TrainConfig};

/// Long-form names and their canonical keys.
pub const ALIASES: &[(&str, &str)] = &[
    ("Learning Rate", "lr"),
    ("Warm-up Steps", "warmup_steps"),
    ("Training Steps", "steps"),
    ("Gradient Noise", "grad_noise"),
    ("Global Norm Clip", "clip_norm"),
    ("Initial Learning Rate", "initial_lr"),
    ("Decay Steps", "decay_steps"),
    ("L1 Regularization", "l1"),
    ("Prediction Head Layers", "head_layers"),
    ("Head Size", "head_width"),
    ("Transformer Blocks", "n_layers"),
    ("Transformer Feed Forward Size", "d_ff"),
    ("Balancing coefficient", "balancing"),
    ("Balancing coefficient, alpha", "balancing"),
    ("Balancing coefficient, α", "balancing"),
];

fn canonical(key: &str) -> String {
    let k = key.trim();
    for (long, short) in ALIASES {
        if long.eq_ignore_ascii_case(k) {
            return short.to_string();
        }
    }
    k.to_ascii_lowercase().replace(['-', ' '], "_")
}

/// Raw assignments in canonical-key form, last write wins.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RawConfig {
    pub values: BTreeMap<String, String>,
}

impl RawConfig {
    pub fn parse_str(text: &str, base: Option<&Path>) -> Result<Self> {
        let mut raw = Self::default();
        let mut stack = Vec::new();
        raw.absorb(text, base, &mut stack)?;
        Ok(raw)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut raw = Self::default();
        let mut stack = Vec::new();
        raw.absorb_file(path.as_ref(), &mut stack)?;
        Ok(raw)
    }

    fn absorb_file(&mut self, path: &Path, stack: &mut Vec<PathBuf>) -> Result<()> {
        let canon = path.canonicalize().map_err(|e| NnnError::Config(format!("{}: {e}", path.display())))?;
        if stack.contains(&canon) {
            return Err(NnnError::Config(format!("include cycle through {}", path.display())));
        }
        let text = std::fs::read_to_string(&canon)?;
        stack.push(canon.clone());
        let r = self.absorb(&text, canon.parent(), stack);
        stack.pop();
        r
    }

    fn absorb(&mut self, text: &str, base: Option<&Path>, stack: &mut Vec<PathBuf>) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| NnnError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = canonical(k);
            let value = v.trim().to_string();
            if key == "include" {
                let p = Path::new(&value);
                let p = match base {
                    Some(b) if p.is_relative() => b.join(p),
                    _ => p.to_path_buf(),
                };
                self.absorb_file(&p, stack)?;
            } else {
                self.values.insert(key, value);
            }
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.values.insert(canonical(key), value.into());
    }
}

fn parse_num(key: &str, v: &str) -> Result<f64> {
    let t = v.trim();
    let (body, mult) = match t.strip_suffix(['k', 'K']) {
        Some(b) => (b, 1e3),
        None => (t, 1.0),
    };
    body.trim()
        .parse::<f64>()
        .map(|x| x * mult)
        .map_err(|_| NnnError::Config(format!("{key}: `{v}` is not a number")))
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    let x = parse_num(key, v)?;
    if x < 0.0 || x.fract() != 0.0 {
        return Err(NnnError::Config(format!("{key}: `{v}` is not a non-negative integer")));
    }
    Ok(x as usize)
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.trim().to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(NnnError::Config(format!("{key}: `{v}` is not a boolean"))),
    }
}

fn parse_list(v: &str) -> Vec<String> {
    v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitConfig {
    pub test_weeks: usize,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_weeks: 26,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub lambdas: Vec<f64>,
    pub workers: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            lambdas: vec![0.0, 0.1, 1.0, 10.0, 100.0],
            workers: 1,
        }
    }
}

/// Everything a run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// `(steps, balancing)` stages; empty means one stage of `train.steps`.
    pub phases: Vec<Phase>,
    pub split: SplitConfig,
    pub sweep: SweepConfig,
    pub unroll: UnrollConfig,
    pub probe: ProbeConfig,
    /// Replace every input channel by its padded scalar volume.
    pub volume_only: bool,
    pub precision: Precision,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            phases: Vec::new(),
            split: SplitConfig::default(),
            sweep: SweepConfig::default(),
            unroll: UnrollConfig::default(),
            probe: ProbeConfig::default(),
            volume_only: false,
            precision: Precision::F32,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_raw(&RawConfig::load(path)?)
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse_str(text, None)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut c = Self::default();
        // The blanket seed goes first so specific seeds can refine it.
        if let Some(v) = raw.values.get("seed") {
            c.set("seed", v)?;
        }
        for (k, v) in raw.values.iter().filter(|(k, _)| k.as_str() != "seed") {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Applies one assignment; `key` may be in any accepted form.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let key = canonical(key);
        let k = key.as_str();
        let m = &mut self.model;
        let t = &mut self.train;
        match k {
            "n_layers" => m.n_layers = parse_usize(k, v)?,
            "d_ff" => m.d_ff = parse_usize(k, v)?,
            "head_layers" => m.head_layers = parse_usize(k, v)?,
            "head_width" => m.head_width = parse_usize(k, v)?,
            "balancing" => m.balancing = parse_num(k, v)?,
            "l1" => m.l1 = parse_num(k, v)?,
            "log_scale" => m.log_scale = parse_bool(k, v)?,
            "sales_channels" => m.sales_channels = parse_list(v),
            "geo_channel" => {
                m.geo_channel = match v.trim() {
                    "" | "none" => None,
                    s => Some(s.to_string()),
                }
            }
            "search_channel" => m.search_channel = v.trim().to_string(),
            "search_inputs" => m.search_inputs = parse_list(v),
            "model_seed" => m.seed = parse_usize(k, v)? as u64,
            "lookback_window" => m.attention.lookback_window = parse_usize(k, v)?,
            "temperature" => m.attention.temperature = parse_num(k, v)?,
            "channel_mixing" => m.attention.channel_mixing = parse_bool(k, v)?,
            "attention_by_channel" => m.attention.attention_by_channel = parse_bool(k, v)?,
            "attention_hidden" => m.attention.hidden = parse_usize(k, v)?,
            "out_proj_per_channel" => m.attention.out_proj_per_channel = parse_bool(k, v)?,
            "lr" => t.lr = parse_num(k, v)?,
            "warmup_steps" => t.warmup_steps = parse_usize(k, v)?,
            "steps" => t.steps = parse_usize(k, v)?,
            "initial_lr" => t.initial_lr = parse_num(k, v)?,
            "decay_steps" => t.decay_steps = parse_usize(k, v)?,
            "decay" => {
                t.decay = match v.trim().to_ascii_lowercase().as_str() {
                    "cosine" => DecayShape::Cosine,
                    "linear" => DecayShape::Linear,
                    "constant" => DecayShape::Constant,
                    _ => return Err(NnnError::Config(format!("decay: unknown shape `{v}`"))),
                }
            }
            "clip_norm" => t.clip_norm = parse_num(k, v)?,
            "grad_noise" => t.grad_noise = parse_num(k, v)?,
            "beta1" => t.beta1 = parse_num(k, v)?,
            "beta2" => t.beta2 = parse_num(k, v)?,
            "eps" => t.eps = parse_num(k, v)?,
            "train_seed" => t.seed = parse_usize(k, v)? as u64,
            "phases" => {
                self.phases = parse_list(v)
                    .iter()
                    .map(|p| {
                        let (s, a) = p
                            .split_once(':')
                            .ok_or_else(|| NnnError::Config(format!("phases: `{p}` is not `steps:balancing`")))?;
                        Ok(Phase {
                            steps: parse_usize(k, s)?,
                            balancing: parse_num(k, a)?,
                        })
                    })
                    .collect::<Result<_>>()?
            }
            "test_weeks" => self.split.test_weeks = parse_usize(k, v)?,
            "val_fraction" => self.split.val_fraction = parse_num(k, v)?,
            "split_seed" => self.split.seed = parse_usize(k, v)? as u64,
            "lambdas" => self.sweep.lambdas = parse_list(v).iter().map(|s| parse_num(k, s)).collect::<Result<_>>()?,
            "workers" => self.sweep.workers = parse_usize(k, v)?,
            "prefix" => self.unroll.prefix = parse_usize(k, v)?,
            "horizon" => self.unroll.horizon = parse_usize(k, v)?,
            "probe_channel" => self.probe.target = v.trim().to_string(),
            "probe_scale" => {
                self.probe.scale = match v.trim() {
                    "" | "auto" => None,
                    s => Some(parse_num(k, s)?),
                }
            }
            "probe_samples" => self.probe.samples = parse_usize(k, v)?,
            "probe_spread" => self.probe.spread = parse_num(k, v)?,
            "probe_seed" => self.probe.seed = parse_usize(k, v)? as u64,
            "volume_only" => self.volume_only = parse_bool(k, v)?,
            "precision" => {
                self.precision = match v.trim() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(NnnError::Config(format!("precision: `{v}` is not f32 or f64"))),
                }
            }
            "seed" => self.set_seed(parse_usize(k, v)? as u64),
            _ => return Err(NnnError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Sets every seed (model init, gradient noise, split, probe sampling).
    pub fn set_seed(&mut self, seed: u64) {
        self.model.seed = seed;
        self.train.seed = seed;
        self.split.seed = seed;
        self.probe.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        TrainConfig {
            steps: self.total_steps(),
            ..self.train.clone()
        }
        .validate()?;
        if !(0.0..1.0).contains(&self.split.val_fraction) {
            return Err(NnnError::Config("val_fraction must be in [0, 1)".into()));
        }
        if self.sweep.lambdas.iter().any(|l| !(*l >= 0.0)) {
            return Err(NnnError::Config("lambdas must be >= 0".into()));
        }
        Ok(())
    }

    /// Total optimizer steps across phases.
    pub fn total_steps(&self) -> usize {
        if self.phases.is_empty() {
            self.train.steps
        } else {
            self.phases.iter().map(|p| p.steps).sum()
        }
    }

    /// Canonical text form; parsing it back yields the same config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("n_layers", m.n_layers.to_string());
        kv("d_ff", m.d_ff.to_string());
        kv("head_layers", m.head_layers.to_string());
        kv("head_width", m.head_width.to_string());
        kv("balancing", m.balancing.to_string());
        kv("l1", m.l1.to_string());
        kv("log_scale", m.log_scale.to_string());
        kv("sales_channels", m.sales_channels.join(", "));
        kv("geo_channel", m.geo_channel.clone().unwrap_or_else(|| "none".into()));
        kv("search_channel", m.search_channel.clone());
        kv("search_inputs", m.search_inputs.join(", "));
        kv("model_seed", m.seed.to_string());
        kv("lookback_window", m.attention.lookback_window.to_string());
        kv("temperature", m.attention.temperature.to_string());
        kv("channel_mixing", m.attention.channel_mixing.to_string());
        kv("attention_by_channel", m.attention.attention_by_channel.to_string());
        kv("attention_hidden", m.attention.hidden.to_string());
        kv("out_proj_per_channel", m.attention.out_proj_per_channel.to_string());
        kv("lr", t.lr.to_string());
        kv("warmup_steps", t.warmup_steps.to_string());
        kv("steps", t.steps.to_string());
        kv("initial_lr", t.initial_lr.to_string());
        kv("decay_steps", t.decay_steps.to_string());
        kv("decay", format!("{:?}", t.decay).to_ascii_lowercase());
        kv("clip_norm", t.clip_norm.to_string());
        kv("grad_noise", t.grad_noise.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("eps", t.eps.to_string());
        kv("train_seed", t.seed.to_string());
        kv("phases", self.phases.iter().map(|p| format!("{}:{}", p.steps, p.balancing)).collect::<Vec<_>>().join(", "));
        kv("test_weeks", self.split.test_weeks.to_string());
        kv("val_fraction", self.split.val_fraction.to_string());
        kv("split_seed", self.split.seed.to_string());
        kv("lambdas", self.sweep.lambdas.iter().map(|l| l.to_string()).collect::<Vec<_>>().join(", "));
        kv("workers", self.sweep.workers.to_string());
        kv("prefix", self.unroll.prefix.to_string());
        kv("horizon", self.unroll.horizon.to_string());
        kv("probe_channel", self.probe.target.clone());
        kv("probe_scale", self.probe.scale.map_or("auto".into(), |v| v.to_string()));
        kv("probe_samples", self.probe.samples.to_string());
        kv("probe_spread", self.probe.spread.to_string());
        kv("probe_seed", self.probe.seed.to_string());
        kv("volume_only", self.volume_only.to_string());
        kv("precision", format!("{:?}", self.precision).to_ascii_lowercase());
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparameter_table_names_parse_verbatim() {
        let text = "\
Learning Rate = 1e-4
Warm-up Steps = 100
Training Steps = 5k
Gradient Noise = 1e-5
Global Norm Clip = 1.0
Initial Learning Rate = 1e-7
Decay Steps = 14k
L1 Regularization = 10
Prediction Head Layers = 5
Head Size = 64
Transformer Blocks = 2
Transformer Feed Forward Size = 512
Balancing coefficient, alpha = .5
";
        let c = RunConfig::parse_str(text).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.model, ModelConfig::default());
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("phases", "1000:0.5, 500:0.99").unwrap();
        c.set("geo_channel", "none").unwrap();
        c.set("probe_scale", "2.5").unwrap();
        c.set("precision", "f64").unwrap();
        c.set_seed(11);
        let back = RunConfig::parse_str(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.total_steps(), 1500);
    }

    #[test]
    fn includes_and_overrides() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("base.cfg"), "steps = 200\nl1 = 3 # trailing comment\n").unwrap();
        std::fs::write(dir.path().join("run.cfg"), "include = base.cfg\nl1 = 4\n").unwrap();
        let c = RunConfig::load(dir.path().join("run.cfg")).unwrap();
        assert_eq!(c.train.steps, 200);
        assert_eq!(c.model.l1, 4.0);

        std::fs::write(dir.path().join("a.cfg"), "include = b.cfg\n").unwrap();
        std::fs::write(dir.path().join("b.cfg"), "include = a.cfg\n").unwrap();
        assert!(matches!(RunConfig::load(dir.path().join("a.cfg")), Err(NnnError::Config(_))));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(RunConfig::parse_str("bogus = 1").is_err());
        assert!(RunConfig::parse_str("steps = ten").is_err());
        assert!(RunConfig::parse_str("steps").is_err());
        assert!(RunConfig::parse_str("warmup_steps = 10\nsteps = 5").is_err());
        assert!(RunConfig::parse_str("phases = 10").is_err());
    }
}
