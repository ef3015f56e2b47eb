//! Flat `key = value` run configuration with dotted keys.
//!
//! `#` starts a comment. `train.preset` and `model.variant` are applied before
//! any other key regardless of position; everything else is last-write-wins.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::conditioning::Conditioning;
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::network::{build_variant, DimrConfig};
use crate::training::optim::AdamWConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl DiffusionConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.steps, self.beta_start, self.beta_end).map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub preset: Preset,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub steps: u64,
    pub ema: bool,
    pub ema_rate: f64,
    /// Probability of replacing the label with the null class.
    pub cond_dropout: f64,
}

impl TrainConfig {
    /// Large-scale defaults (64×64 uses a higher learning rate).
    pub fn paper(input_size: usize) -> Self {
        TrainConfig {
            preset: Preset::Paper,
            optim: AdamWConfig {
                lr: if input_size >= 64 { 3e-4 } else { 2e-4 },
                beta1: 0.99,
                beta2: 0.99,
                eps: 1e-8,
                weight_decay: 0.03,
                warmup: 5000,
            },
            batch_size: 1024,
            steps: 1_000_000,
            ema: false,
            ema_rate: 0.9999,
            cond_dropout: 0.1,
        }
    }

    pub fn desk() -> Self {
        TrainConfig {
            preset: Preset::Desk,
            optim: AdamWConfig { lr: 3e-4, beta1: 0.99, beta2: 0.99, eps: 1e-8, weight_decay: 0.03, warmup: 100 },
            batch_size: 16,
            steps: 2000,
            ema: false,
            ema_rate: 0.9999,
            cond_dropout: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.optim.warmup > self.steps && self.steps > 0 {
            return Err(Error::Config(format!(
                "train.warmup ({}) exceeds train.steps ({})",
                self.optim.warmup, self.steps
            )));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return Err(Error::Config(format!("train.cond_dropout must lie in [0, 1], got {}", self.cond_dropout)));
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return Err(Error::Config(format!("train.ema_rate must lie in [0, 1), got {}", self.ema_rate)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    GaussianBlobs { jitter: f64 },
    Checker,
    Folder(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleConfig {
    pub class: usize,
    pub guidance: f64,
    pub count: usize,
}

/// Everything a run needs, echoed verbatim into checkpoints.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub variant: String,
    pub model: DimrConfig,
    pub diffusion: DiffusionConfig,
    pub train: TrainConfig,
    pub data: DataSource,
    pub sample: SampleConfig,
    pub seed: u64,
}

impl Default for RunConfig {
    /// Two-class 16×16 blobs on a three-branch miniature network, desk preset.
    fn default() -> Self {
        RunConfig {
            variant: "custom".into(),
            model: DimrConfig::new(vec![4, 2, 2], vec![32, 16, 8], 16, 1, 2).expect("valid default"),
            diffusion: DiffusionConfig { steps: 1000, beta_start: 1e-4, beta_end: 0.02 },
            train: TrainConfig::desk(),
            data: DataSource::GaussianBlobs { jitter: 0.06 },
            sample: SampleConfig { class: 0, guidance: 3.0, count: 16 },
            seed: 0,
        }
    }
}

/// Every accepted key, in echo order.
pub const KEYS: &[&str] = &[
    "seed",
    "model.variant",
    "model.layers",
    "model.widths",
    "model.input_size",
    "model.in_channels",
    "model.num_classes",
    "model.conditioning",
    "model.heads",
    "model.transformer_ffn",
    "model.convnext_ffn",
    "model.convnext_kernel",
    "diffusion.steps",
    "diffusion.beta_start",
    "diffusion.beta_end",
    "train.preset",
    "train.lr",
    "train.weight_decay",
    "train.beta1",
    "train.beta2",
    "train.eps",
    "train.batch_size",
    "train.warmup",
    "train.steps",
    "train.ema",
    "train.ema_rate",
    "train.cond_dropout",
    "data.source",
    "data.path",
    "data.jitter",
    "sample.class",
    "sample.guidance",
    "sample.count",
];

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| num(key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {raw:?}", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Parses a `key=value` command-line override.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("override {s:?} is not key=value")))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl RunConfig {
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::Config(format!("unknown key {k:?}")));
            }
        }
        let mut cfg = RunConfig::default();
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        if let Some(v) = last("model.variant") {
            cfg.variant = v.to_string();
            if v != "custom" {
                cfg.model = build_variant(v)?;
            }
        }
        let size = match last("model.input_size") {
            Some(v) => num("model.input_size", v)?,
            None => cfg.model.input_size,
        };
        if let Some(v) = last("train.preset") {
            cfg.train = match v {
                "paper" => TrainConfig::paper(size),
                "desk" => TrainConfig::desk(),
                _ => return Err(Error::Config(format!("train.preset must be paper or desk, got {v:?}"))),
            };
        }
        let mut data_path: Option<PathBuf> = match &cfg.data {
            DataSource::Folder(p) => Some(p.clone()),
            _ => None,
        };
        let mut jitter = 0.06;
        let mut source = "gaussian-blobs".to_string();
        for (k, v) in pairs {
            let v = v.as_str();
            match k.as_str() {
                "model.variant" | "train.preset" => {}
                "seed" => cfg.seed = num(k, v)?,
                "model.layers" => cfg.model.layers = list(k, v)?,
                "model.widths" => cfg.model.widths = list(k, v)?,
                "model.input_size" => cfg.model.input_size = num(k, v)?,
                "model.in_channels" => cfg.model.in_channels = num(k, v)?,
                "model.num_classes" => cfg.model.num_classes = num(k, v)?,
                "model.conditioning" => cfg.model.conditioning = Conditioning::parse(v)?,
                "model.heads" => cfg.model.heads = if v == "auto" { None } else { Some(num(k, v)?) },
                "model.transformer_ffn" => cfg.model.transformer_ffn = num(k, v)?,
                "model.convnext_ffn" => cfg.model.convnext_ffn = num(k, v)?,
                "model.convnext_kernel" => cfg.model.convnext_kernel = num(k, v)?,
                "diffusion.steps" => cfg.diffusion.steps = num(k, v)?,
                "diffusion.beta_start" => cfg.diffusion.beta_start = num(k, v)?,
                "diffusion.beta_end" => cfg.diffusion.beta_end = num(k, v)?,
                "train.lr" => cfg.train.optim.lr = num(k, v)?,
                "train.weight_decay" => cfg.train.optim.weight_decay = num(k, v)?,
                "train.beta1" => cfg.train.optim.beta1 = num(k, v)?,
                "train.beta2" => cfg.train.optim.beta2 = num(k, v)?,
                "train.eps" => cfg.train.optim.eps = num(k, v)?,
                "train.batch_size" => cfg.train.batch_size = num(k, v)?,
                "train.warmup" => cfg.train.optim.warmup = num(k, v)?,
                "train.steps" => cfg.train.steps = num(k, v)?,
                "train.ema" => cfg.train.ema = num(k, v)?,
                "train.ema_rate" => cfg.train.ema_rate = num(k, v)?,
                "train.cond_dropout" => cfg.train.cond_dropout = num(k, v)?,
                "data.source" => source = v.to_string(),
                "data.path" => data_path = Some(PathBuf::from(v)),
                "data.jitter" => jitter = num(k, v)?,
                "sample.class" => cfg.sample.class = num(k, v)?,
                "sample.guidance" => cfg.sample.guidance = num(k, v)?,
                "sample.count" => cfg.sample.count = num(k, v)?,
                _ => unreachable!("keys checked above"),
            }
        }
        cfg.data = match source.as_str() {
            "gaussian-blobs" => DataSource::GaussianBlobs { jitter },
            "checker" => DataSource::Checker,
            "folder" => DataSource::Folder(
                data_path.ok_or_else(|| Error::Config("data.source = folder needs data.path".into()))?,
            ),
            other => {
                return Err(Error::Config(format!(
                    "data.source must be gaussian-blobs, checker or folder, got {other:?}"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_pairs(text)?)
    }

    /// Reads `path` (if any) and applies `overrides` after the file's own keys.
    pub fn load(path: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut pairs = match path {
            Some(p) => parse_pairs(&std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.diffusion.schedule()?;
        self.train.validate()?;
        if let DataSource::GaussianBlobs { jitter } = self.data {
            if !(0.0..0.25).contains(&jitter) {
                return Err(Error::Config(format!("data.jitter must lie in [0, 0.25), got {jitter}")));
            }
        }
        if self.sample.class > self.model.num_classes {
            return Err(Error::Config(format!(
                "sample.class {} out of range (null class is {})",
                self.sample.class, self.model.num_classes
            )));
        }
        if !(self.sample.guidance >= 0.0) || self.sample.count == 0 {
            return Err(Error::Config("sample.guidance must be >= 0 and sample.count >= 1".into()));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let o = &self.train.optim;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("model.variant", self.variant.clone());
        kv("model.layers", join(&m.layers));
        kv("model.widths", join(&m.widths));
        kv("model.input_size", m.input_size.to_string());
        kv("model.in_channels", m.in_channels.to_string());
        kv("model.num_classes", m.num_classes.to_string());
        kv("model.conditioning", m.conditioning.name().to_string());
        kv("model.heads", m.heads.map_or("auto".to_string(), |h| h.to_string()));
        kv("model.transformer_ffn", format!("{:?}", m.transformer_ffn));
        kv("model.convnext_ffn", format!("{:?}", m.convnext_ffn));
        kv("model.convnext_kernel", m.convnext_kernel.to_string());
        kv("diffusion.steps", self.diffusion.steps.to_string());
        kv("diffusion.beta_start", format!("{:?}", self.diffusion.beta_start));
        kv("diffusion.beta_end", format!("{:?}", self.diffusion.beta_end));
        kv("train.preset", self.train.preset.name().to_string());
        kv("train.lr", format!("{:?}", o.lr));
        kv("train.weight_decay", format!("{:?}", o.weight_decay));
        kv("train.beta1", format!("{:?}", o.beta1));
        kv("train.beta2", format!("{:?}", o.beta2));
        kv("train.eps", format!("{:?}", o.eps));
        kv("train.batch_size", self.train.batch_size.to_string());
        kv("train.warmup", o.warmup.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.ema", self.train.ema.to_string());
        kv("train.ema_rate", format!("{:?}", self.train.ema_rate));
        kv("train.cond_dropout", format!("{:?}", self.train.cond_dropout));
        match &self.data {
            DataSource::GaussianBlobs { jitter } => {
                kv("data.source", "gaussian-blobs".into());
                kv("data.jitter", format!("{jitter:?}"));
            }
            DataSource::Checker => kv("data.source", "checker".into()),
            DataSource::Folder(p) => {
                kv("data.source", "folder".into());
                kv("data.path", p.display().to_string());
            }
        }
        kv("sample.class", self.sample.class.to_string());
        kv("sample.guidance", format!("{:?}", self.sample.guidance));
        kv("sample.count", self.sample.count.to_string());
        s
    }
}
