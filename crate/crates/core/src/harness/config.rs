//! Flat `key = value` run configuration.
//!
//! ```text
//! # comments start with '#'
//! dataset = gauss2d
//! quant.weight_bits = 3
//! correction.lambda1 = 0.5
//! ```
//!
//! Every key except `dataset` has a default (see [`KEYS`]); unknown and
//! duplicate keys are rejected with their line number.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::correction::{CorrectionConfig, Variant};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::models::{Arch, DatasetKind, ModelSpec, TrainConfig};
use crate::quant::Scheme;
use crate::samplers::{SamplerConfig, SamplerKind};
use crate::tensors::Rng;

/// Recognised keys with their defaults (`auto` = chosen from the dataset).
pub const KEYS: &[(&str, &str)] = &[
    ("dataset", "<required>"),
    ("seed", "0"),
    ("out", "out"),
    ("data.size", "8192"),
    ("model.arch", "auto"),
    ("model.width", "auto"),
    ("model.hidden_layers", "auto"),
    ("model.time_embed_dim", "32"),
    ("schedule.steps", "1000"),
    ("schedule.beta_start", "0.0001"),
    ("schedule.beta_end", "0.02"),
    ("train.steps", "5000"),
    ("train.batch", "128"),
    ("train.lr", "0.001"),
    ("train.log_every", "100"),
    ("quant.weight_bits", "3"),
    ("quant.act_bits", "8"),
    ("quant.scheme", "minmax_symmetric"),
    ("quant.n_calib", "256"),
    ("correction.variant", "tac"),
    ("correction.lambda1", "0.5"),
    ("correction.lambda2", "0.01"),
    ("correction.k_threshold", "1"),
    ("correction.calib_batch", "64"),
    ("correction.signed_mask", "false"),
    ("correction.decoupled", "false"),
    ("correction.dpm_ibc", "false"),
    ("sampler.kind", "ddim"),
    ("sampler.steps", "100"),
    ("sampler.eta", "0"),
    ("sampler.n_samples", "10000"),
    ("eval.max_energy", "none"),
    ("sweep.lambda1", "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9"),
    ("hist.bins", "32"),
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuantConfig {
    pub weight_bits: u32,
    pub act_bits: u32,
    pub scheme: Scheme,
    pub n_calib: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerBlock {
    pub kind: SamplerKind,
    pub steps: usize,
    pub eta: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset: DatasetKind,
    pub seed: u64,
    pub out: PathBuf,
    pub data_size: usize,
    pub arch: Option<Arch>,
    pub width: Option<usize>,
    pub hidden_layers: Option<usize>,
    pub time_embed_dim: usize,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub quant: QuantConfig,
    pub variant: Variant,
    /// Numeric correction settings; the variant's flags are applied by [`RunConfig::correction`].
    pub correction: CorrectionConfig,
    pub sampler: SamplerBlock,
    pub max_energy: Option<f64>,
    pub sweep_lambda1: Vec<f64>,
    pub hist_bins: usize,
}

fn parse_value<T: FromStr>(line: Option<usize>, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(line, Some(key), format!("cannot parse `{value}`")))
}

fn parse_auto<T: FromStr>(line: Option<usize>, key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_value(line, key, value).map(Some)
    }
}

impl RunConfig {
    /// All defaults for `dataset`.
    pub fn new(dataset: DatasetKind) -> Self {
        let mut cfg = Self {
            dataset,
            seed: 0,
            out: PathBuf::new(),
            data_size: 0,
            arch: None,
            width: None,
            hidden_layers: None,
            time_embed_dim: 0,
            schedule: ScheduleConfig {
                steps: 0,
                beta_start: 0.0,
                beta_end: 0.0,
            },
            train: TrainConfig::default(),
            quant: QuantConfig {
                weight_bits: 0,
                act_bits: 0,
                scheme: Scheme::MinmaxSymmetric,
                n_calib: 0,
            },
            variant: Variant::Tac,
            correction: CorrectionConfig::default(),
            sampler: SamplerBlock {
                kind: SamplerKind::Ddim,
                steps: 0,
                eta: 0.0,
                n_samples: 0,
            },
            max_energy: None,
            sweep_lambda1: Vec::new(),
            hist_bins: 0,
        };
        for (key, value) in &KEYS[1..] {
            cfg.set_at(None, key, value).expect("defaults parse");
        }
        cfg
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(usize, &str, &str)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body
                .split_once('=')
                .ok_or_else(|| Error::config(Some(line), None, format!("expected `key = value`, got `{body}`")))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.iter().any(|(k, _)| *k == key) {
                return Err(Error::config(Some(line), Some(key), "unknown key"));
            }
            if let Some((first, _, _)) = entries.iter().find(|(_, k, _)| *k == key) {
                return Err(Error::config(Some(line), Some(key), format!("duplicate key (first set at line {first})")));
            }
            entries.push((line, key, value));
        }
        let (line, _, value) = entries
            .iter()
            .find(|(_, k, _)| *k == "dataset")
            .ok_or_else(|| Error::config(None, Some("dataset"), "missing required key"))?;
        let dataset = value
            .parse()
            .map_err(|_| Error::config(Some(*line), Some("dataset"), format!("unknown dataset `{value}`")))?;
        let mut cfg = Self::new(dataset);
        for (line, key, value) in entries {
            cfg.set_at(Some(line), key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config { line, key, msg } => Error::Config {
                line,
                key,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })
    }

    /// Override one key, as from a command-line flag.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(Error::config(None, Some(key), "unknown key"));
        }
        self.set_at(None, key, value)?;
        self.validate()
    }

    fn set_at(&mut self, line: Option<usize>, key: &str, value: &str) -> Result<()> {
        macro_rules! v {
            () => {
                parse_value(line, key, value)?
            };
        }
        match key {
            "dataset" => self.dataset = v!(),
            "seed" => self.seed = v!(),
            "out" => self.out = PathBuf::from(value),
            "data.size" => self.data_size = v!(),
            "model.arch" => self.arch = parse_auto(line, key, value)?,
            "model.width" => self.width = parse_auto(line, key, value)?,
            "model.hidden_layers" => self.hidden_layers = parse_auto(line, key, value)?,
            "model.time_embed_dim" => self.time_embed_dim = v!(),
            "schedule.steps" => self.schedule.steps = v!(),
            "schedule.beta_start" => self.schedule.beta_start = v!(),
            "schedule.beta_end" => self.schedule.beta_end = v!(),
            "train.steps" => self.train.steps = v!(),
            "train.batch" => self.train.batch = v!(),
            "train.lr" => self.train.lr = v!(),
            "train.log_every" => self.train.log_every = v!(),
            "quant.weight_bits" => self.quant.weight_bits = v!(),
            "quant.act_bits" => self.quant.act_bits = v!(),
            "quant.scheme" => self.quant.scheme = v!(),
            "quant.n_calib" => self.quant.n_calib = v!(),
            "correction.variant" => self.variant = v!(),
            "correction.lambda1" => self.correction.lambda1 = v!(),
            "correction.lambda2" => self.correction.lambda2 = v!(),
            "correction.k_threshold" => self.correction.k_threshold = v!(),
            "correction.calib_batch" => self.correction.calib_batch = v!(),
            "correction.signed_mask" => self.correction.signed_mask = v!(),
            "correction.decoupled" => self.correction.decoupled = v!(),
            "correction.dpm_ibc" => self.correction.dpm_ibc = v!(),
            "sampler.kind" => self.sampler.kind = v!(),
            "sampler.steps" => self.sampler.steps = v!(),
            "sampler.eta" => self.sampler.eta = v!(),
            "sampler.n_samples" => self.sampler.n_samples = v!(),
            "eval.max_energy" => self.max_energy = if value == "none" { None } else { Some(v!()) },
            "sweep.lambda1" => {
                self.sweep_lambda1 = value
                    .split(',')
                    .map(|s| parse_value(line, key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "hist.bins" => self.hist_bins = v!(),
            _ => return Err(Error::config(line, Some(key), "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: String| Err(Error::config(None, Some(key), msg));
        if self.data_size == 0 {
            return bad("data.size", "must be >= 1".into());
        }
        for (key, bits) in [("quant.weight_bits", self.quant.weight_bits), ("quant.act_bits", self.quant.act_bits)] {
            if !(2..=16).contains(&bits) && bits != 32 {
                return bad(key, format!("{bits} bits: expected 2..=16 or 32"));
            }
        }
        if self.quant.n_calib == 0 {
            return bad("quant.n_calib", "must be >= 1".into());
        }
        if self.sampler.n_samples == 0 {
            return bad("sampler.n_samples", "must be >= 1".into());
        }
        if self.hist_bins == 0 {
            return bad("hist.bins", "must be >= 1".into());
        }
        if self.sweep_lambda1.is_empty() {
            return bad("sweep.lambda1", "needs at least one value".into());
        }
        for &l in &self.sweep_lambda1 {
            if !(0.0..1.0).contains(&l) {
                return bad("sweep.lambda1", format!("lambda1 = {l} outside [0, 1)"));
            }
        }
        self.correction()
            .validate()
            .map_err(|e| Error::config(None, Some("correction"), e.to_string()))?;
        let schedule = self.schedule().map_err(|e| Error::config(None, Some("schedule"), e.to_string()))?;
        self.sampler_config(&schedule)
            .map_err(|e| Error::config(None, Some("sampler"), e.to_string()))?;
        self.train.validate().map_err(|e| Error::config(None, Some("train"), e.to_string()))?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        let io = self.dataset.io_shape();
        let arch = self.arch.unwrap_or(if io[1] * io[2] == 1 { Arch::Mlp } else { Arch::Conv });
        let mut spec = match arch {
            Arch::Mlp => ModelSpec::mlp(io),
            Arch::Conv => ModelSpec::conv(io),
        };
        spec.time_embed_dim = self.time_embed_dim;
        if let Some(w) = self.width {
            spec.width = w;
        }
        if let Some(l) = self.hidden_layers {
            spec.hidden_layers = l;
        }
        spec
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.schedule.steps, self.schedule.beta_start, self.schedule.beta_end)
    }

    pub fn sampler_config(&self, schedule: &NoiseSchedule) -> Result<SamplerConfig> {
        SamplerConfig::new(self.sampler.kind, schedule, self.sampler.steps, self.sampler.eta)
    }

    /// Correction settings with the configured variant applied.
    pub fn correction(&self) -> CorrectionConfig {
        self.correction.for_variant(self.variant)
    }

    /// Independent random stream for a named pipeline stage.
    pub fn stage_rng(&self, stage: &str) -> Rng {
        Rng::new(self.seed).derive(stage)
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_rng("train").next_u64(),
            ..self.train
        }
    }

    /// Fully resolved configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let spec = self.model_spec();
        let c = &self.correction;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("dataset", self.dataset.to_string());
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("data.size", self.data_size.to_string());
        kv("model.arch", spec.arch.to_string());
        kv("model.width", spec.width.to_string());
        kv("model.hidden_layers", spec.hidden_layers.to_string());
        kv("model.time_embed_dim", spec.time_embed_dim.to_string());
        kv("schedule.steps", self.schedule.steps.to_string());
        kv("schedule.beta_start", self.schedule.beta_start.to_string());
        kv("schedule.beta_end", self.schedule.beta_end.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.batch", self.train.batch.to_string());
        kv("train.lr", self.train.lr.to_string());
        kv("train.log_every", self.train.log_every.to_string());
        kv("quant.weight_bits", self.quant.weight_bits.to_string());
        kv("quant.act_bits", self.quant.act_bits.to_string());
        kv("quant.scheme", self.quant.scheme.to_string());
        kv("quant.n_calib", self.quant.n_calib.to_string());
        kv("correction.variant", self.variant.to_string());
        kv("correction.lambda1", c.lambda1.to_string());
        kv("correction.lambda2", c.lambda2.to_string());
        kv("correction.k_threshold", c.k_threshold.to_string());
        kv("correction.calib_batch", c.calib_batch.to_string());
        kv("correction.signed_mask", c.signed_mask.to_string());
        kv("correction.decoupled", c.decoupled.to_string());
        kv("correction.dpm_ibc", c.dpm_ibc.to_string());
        kv("sampler.kind", self.sampler.kind.to_string());
        kv("sampler.steps", self.sampler.steps.to_string());
        kv("sampler.eta", self.sampler.eta.to_string());
        kv("sampler.n_samples", self.sampler.n_samples.to_string());
        kv("eval.max_energy", self.max_energy.map_or("none".into(), |v| v.to_string()));
        kv(
            "sweep.lambda1",
            self.sweep_lambda1.iter().map(f64::to_string).collect::<Vec<_>>().join(","),
        );
        kv("hist.bins", self.hist_bins.to_string());
        out
    }
}
