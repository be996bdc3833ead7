//! Run configuration: TOML on disk, dotted-key overrides, and a content
//! hash that names the run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masks::{AlphaSchedule, Denominator};
use crate::model::DEFAULT_EMA_DECAY;
use crate::masks::DEFAULT_PROTO_DECAY;
use crate::nn::ArchDescriptor;
use crate::replay::ComposeParams;
use crate::trainer::{Flags, PseudoLabelMode, SourceTrainConfig, StepConfig};

/// Environment variable that relocates the default run root.
pub const RUN_ROOT_ENV: &str = "SEQW_RUN_ROOT";
pub const DEFAULT_RUN_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub momentum: f32,
    pub ema_decay: f32,
    pub proto_decay: f32,
    pub alpha_start: f32,
    pub alpha_end: f32,
    pub compose: ComposeParams,
    pub denominator: Denominator,
    pub pseudo_label: PseudoLabelMode,
    pub log_every: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            iters: 200,
            batch_size: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            ema_decay: DEFAULT_EMA_DECAY,
            proto_decay: DEFAULT_PROTO_DECAY,
            alpha_start: 0.8,
            alpha_end: 0.2,
            compose: ComposeParams::default(),
            denominator: Denominator::default(),
            pseudo_label: PseudoLabelMode::default(),
            log_every: 10,
        }
    }
}

/// Which network is scored after each step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalModel {
    Student,
    #[default]
    Teacher,
}

/// Per-domain overrides of the shared adaptation settings.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepOverride {
    pub iters: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Dataset manifest written by `generate-data`.
    pub manifest: Option<PathBuf>,
    /// Target domains in adaptation order.
    pub domains: Vec<String>,
    pub flags: Flags,
    pub arch: ArchDescriptor,
    pub source: SourceTrainConfig,
    pub adapt: AdaptConfig,
    pub steps: BTreeMap<String, StepOverride>,
    /// Starting weights; required when source data is unavailable.
    pub init_checkpoint: Option<PathBuf>,
    pub evaluate: EvalModel,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            manifest: None,
            domains: ["night", "rain", "fog", "snow"].map(String::from).to_vec(),
            flags: Flags::full(),
            arch: ArchDescriptor::default(),
            source: SourceTrainConfig::default(),
            adapt: AdaptConfig::default(),
            steps: BTreeMap::new(),
            init_checkpoint: None,
            evaluate: EvalModel::default(),
        }
    }
}

/// Named mechanism combinations.
pub fn ablation_flags(name: &str) -> Result<Flags> {
    let base = Flags::baseline();
    let on = |m: bool, f: bool, b: bool, r: bool| Flags {
        use_model_mask: m,
        use_feature_mask: f,
        use_blending: b,
        use_replay: r,
        ..base
    };
    Ok(match name {
        "none" | "full" => Flags::full(),
        "baseline" => base,
        "model" => on(true, false, false, false),
        "model+feature" => on(true, true, false, false),
        "model+feature+replay" => on(true, true, false, true),
        "blending" => on(false, false, true, false),
        other => {
            return Err(Error::Config(format!(
                "unknown ablation '{other}' (expected none, full, baseline, model, model+feature, model+feature+replay, blending)"
            )))
        }
    })
}

/// Preset name of a flag set, with a suffix when source data is off.
pub fn flags_name(flags: &Flags) -> String {
    let mut with = *flags;
    with.with_source = true;
    let base = ABLATION_NAMES
        .iter()
        .find(|n| ablation_flags(n).ok() == Some(with))
        .map_or("custom", |n| n);
    if flags.with_source {
        base.to_string()
    } else {
        format!("{base} w/o source")
    }
}

pub const ABLATION_NAMES: [&str; 6] = ["full", "baseline", "model", "model+feature", "model+feature+replay", "blending"];

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Applies `a.b.c=value` overrides. Values are read as TOML literals,
    /// falling back to a bare string.
    pub fn with_overrides<S: AsRef<str>>(&self, sets: &[S]) -> Result<Self> {
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for s in sets {
            let s = s.as_ref();
            let (key, raw) = s
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{s}' is not key=value")))?;
            let value = parse_literal(raw.trim());
            let parts: Vec<&str> = key.trim().split('.').collect();
            let mut node = &mut root;
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("'{key}' does not name a table entry")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: RunConfig = root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::Config("at least one target domain is required".into()));
        }
        for (i, d) in self.domains.iter().enumerate() {
            if self.domains[..i].contains(d) {
                return Err(Error::Config(format!("domain '{d}' listed twice")));
            }
        }
        for k in self.steps.keys() {
            if !self.domains.contains(k) {
                return Err(Error::Config(format!("override for unknown domain '{k}'")));
            }
        }
        self.arch.validate()?;
        if self.adapt.batch_size == 0 || self.source.batch_size == 0 {
            return Err(Error::Config("batch sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adapt.ema_decay) || !(0.0..1.0).contains(&self.adapt.proto_decay) {
            return Err(Error::Config("decays must lie in [0, 1)".into()));
        }
        self.adapt.compose.validate()?;
        self.alpha_schedule(self.adapt.iters).validate()
    }

    fn alpha_schedule(&self, iters: usize) -> AlphaSchedule {
        AlphaSchedule {
            alpha_start: self.adapt.alpha_start,
            alpha_end: self.adapt.alpha_end,
            total_iters: iters,
        }
    }

    /// Settings for 1-based step `k`.
    pub fn step_config(&self, k: usize) -> Result<StepConfig> {
        let domain = self
            .domains
            .get(k.wrapping_sub(1))
            .ok_or_else(|| Error::invalid(format!("no step {k} in a {}-domain sequence", self.domains.len())))?;
        let o = self.steps.get(domain).cloned().unwrap_or_default();
        let iters = o.iters.unwrap_or(self.adapt.iters);
        Ok(StepConfig {
            step_index: k,
            domain: domain.clone(),
            iters,
            batch_size: o.batch_size.unwrap_or(self.adapt.batch_size),
            learning_rate: o.learning_rate.unwrap_or(self.adapt.learning_rate),
            momentum: self.adapt.momentum,
            alpha_schedule: self.alpha_schedule(iters),
            compose_params: self.adapt.compose,
            flags: self.flags,
            denominator: self.adapt.denominator,
            pseudo_label: self.adapt.pseudo_label,
            seed: self.seed,
            log_every: self.adapt.log_every,
        })
    }

    /// Key-sorted JSON, the form that is hashed.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json maps are ordered by key
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Directory for a run: an explicit path, else `<root>/<hash prefix>`.
pub fn run_dir(explicit: Option<&Path>, hash: &str) -> PathBuf {
    match explicit {
        Some(p) => p.to_path_buf(),
        None => {
            let root = std::env::var_os(RUN_ROOT_ENV)
                .map(PathBuf::from)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_RUN_ROOT));
            root.join(&hash[..12])
        }
    }
}
