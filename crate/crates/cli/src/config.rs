//! Run configuration addressed by flat dotted keys.
//!
//! Every leaf of [`RunConfig`] has a key such as `train.lr_head`. A config
//! file is a JSON object whose keys may be dotted, nested, or a mix of
//! both; `--key=value` overrides are applied on top of it. Unknown keys
//! are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mscgc_core::data::split::Protocol;
use mscgc_core::data::synth::SynthSpec;
use mscgc_core::data::Meta;
use mscgc_core::kan::KanConfig;
use mscgc_core::model::{ModelConfig, ProviderConfig, Variant};
use mscgc_core::train::TrainConfig;
use mscgc_core::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

/// Head hyperparameters. Channel, window, width and class counts come from
/// the dataset; `features` defaults to the raw width.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub features: Option<usize>,
    pub hidden: usize,
    pub out_dim: usize,
    pub harmonics: usize,
    pub provider: ProviderConfig,
    pub variant: Variant,
}

impl Default for ModelSection {
    fn default() -> Self {
        let kan = KanConfig::default();
        Self {
            features: None,
            hidden: kan.hidden,
            out_dim: kan.out_dim,
            harmonics: kan.harmonics,
            provider: ProviderConfig::default(),
            variant: Variant::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSection {
    pub protocol: Protocol,
    pub ratios: [usize; 3],
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { protocol: Protocol::WithinSession, ratios: [10, 5, 5] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub dir: PathBuf,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("data") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    /// Parent of the timestamped run directories.
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("runs") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub checkpoint: Option<PathBuf>,
    pub batch: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { checkpoint: None, batch: 256 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretSection {
    pub checkpoint: Option<PathBuf>,
    /// Test samples used for saliency and the KAN probe.
    pub samples: usize,
}

impl Default for InterpretSection {
    fn default() -> Self {
        Self { checkpoint: None, samples: 128 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckSection {
    /// Perturb the backward pass of the named check.
    pub corrupt: Option<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSection,
    pub train: TrainConfig,
    pub split: SplitSection,
    pub synth: SynthSpec,
    pub data: DataSection,
    pub output: OutputSection,
    pub ablate: AblateSection,
    pub eval: EvalSection,
    pub interpret: InterpretSection,
    pub gradcheck: GradcheckSection,
}

impl RunConfig {
    /// Defaults, then the optional file, then `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut flat = flatten(&serde_json::to_value(Self::default())?);
        if let Some(path) = file {
            let text = fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            let value: Value = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("config {} is not valid JSON: {e}", path.display())))?;
            if !value.is_object() {
                return Err(Error::Config(format!("config {} must be a JSON object", path.display())));
            }
            for (key, v) in flatten(&value) {
                set_known(&mut flat, key, v)?;
            }
        }
        for arg in overrides {
            let (key, v) = parse_override(arg)?;
            set_known(&mut flat, key, v)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(unflatten(&flat)).map_err(|e| Error::Config(format!("invalid config value: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.split.ratios.iter().sum::<usize>() == 0 {
            return Err(Error::Config("split.ratios must not all be zero".into()));
        }
        if self.eval.batch == 0 || self.interpret.samples == 0 {
            return Err(Error::Config("eval.batch and interpret.samples must be positive".into()));
        }
        if self.ablate.seeds.is_empty() {
            return Err(Error::Config("ablate.seeds must not be empty".into()));
        }
        Ok(())
    }

    /// The effective configuration as sorted dotted keys.
    pub fn to_flat(&self) -> Map<String, Value> {
        let value = serde_json::to_value(self).expect("run config serialises");
        flatten(&value).into_iter().collect()
    }

    /// Model for a dataset with the given metadata. Dropout, kernels and
    /// seed follow the training section.
    pub fn model_config(&self, meta: &Meta, variant: Variant, seed: u64) -> Result<ModelConfig> {
        let [_, channels, windows, raw_width] = meta.shapes.samples[..] else {
            return Err(Error::Config(format!("dataset samples have shape {:?}, expected [N, C, S, P]", meta.shapes.samples)));
        };
        let cfg = ModelConfig {
            channels,
            windows,
            raw_width,
            features: self.model.features.unwrap_or(raw_width),
            classes: meta.classes,
            kernels: self.train.kernels.clone(),
            dropout: self.train.dropout,
            kan: KanConfig { hidden: self.model.hidden, out_dim: self.model.out_dim, harmonics: self.model.harmonics },
            provider: self.model.provider,
            variant,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Leaves of a JSON object keyed by their dotted path. Arrays and nulls
/// are leaves.
pub fn flatten(value: &Value) -> BTreeMap<String, Value> {
    fn walk(v: &Value, prefix: &str, out: &mut BTreeMap<String, Value>) {
        match v {
            Value::Object(map) if !map.is_empty() || prefix.is_empty() => {
                for (k, child) in map {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(child, &key, out);
                }
            }
            _ => {
                out.insert(prefix.to_string(), v.clone());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(value, "", &mut out);
    out
}

pub fn unflatten(flat: &BTreeMap<String, Value>) -> Value {
    let mut root = Map::new();
    for (key, v) in flat {
        let mut node = &mut root;
        let mut parts = key.split('.').peekable();
        while let Some(part) = parts.next() {
            if parts.peek().is_none() {
                node.insert(part.to_string(), v.clone());
            } else {
                node = node
                    .entry(part.to_string())
                    .or_insert_with(|| Value::Object(Map::new()))
                    .as_object_mut()
                    .expect("dotted prefixes are objects");
            }
        }
    }
    Value::Object(root)
}

fn set_known(flat: &mut BTreeMap<String, Value>, key: String, value: Value) -> Result<()> {
    match flat.get_mut(&key) {
        Some(slot) => {
            *slot = value;
            Ok(())
        }
        None => Err(Error::Config(format!("unknown config key `{key}`"))),
    }
}

/// `key=value`, with an optional leading `--`. The value is read as JSON
/// and falls back to a plain string.
pub fn parse_override(arg: &str) -> Result<(String, Value)> {
    let body = arg.strip_prefix("--").unwrap_or(arg);
    let Some((key, raw)) = body.split_once('=') else {
        return Err(Error::Config(format!("override `{arg}` is not of the form --key=value")));
    };
    if key.is_empty() {
        return Err(Error::Config(format!("override `{arg}` has an empty key")));
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}
