//! The single declarative run configuration read by every command.
//!
//! Every section has documented defaults; keys that do not exist are a hard
//! error at any depth. Overrides are applied to the JSON tree before it is
//! deserialised, so they go through the same validation.

use std::path::Path;

use schemars::JsonSchema;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curation::CurationConfig;
use crate::error::{Error, Result};
use crate::eval::WindowConfig;
use crate::ffg::VideoOptions;
use crate::fsutil::sha256_hex;
use crate::guidance::GuidanceConfig;
use crate::metrics::FramePairs;
use crate::refine::RefineConfig;
use crate::train::TrainConfig;

/// Video-model training on a curated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct VideoTrainConfig {
    pub train: TrainConfig,
}

impl Default for VideoTrainConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                steps: 200,
                batch_size: 4,
                ..TrainConfig::default()
            },
        }
    }
}

/// Single-clip editing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EditConfig {
    pub guidance: GuidanceConfig,
    pub video: VideoOptions,
    pub window: WindowConfig,
}

/// Benchmarking on the held-out toy set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub seed: u64,
    pub clips: usize,
    pub frames: usize,
    pub side: usize,
    pub guidance: GuidanceConfig,
    pub video: VideoOptions,
    pub window: WindowConfig,
    pub embedder_seed: u64,
    pub frame_pairs: FramePairs,
    /// Also run the SMA × EPM grid.
    pub ablation: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            clips: 12,
            frames: 16,
            side: 32,
            guidance: GuidanceConfig::default(),
            video: VideoOptions::default(),
            window: WindowConfig::default(),
            embedder_seed: 0,
            frame_pairs: FramePairs::All,
            ablation: false,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize, JsonSchema)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub curation: CurationConfig,
    pub train: VideoTrainConfig,
    pub refine: RefineConfig,
    pub edit: EditConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_value(serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let c: Self = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    /// Reads `path` (or starts from defaults) and applies `key.path=json`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut v = match path {
            Some(p) => serde_json::from_slice(&std::fs::read(p)?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => Value::Object(Default::default()),
        };
        for o in overrides {
            apply_override(&mut v, o)?;
        }
        Self::from_value(v)
    }

    pub fn validate(&self) -> Result<()> {
        self.curation.validate()?;
        self.refine.validate()?;
        self.edit.guidance.validate()?;
        self.edit.window.validate()?;
        self.eval.guidance.validate()?;
        self.eval.window.validate()
    }

    /// Digest of the fully resolved configuration.
    pub fn digest(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("config serialises"))
    }

    pub fn schema() -> Value {
        serde_json::to_value(schemars::schema_for!(RunConfig)).expect("schema serialises")
    }
}

/// Sets `a.b.c` to the JSON value on the right of `=`; a right-hand side
/// that is not valid JSON is taken as a string.
pub fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key.path=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override path {path:?}")));
    }
    let mut cur = root;
    for k in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?;
        cur = obj.entry(k.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    cur.as_object_mut()
        .ok_or_else(|| Error::Config(format!("override {path:?} descends into a non-object")))?
        .insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}
