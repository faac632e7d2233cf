//! Training run configuration as a flat JSON object with keys namespaced by
//! module, e.g. `{"training.lr_start": 1e-4, "dataset.crop_size": [128, 128]}`.

use std::collections::BTreeMap;
use std::path::Path;

use ged_core::dataset::AugmentConfig;
use ged_core::denoiser::{FinetuneMode, UNetConfig};
use ged_core::training::{LoopConfig, OptimConfig};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSection {
    #[serde(flatten)]
    pub optim: OptimConfig,
    pub finetune: FinetuneMode,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainingSection {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            finetune: FinetuneMode::Partial,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub training: TrainingSection,
    pub dataset: AugmentConfig,
    pub denoiser: UNetConfig,
}

fn section<T: Serialize>(name: &str, value: &T, out: &mut BTreeMap<String, Value>) {
    let Value::Object(fields) = serde_json::to_value(value).expect("config serializes") else {
        unreachable!("config sections are structs")
    };
    for (k, v) in fields {
        out.insert(format!("{name}.{k}"), v);
    }
}

fn rebuild<T: for<'de> Deserialize<'de>>(name: &str, flat: &BTreeMap<String, Value>) -> Result<T, String> {
    let prefix = format!("{name}.");
    let fields: Map<String, Value> = flat
        .iter()
        .filter_map(|(k, v)| k.strip_prefix(&prefix).map(|f| (f.to_string(), v.clone())))
        .collect();
    serde_json::from_value(Value::Object(fields)).map_err(|e| format!("invalid `{name}` settings: {e}"))
}

impl RunConfig {
    pub fn to_flat(&self) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        section("training", &self.training, &mut out);
        section("dataset", &self.dataset, &mut out);
        section("denoiser", &self.denoiser, &mut out);
        out
    }

    /// Overrides keys present in `overrides`; unknown keys are rejected.
    pub fn merged(&self, overrides: &Map<String, Value>) -> Result<Self, String> {
        let mut flat = self.to_flat();
        for (k, v) in overrides {
            match flat.get_mut(k) {
                Some(slot) => *slot = v.clone(),
                None => return Err(format!("unknown config key `{k}`")),
            }
        }
        Ok(Self {
            training: rebuild("training", &flat)?,
            dataset: rebuild("dataset", &flat)?,
            denoiser: rebuild("denoiser", &flat)?,
        })
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
        let value: Value = serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
        let Value::Object(map) = value else {
            return Err(format!("{}: expected a JSON object", path.display()));
        };
        Self::default().merged(&map)
    }

    pub fn loop_config(&self) -> LoopConfig {
        LoopConfig {
            augment: self.dataset.clone(),
            seed: self.training.seed,
            checkpoint_every: self.training.checkpoint_every,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_flat()).expect("config serializes")
    }
}
