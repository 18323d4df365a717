//! Run configuration for the whole pipeline.
//!
//! A JSON file only needs the fields it changes: it is merged over
//! [`RunConfig::default`] before parsing, so nested objects may be partial.
//! Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::ModelConfig;
use crate::microsim::SimConfig;
use crate::scales::Scales;
use crate::train::StageConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub n_t: usize,
    pub n_x: usize,
    /// Directory for `pipeline` and `study` outputs.
    pub out_dir: PathBuf,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_t: 256,
            n_x: 256,
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub seeds: Vec<u64>,
    pub configs: Vec<ModelConfig>,
    /// Scenarios to study, one table block each; empty means `sim` alone.
    pub scenarios: Vec<SimConfig>,
    /// Worker threads; 0 uses every available core.
    pub jobs: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            seeds: (0..10).collect(),
            configs: ModelConfig::ALL.to_vec(),
            scenarios: vec![SimConfig::equilibrium(), SimConfig::transient()],
            jobs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scales: Scales,
    pub sim: SimConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub eval: EvalConfig,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    /// The 6.2 km, 40 min ring at mean density 0.4 in the equilibrium regime.
    fn default() -> Self {
        Self {
            scales: Scales::default(),
            sim: SimConfig::equilibrium(),
            stage1: StageConfig::stage1(),
            stage2: StageConfig::stage2(),
            eval: EvalConfig::default(),
            study: StudyConfig::default(),
        }
    }
}

/// Recursively overlays `patch` on `base`. Objects merge key by key; any
/// other value replaces the base value, as does an object carrying a
/// `kind` tag (a tagged variant is replaced whole).
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) if !p.contains_key("kind") => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Parses a (possibly partial) JSON document over the defaults and
    /// validates the result.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text)?;
        if !patch.is_object() {
            return Err(Error::config("configuration must be a JSON object"));
        }
        let mut base = serde_json::to_value(RunConfig::default())?;
        merge(&mut base, patch);
        let config: RunConfig = serde_json::from_value(base)?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn to_json_string(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.scales.validate()?;
        self.sim.validate(&self.scales)?;
        self.stage1.validate(1)?;
        self.stage2.validate(2)?;
        if self.eval.n_t < 2 || self.eval.n_x == 0 {
            return Err(Error::config("eval grid needs n_t >= 2 and n_x >= 1"));
        }
        if self.study.seeds.is_empty() || self.study.configs.is_empty() {
            return Err(Error::config("study needs at least one seed and one configuration"));
        }
        for sim in &self.study.scenarios {
            sim.validate(&self.scales)?;
        }
        Ok(())
    }

    /// Sets the training seed of both stages.
    pub fn with_training_seed(mut self, seed: u64) -> Self {
        self.stage1.seed = seed;
        self.stage2.seed = seed;
        self
    }
}
