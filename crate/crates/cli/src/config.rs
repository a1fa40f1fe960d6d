use std::path::{Path, PathBuf};

use anyhow::Context;
use maskrdt::model::ModelConfig;
use maskrdt::simulator::SimConfig;
use maskrdt::training::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub episodes: usize,
    /// Exploration rate of the scripted expert.
    pub eps: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            eps: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub k: usize,
    /// Conditioning return; defaults to `r_max × episode_len`.
    pub target_return: Option<f64>,
    pub sample: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            k: maskrdt::metrics::DEFAULT_K,
            target_return: None,
            sample: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub data: PathBuf,
    pub items: PathBuf,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub report: PathBuf,
    pub bench: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data: "data.jsonl".into(),
            items: "items.jsonl".into(),
            checkpoint: "model.ckpt".into(),
            metrics: "metrics.csv".into(),
            report: "eval.csv".into(),
            bench: "bench.csv".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub sim: SimConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.sim.seed = seed;
        self.train.seed = seed;
    }

    /// Prints the effective configuration to stderr.
    pub fn announce(&self) {
        match toml::to_string(self) {
            Ok(s) => eprintln!("# effective configuration\n{s}"),
            Err(e) => eprintln!("# effective configuration unavailable: {e}"),
        }
    }
}
