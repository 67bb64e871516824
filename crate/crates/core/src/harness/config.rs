//! Experiment configuration: TOML file, dotted overrides, validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agents::{AdaptConfig, ExploreConfig, PlanConfig};
use crate::analysis::{ProbeConfig, RadiusChoice, DEFAULT_NEIGHBORS};
use crate::episodic::QueryMix;
use crate::error::{Error, Result};
use crate::hexgrid::{EnvConfig, StateSplit};
use crate::model::{LossConfig, ModelConfig, TrainConfig};
use crate::seed::derive_seed;

/// Environment variable that relocates relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "ESWM_OUTPUT_ROOT";

/// Optimiser settings; the environment and seed come from the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingBlock {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_clip: f64,
    pub log_every: usize,
    pub loss: LossConfig,
    pub mix: QueryMix,
}

impl Default for TrainingBlock {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainingBlock {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
            log_every: t.log_every,
            loss: t.loss,
            mix: t.mix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AgentBlock {
    pub plan: PlanConfig,
    pub explore: ExploreConfig,
    pub adapt: AdaptConfig,
    /// Rooms used by explore, navigate, heuristic and adapt.
    pub envs: usize,
    /// Start/goal pairs per room.
    pub pairs_per_env: usize,
    /// Real steps for an exploration episode.
    pub explore_steps: usize,
    /// Step cap for greedy latent navigation.
    pub greedy_cap: usize,
    /// Percentile grid size for latent radius selection.
    pub radius_candidates: usize,
    /// Layer whose activations build the latent graph; `None` uses the
    /// model's middle layer.
    pub layer: Option<usize>,
}

impl Default for AgentBlock {
    fn default() -> Self {
        AgentBlock {
            plan: PlanConfig::default(),
            explore: ExploreConfig::default(),
            adapt: AdaptConfig::default(),
            envs: 50,
            pairs_per_env: 20,
            explore_steps: 40,
            greedy_cap: 15,
            radius_candidates: 10,
            layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisBlock {
    pub split: StateSplit,
    pub eval_trials: usize,
    pub entropy_trials: usize,
    pub kl_trials: usize,
    pub kl_min_length: usize,
    pub density_extras: Vec<usize>,
    pub density_trials: usize,
    pub latent_envs: usize,
    pub latent_pairs_per_env: usize,
    pub latent_radius: RadiusChoice,
    pub isomap_neighbors: usize,
    pub isomap_banks: usize,
    pub isomap_per_bank: usize,
    pub probe: ProbeConfig,
}

impl Default for AnalysisBlock {
    fn default() -> Self {
        AnalysisBlock {
            split: StateSplit::Test,
            eval_trials: 3000,
            entropy_trials: 5000,
            kl_trials: 2000,
            kl_min_length: 3,
            density_extras: vec![0, 2, 4, 8, 16, 64],
            density_trials: 2000,
            latent_envs: 75,
            latent_pairs_per_env: 20,
            latent_radius: RadiusChoice::Auto(10),
            isomap_neighbors: DEFAULT_NEIGHBORS,
            isomap_banks: 50,
            isomap_per_bank: 20,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Root seed; every component seed is derived from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Checkpoint to load; defaults to `model.ckpt` in the output directory.
    pub checkpoint: Option<PathBuf>,
    pub env: EnvConfig,
    pub model: ModelConfig,
    pub train: TrainingBlock,
    pub agent: AgentBlock,
    pub analysis: AnalysisBlock,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            output_dir: PathBuf::from("runs/desk"),
            checkpoint: None,
            env: EnvConfig::random_wall(2),
            model: ModelConfig::desk(),
            train: TrainingBlock::default(),
            agent: AgentBlock::default(),
            analysis: AnalysisBlock::default(),
        }
    }
}

/// Per-component seeds derived from the root seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub init: u64,
    pub train: u64,
    pub eval: u64,
    pub agent: u64,
    pub probe: u64,
}

impl ExperimentConfig {
    pub fn seeds(&self) -> Seeds {
        let s = |name| derive_seed(self.seed, name, 0);
        Seeds { root: self.seed, init: s("init"), train: s("train"), eval: s("eval"), agent: s("agent"), probe: s("probe") }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            iterations: t.iterations,
            batch_size: t.batch_size,
            lr: t.lr,
            weight_decay: t.weight_decay,
            beta1: t.beta1,
            beta2: t.beta2,
            eps: t.eps,
            grad_clip: t.grad_clip,
            seed: self.seeds().train,
            log_every: t.log_every,
            loss: t.loss,
            env: self.env.clone(),
            mix: t.mix,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let field = |name: &str, e: Error| match e {
            Error::InvalidConfig(m) => Error::InvalidConfig(format!("{name}: {m}")),
            other => other,
        };
        self.env.validate().map_err(|e| field("env", e))?;
        self.model.validate().map_err(|e| field("model", e))?;
        self.train.mix.validate().map_err(|e| field("train.mix", e))?;
        if self.model.state_vocab != self.env.vocab_size {
            return Err(Error::InvalidConfig(format!(
                "model.state_vocab ({}) must equal env.vocab_size ({})",
                self.model.state_vocab, self.env.vocab_size
            )));
        }
        if self.model.state_encoding != self.env.state_encoding {
            return Err(Error::InvalidConfig("model.state_encoding must equal env.state_encoding".into()));
        }
        let positive = [
            ("train.iterations", self.train.iterations),
            ("train.batch_size", self.train.batch_size),
            ("analysis.eval_trials", self.analysis.eval_trials),
            ("analysis.isomap_neighbors", self.analysis.isomap_neighbors),
            ("agent.envs", self.agent.envs),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if !(self.train.lr > 0.0 && self.train.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("train.lr must be positive, got {}", self.train.lr)));
        }
        Ok(())
    }

    /// Output directory after applying [`OUTPUT_ROOT_VAR`] to relative paths.
    pub fn resolved_output_dir(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_ROOT_VAR) {
            Some(root) if self.output_dir.is_relative() => Path::new(&root).join(&self.output_dir),
            _ => self.output_dir.clone(),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.resolved_output_dir().join("model.ckpt"))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the resolved TOML with output locations cleared, so the
    /// same experiment hashes equal wherever it is written.
    pub fn hash(&self) -> String {
        let content = ExperimentConfig { output_dir: PathBuf::new(), checkpoint: None, ..self.clone() };
        hex_digest(content.to_toml().as_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Parses `value` as a TOML literal, falling back to a bare string.
fn parse_value(value: &str) -> toml::Value {
    let doc = format!("v = {value}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(value.to_string()),
    }
}

/// Sets `path` (dotted) to `value` inside `table`, creating tables on the way.
pub fn apply_override(table: &mut toml::Table, path: &str, value: &str) -> Result<()> {
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::InvalidConfig(format!("malformed override key `{path}`")));
    }
    let (last, parents) = keys.split_last().expect("non-empty");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::InvalidConfig(format!("override `{path}`: `{k}` is not a table")))?;
    }
    cur.insert(last.to_string(), parse_value(value));
    Ok(())
}

/// Builds a config from optional TOML text and `key=value` overrides.
pub fn load_config_str(text: Option<&str>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = match text {
        Some(t) => t.parse().map_err(|e: toml::de::Error| Error::InvalidConfig(e.to_string()))?,
        None => toml::Table::new(),
    };
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidConfig(format!("override `{o}` is not key=value")))?;
        apply_override(&mut table, k.trim(), v.trim())?;
    }
    // round-trip through text so errors point at the offending key
    let text = toml::to_string(&table).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let cfg: ExperimentConfig = toml::from_str(&text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = match path {
        Some(p) => Some(std::fs::read_to_string(p)?),
        None => None,
    };
    load_config_str(text.as_deref(), overrides)
}
