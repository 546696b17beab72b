//! Flat run configuration.
//!
//! One TOML file of `key = value` lines holds every model, training, data and
//! evaluation setting. Unknown keys are rejected. Any key can be overridden
//! through an environment variable named `DUALREC_<KEY>` (upper case), whose
//! value is parsed as a TOML value and falls back to a plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use dualrec::model::{DropoutSite, FusionMode, GraphMode, ModelConfig, SideMode, SliceInput};
use dualrec::synthetic::{Pattern, SyntheticConfig};
use dualrec::training::{TrainConfig, Window};

use crate::error::{CliError, Result};

pub const ENV_PREFIX: &str = "DUALREC_";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // Data source: exactly one of `data_dir`, `input`, `synthetic`.
    /// Prepared dataset directory.
    pub data_dir: Option<PathBuf>,
    /// Raw `user<TAB>item<TAB>timestamp` file, prepared on the fly.
    pub input: Option<PathBuf>,
    pub synthetic: Option<Pattern>,
    pub slices: usize,
    pub min_interactions: usize,
    pub synthetic_users: usize,
    pub synthetic_items: usize,
    pub synthetic_cluster_size: usize,
    pub synthetic_per_slice: usize,
    pub synthetic_regular_gaps: bool,

    pub dim: usize,
    pub layers: usize,
    pub fusion: FusionMode,
    pub graph_mode: GraphMode,
    pub slice_rnn: bool,
    pub concat_id: bool,
    pub sides: SideMode,
    pub slice_input: SliceInput,
    pub dropout: f64,
    pub dropout_sites: Vec<DropoutSite>,

    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub beta: f64,
    pub neg_per_pos: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub window: Window,
    pub s_min: usize,
    pub clip_norm: f64,
    pub seed: u64,

    pub eval_k: usize,

    /// Variant names for `ablate` when none are given on the command line.
    pub variants: Vec<String>,
    /// Parallel workers for grid runs; 1 runs sequentially.
    pub workers: usize,
    /// Parent of every run directory.
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let t = TrainConfig::default();
        let s = SyntheticConfig::default();
        Self {
            data_dir: None,
            input: None,
            synthetic: None,
            slices: s.slices,
            min_interactions: 5,
            synthetic_users: s.users,
            synthetic_items: s.items,
            synthetic_cluster_size: s.cluster_size,
            synthetic_per_slice: s.per_slice,
            synthetic_regular_gaps: s.regular_gaps,
            dim: m.dim,
            layers: m.layers,
            fusion: m.fusion,
            graph_mode: m.graph_mode,
            slice_rnn: m.slice_rnn,
            concat_id: m.concat_id,
            sides: m.sides,
            slice_input: m.slice_input,
            dropout: m.dropout,
            dropout_sites: m.dropout_sites,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            l2: t.l2,
            beta: t.beta,
            neg_per_pos: t.neg_per_pos,
            max_epochs: t.max_epochs,
            patience: t.patience,
            window: t.window,
            s_min: t.s_min,
            clip_norm: t.clip_norm,
            seed: t.seed,
            eval_k: 10,
            variants: Vec::new(),
            workers: 1,
            out_dir: PathBuf::from("runs"),
        }
    }
}

impl RunConfig {
    /// Reads `path` and applies overrides from the process environment.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_str_with_env(&text, std::env::vars())
    }

    /// Parses `text` and applies every `DUALREC_*` pair from `env`.
    pub fn from_str_with_env(text: &str, env: impl IntoIterator<Item = (String, String)>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if let Some((key, _)) = table.iter().find(|(_, v)| v.is_table()) {
            return Err(CliError::Config(format!("nested table `{key}`; the config is flat key = value")));
        }
        for (name, raw) in env {
            let Some(key) = name.strip_prefix(ENV_PREFIX) else { continue };
            table.insert(key.to_ascii_lowercase(), parse_env_value(&raw));
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let sources = [self.data_dir.is_some(), self.input.is_some(), self.synthetic.is_some()];
        if sources.iter().filter(|&&s| s).count() != 1 {
            return Err(CliError::Config("set exactly one of data_dir, input, synthetic".into()));
        }
        if self.eval_k == 0 {
            return Err(CliError::Config("eval_k must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(CliError::Config("workers must be at least 1".into()));
        }
        self.model_config().validate()?;
        self.train_config().validate()?;
        Ok(())
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            dim: self.dim,
            layers: self.layers,
            fusion: self.fusion,
            graph_mode: self.graph_mode,
            slice_rnn: self.slice_rnn,
            concat_id: self.concat_id,
            sides: self.sides,
            slice_input: self.slice_input,
            dropout: self.dropout,
            dropout_sites: self.dropout_sites.clone(),
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            l2: self.l2,
            beta: self.beta,
            neg_per_pos: self.neg_per_pos,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed: self.seed,
            window: self.window,
            s_min: self.s_min,
            clip_norm: self.clip_norm,
        }
    }

    pub fn synthetic_config(&self, pattern: Pattern) -> SyntheticConfig {
        SyntheticConfig {
            users: self.synthetic_users,
            items: self.synthetic_items,
            slices: self.slices,
            cluster_size: self.synthetic_cluster_size,
            per_slice: self.synthetic_per_slice,
            pattern,
            regular_gaps: self.synthetic_regular_gaps,
            seed: self.seed,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config always serialises")
    }

    /// Hash of everything except the seed and the output and worker
    /// settings, so runs of one configuration differ only by seed.
    pub fn hash(&self) -> String {
        let canonical = RunConfig { seed: 0, out_dir: PathBuf::new(), workers: 1, ..self.clone() };
        let digest = Sha256::digest(canonical.to_toml().as_bytes());
        hex::encode(&digest[..6])
    }

    /// `<out_dir>/<hash>-s<seed>`.
    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("{}-s{}", self.hash(), self.seed))
    }
}

fn parse_env_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key just written"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}
