//! Experiment configuration, loaded from TOML.

use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::aggregation::{MergeStrategy, WeightingMode};
use crate::data::TaskSpec;
use crate::error::{FedError, Result};
use crate::lora::{InjectionTarget, LocalTraining, ModelDims, PretrainSettings, ScalingMode};
use crate::{derive_seed, derive_seed_path};

/// Environment variable that overrides `seed` when set.
pub const SEED_ENV: &str = "FEDLORA_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    #[default]
    InProcess,
    Socket,
}

/// Heterogeneity knobs of the synthetic task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub client_sizes: Vec<usize>,
    pub dialect_shift: f64,
    pub label_skew: f64,
    pub label_noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        let t = TaskSpec::default();
        Self {
            client_sizes: t.client_sizes,
            dialect_shift: t.dialect_shift,
            label_skew: t.label_skew,
            label_noise: t.label_noise,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedConfig {
    pub seed: u64,
    pub rounds: u32,
    pub local_epochs: usize,
    pub rank: usize,
    pub alpha: f64,
    pub scaling_mode: ScalingMode,
    pub weighting: WeightingMode,
    pub merge: MergeStrategy,
    pub dropout: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub accumulation: usize,
    pub client_timeout_secs: f64,
    pub targets: Vec<InjectionTarget>,
    pub reward_per_update: u64,
    pub transport: TransportKind,
    pub listen_address: String,
    pub registry_path: Option<PathBuf>,
    pub key_dir: Option<PathBuf>,
    pub ledger_path: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub model: ModelDims,
    pub pretrain: PretrainSettings,
    pub task: TaskConfig,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rounds: 3,
            local_epochs: 1,
            rank: 8,
            alpha: 32.0,
            scaling_mode: ScalingMode::AlphaOverR,
            weighting: WeightingMode::SampleWeighted,
            merge: MergeStrategy::ProductSvd,
            dropout: 0.1,
            lr: 3e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            accumulation: 4,
            client_timeout_secs: 60.0,
            targets: InjectionTarget::ALL.to_vec(),
            reward_per_update: 10,
            transport: TransportKind::InProcess,
            listen_address: "127.0.0.1:7878".into(),
            registry_path: None,
            key_dir: None,
            ledger_path: None,
            out_dir: None,
            model: ModelDims::default(),
            pretrain: PretrainSettings::default(),
            task: TaskConfig::default(),
        }
    }
}

// Sub-seed tags.
const TAG_BASE: u64 = 1;
const TAG_TASK: u64 = 2;
const TAG_ADAPTER_INIT: u64 = 3;
const TAG_CLIENT: u64 = 4;
const TAG_IDENTITY: u64 = 5;

impl FedConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: FedConfig = toml::from_str(text).map_err(|e| FedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file and applies the `FEDLORA_SEED` override.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| FedError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| FedError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FedError::Config(m));
        if self.rounds == 0 {
            return bad("rounds must be >= 1".into());
        }
        if self.local_epochs == 0 {
            return bad("local_epochs must be >= 1".into());
        }
        if self.rank == 0 {
            return bad("rank must be >= 1".into());
        }
        if self.accumulation == 0 {
            return bad("accumulation must be >= 1".into());
        }
        if !(self.client_timeout_secs > 0.0 && self.client_timeout_secs.is_finite()) {
            return bad("client_timeout_secs must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.targets.is_empty() {
            return bad("at least one injection target is required".into());
        }
        self.model.validate()?;
        for t in &self.targets {
            let (d_out, d_in) = t.shape(&self.model);
            if self.rank > d_out.min(d_in) {
                return bad(format!("rank {} exceeds {t} matrix {d_out}x{d_in}", self.rank));
            }
        }
        self.task_spec().validate()
    }

    pub fn clients(&self) -> usize {
        self.task.client_sizes.len()
    }

    pub fn client_ids(&self) -> Vec<u32> {
        (0..self.clients() as u32).collect()
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_secs_f64(self.client_timeout_secs)
    }

    pub fn task_spec(&self) -> TaskSpec {
        TaskSpec {
            vocab: self.model.vocab,
            classes: self.model.classes,
            seq_len: self.model.seq_len,
            client_sizes: self.task.client_sizes.clone(),
            dialect_shift: self.task.dialect_shift,
            label_skew: self.task.label_skew,
            label_noise: self.task.label_noise,
            seed: derive_seed(self.seed, TAG_TASK),
        }
    }

    pub fn base_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_BASE)
    }

    pub fn adapter_init_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_ADAPTER_INIT)
    }

    pub fn client_seed(&self, client_id: u32, round: u32) -> u64 {
        derive_seed_path(self.seed, &[TAG_CLIENT, client_id as u64, round as u64])
    }

    pub fn identity_seed(&self) -> u64 {
        derive_seed(self.seed, TAG_IDENTITY)
    }

    pub fn local_training(&self) -> LocalTraining {
        LocalTraining {
            epochs: self.local_epochs,
            accumulation: self.accumulation,
            dropout: self.dropout,
        }
    }

    /// Optimizer steps a client takes over the whole experiment.
    pub fn total_steps(&self, n_k: usize) -> u64 {
        self.rounds as u64 * self.local_epochs as u64 * crate::lora::steps_per_epoch(n_k, self.accumulation)
    }
}
