//! Configuration, persistence, canned experiments and the command line.
//!
//! An [`ExperimentConfig`] fully determines a run: corpus, base model,
//! pretraining, meta-training and evaluation settings plus the seeds.
//! Configurations are TOML files; any key can be overridden with a dotted
//! path (`trainer.eta=0.1`).

mod checkpoint;
pub mod cli;
mod experiments;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::editengine::AggregationMode;
use crate::error::{Error, Result};
use crate::evalprof::{EditProtocol, MIN_PROFILED_ITERATIONS, WARMUP_ITERATIONS};
use crate::factsynth::CorpusConfig;
use crate::metatrain::{ConsVariant, TrainerConfig, TrainerMode};
use crate::toylm::{ModelConfig, PretrainConfig};

pub use checkpoint::{load_state, save_state, Checkpoint, CHECKPOINT_SCHEMA, CHECKPOINT_VERSION};
pub use experiments::{
    compare_tables, prepare, run_prepared, scarcity_sweep, step_sweep, Prepared, RunOutcome, SweepOutcome,
};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "EDITLAB_OUT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Leading samples used for meta-training; the rest are held out.
    pub n_train: usize,
    pub batch_size: usize,
    pub protocol: EditProtocol,
    /// Minimum unedited specificity required before any experiment.
    pub specificity_floor: f64,
    pub profile_iterations: usize,
    pub warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_train: 150,
            batch_size: 10,
            protocol: EditProtocol::Batch,
            specificity_floor: 0.99,
            profile_iterations: MIN_PROFILED_ITERATIONS,
            warmup: WARMUP_ITERATIONS,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: String,
    pub seeds: Vec<u64>,
    /// Empty means `$EDITLAB_OUT`, then `./runs`.
    pub out_dir: String,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub trainer: TrainerConfig,
    pub eval: EvalConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Published hyperparameters, kept for reference; slow at desk scale.
    Paper,
    /// Micro sizes for quick checks.
    Desk,
    /// Sizes used by the trend experiments.
    Trend,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Paper, Preset::Desk, Preset::Trend];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
            Preset::Trend => "trend",
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::config(format!("unknown preset '{s}' (expected paper, desk or trend)")))
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let trend = ExperimentConfig {
            preset: preset.name().into(),
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: String::new(),
            corpus: CorpusConfig {
                n: 200,
                vocab_size: 64,
                ..CorpusConfig::default()
            },
            model: ModelConfig {
                vocab_size: 64,
                dim: 32,
                ..ModelConfig::default()
            },
            pretrain: PretrainConfig {
                target_accuracy: 1.0,
                ..PretrainConfig::default()
            },
            trainer: TrainerConfig {
                mode: TrainerMode::SmeditBatch,
                steps: 2,
                rank: 8,
                meta_lr: 1e-3,
                inner_lr: 1e-3,
                eta: 0.5,
                batch_size: 10,
                iterations: 200,
                ..TrainerConfig::default()
            },
            eval: EvalConfig::default(),
        };
        match preset {
            Preset::Trend => trend,
            Preset::Desk => ExperimentConfig {
                seeds: vec![0],
                corpus: CorpusConfig {
                    n: 40,
                    ..trend.corpus
                },
                trainer: TrainerConfig {
                    batch_size: 5,
                    n_edits: 3,
                    iterations: 20,
                    inner_lr: 1e-2,
                    meta_lr: 1e-2,
                    ..trend.trainer
                },
                eval: EvalConfig {
                    n_train: 30,
                    batch_size: 5,
                    ..trend.eval
                },
                ..trend
            },
            Preset::Paper => ExperimentConfig {
                trainer: TrainerConfig {
                    rank: 1024,
                    n_blocks: 4,
                    inner_lr: 1e-6,
                    meta_lr: 1e-5,
                    lambda_loc: 0.6,
                    max_grad_norm: 1.0,
                    eta: 0.5,
                    gamma: 1.0,
                    q: 10,
                    mu: 0.95,
                    aggregation: AggregationMode::LeastSquares,
                    cons_variant: ConsVariant::TotalDrift,
                    ..trend.trainer
                },
                ..trend
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.trainer.validate()?;
        if self.seeds.is_empty() {
            return Err(Error::config("at least one seed is required"));
        }
        if self.model.vocab_size != self.corpus.vocab_size {
            return Err(Error::config(format!(
                "model vocabulary {} differs from corpus vocabulary {}",
                self.model.vocab_size, self.corpus.vocab_size
            )));
        }
        if self.eval.n_train == 0 || self.eval.n_train >= self.corpus.n {
            return Err(Error::config("eval.n_train must leave both a training and a held-out split"));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::config("eval.batch_size must be positive"));
        }
        Ok(())
    }

    /// Copy for a single seed; corpus, model and trainer all derive from it.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seeds = vec![seed];
        c.corpus.seed = seed;
        c.model.seed = seed;
        c.trainer.seed = seed;
        c
    }

    pub fn seed(&self) -> u64 {
        self.seeds[0]
    }

    /// SHA-256 over everything that affects results (the output location is excluded).
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// `<hash prefix>-s<seed>` of the single-seed config.
    pub fn run_id(&self) -> String {
        format!("{}-s{}", &self.hash()[..12], self.seed())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text).map_err(|e| Error::config(format!("config file: {e}")))?;
        Ok(c)
    }

    /// Sets the dotted `key` to `raw`, parsed as a TOML value when possible
    /// and as a bare string otherwise. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let mut root = toml::Value::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            let table = node
                .as_table_mut()
                .ok_or_else(|| Error::config(format!("'{}' is not a table", parts[..i].join("."))))?;
            node = table
                .get_mut(*part)
                .ok_or_else(|| Error::config(format!("unknown config key '{key}'")))?;
        }
        let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        *node = parsed;
        *self = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(format!("{key}={raw}: {e}")))?;
        Ok(())
    }

    /// `out_dir`, else `$EDITLAB_OUT`, else `runs`.
    pub fn out_root(&self) -> PathBuf {
        if !self.out_dir.is_empty() {
            return PathBuf::from(&self.out_dir);
        }
        std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from)
    }
}
