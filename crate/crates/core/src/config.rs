//! Merged run configuration, read from TOML with every section optional.
//!
//! ```toml
//! seed = 7
//! output_dir = "runs/demo"
//!
//! [world]
//! num_users = 400
//!
//! [training]
//! phase1_epochs = 4
//! ```
//!
//! Subsystem seeds (`world.seed`, `training.seed`, `online.seed`,
//! `bench.seed`) are derived from the root `seed` by [`derive_seed`] in
//! [`RunConfig::apply_root_seed`], which the CLI always calls.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DEFAULT_DELAYS_MS;
use crate::model::ModelConfig;
use crate::training::TrainingConfig;
use crate::worldsim::{OnlineConfig, WorldConfig};

/// Overrides the default output root when set.
pub const OUTPUT_ROOT_ENV: &str = "CUPID_OUTPUT_ROOT";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub workers: usize,
    pub queue_capacity: usize,
    /// Simulated session-encoding latency.
    pub compute_delay_ms: u64,
    /// Committed representations kept per user for delayed lookups.
    pub history: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            workers: 1,
            queue_capacity: 4096,
            compute_delay_ms: 200,
            history: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub delays_ms: Vec<u64>,
    /// Quality threshold; the train split's 75th percentile when unset.
    pub threshold_ms: Option<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            delays_ms: DEFAULT_DELAYS_MS.to_vec(),
            threshold_ms: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub pool_sizes: Vec<usize>,
    pub reps: usize,
    /// Records in every synthetic member's session.
    pub session_len: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            pool_sizes: vec![16, 64, 256],
            reps: 200,
            session_len: 32,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub threads: usize,
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub training: TrainingConfig,
    pub engine: EngineConfig,
    pub eval: EvalConfig,
    pub online: OnlineConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let output_dir = std::env::var_os(OUTPUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        Self {
            seed: 0,
            output_dir,
            threads: 1,
            world: WorldConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            engine: EngineConfig::default(),
            eval: EvalConfig::default(),
            online: OnlineConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-subsystem seed: FNV-1a of the label mixed with the root.
pub fn derive_seed(root: u64, subsystem: &str) -> u64 {
    let h = subsystem.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    });
    mix(root ^ mix(h))
}

impl RunConfig {
    /// Parses TOML; absent keys keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Overwrites every subsystem seed with one derived from `seed`.
    pub fn apply_root_seed(&mut self) {
        self.world.seed = derive_seed(self.seed, "world");
        self.training.seed = derive_seed(self.seed, "training");
        self.online.seed = derive_seed(self.seed, "online");
        self.bench.seed = derive_seed(self.seed, "bench");
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.training.validate()?;
        if self.engine.workers == 0 || self.engine.queue_capacity == 0 || self.engine.history == 0 {
            return Err(Error::Config("engine sizes must be positive".into()));
        }
        if self.bench.reps == 0 || self.bench.pool_sizes.iter().any(|&n| n < 2) {
            return Err(Error::Config("bench needs reps > 0 and pools of at least 2".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        if let Some(t) = self.eval.threshold_ms {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config(format!("threshold_ms {t} must be positive")));
            }
        }
        Ok(())
    }

    /// JSON echo embedded in output artifacts.
    pub fn provenance(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_toml_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[world]\nnum_users = 50\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.world.num_users, 50);
        assert_eq!(c.world.latent_dim, WorldConfig::default().latent_dim);
        assert_eq!(c.model, ModelConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("[engine]\nworkerz = 2\n").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = RunConfig::default();
        c.eval.threshold_ms = Some(12_000.0);
        c.apply_root_seed();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn derived_seeds_differ_per_subsystem() {
        let a = derive_seed(7, "world");
        assert_eq!(a, derive_seed(7, "world"));
        assert_ne!(a, derive_seed(7, "training"));
        assert_ne!(a, derive_seed(8, "world"));
    }
}
