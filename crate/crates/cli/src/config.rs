//! Run configuration: one TOML file with a section per subsystem, plus
//! command-line overrides.
//!
//! ```toml
//! checkpoint_interval = 500   # 0 writes only the final checkpoint
//!
//! [net]    # image_size, channels, dim_v, dim_c, norm, enc_widths, dsc_widths
//! [train]  # mode, lambda, epsilon, steps, batch_size, lr_gen, lr_dsc,
//!          # beta1, beta2, seed, dsc_steps_per_gen_step
//! [data]   # image_size, identities, viewpoints (0 = continuous),
//!          # bank_seed, supersample
//! [split]  # seed, n_train, n_test
//! [eval]   # seed, n_draws, per_identity
//! ```
//!
//! Every key is optional and defaults to the value shown by
//! `RunConfig::default()`; unknown keys are rejected.

use std::path::Path;

use anyhow::{Context, Result};
use dlab_core::checkpoint::config_hash;
use dlab_core::data::{make_split, DataConfig, InverseIndex, Renderer, ShapeBank};
use dlab_core::diagnostics::EvalConfig;
use dlab_core::nn::NetConfig;
use dlab_core::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Identity split of the shape bank into training and held-out sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 1, n_train: 20, n_test: 4 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub checkpoint_interval: u64,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub split: SplitConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            checkpoint_interval: 500,
            net: NetConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            split: SplitConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train or test)")),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| UsageError(format!("invalid config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Checks every section and cross-section constraint, naming the key
    /// at fault.
    pub fn validate(&self) -> Result<()> {
        let usage = |m: String| anyhow::Error::new(UsageError(m));
        self.net.validate().map_err(|e| usage(format!("[net] {e}")))?;
        self.train.validate().map_err(|e| usage(format!("[train] {e}")))?;
        if self.net.image_size != self.data.image_size {
            return Err(usage(format!(
                "net.image_size ({}) must equal data.image_size ({})",
                self.net.image_size, self.data.image_size
            )));
        }
        if self.net.channels != 1 {
            return Err(usage(format!("net.channels = {}: the renderer produces 1 channel", self.net.channels)));
        }
        if self.data.supersample == 0 {
            return Err(usage("data.supersample must be >= 1".into()));
        }
        if self.split.n_train == 0 || self.split.n_test == 0 {
            return Err(usage("split.n_train and split.n_test must be >= 1".into()));
        }
        if self.split.n_train + self.split.n_test > self.data.identities {
            return Err(usage(format!(
                "split.n_train + split.n_test ({}) exceeds data.identities ({})",
                self.split.n_train + self.split.n_test,
                self.data.identities
            )));
        }
        if self.eval.n_draws == 0 || self.eval.per_identity < 2 {
            return Err(usage("eval.n_draws must be >= 1 and eval.per_identity >= 2".into()));
        }
        Ok(())
    }

    /// Canonical serialized form, persisted as `config.resolved` and inside
    /// checkpoints.
    pub fn canonical(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Hash of the settings that determine the training trajectory. Step
    /// budget, checkpoint cadence and evaluation settings are excluded so a
    /// run can be extended or re-evaluated.
    pub fn trajectory_hash(&self) -> [u8; 32] {
        let mut c = self.clone();
        c.train.steps = 0;
        c.checkpoint_interval = 0;
        c.eval = EvalConfig::default();
        config_hash(&c.canonical())
    }

    pub fn bank(&self) -> Result<ShapeBank> {
        Ok(ShapeBank::generate(self.data.identities, self.data.bank_seed)?)
    }

    pub fn split_bank(&self, split: Split) -> Result<ShapeBank> {
        let (train, test) = make_split(&self.bank()?, self.split.seed, self.split.n_train, self.split.n_test)?;
        Ok(match split {
            Split::Train => train,
            Split::Test => test,
        })
    }

    pub fn renderer(&self, split: Split) -> Result<Renderer> {
        Ok(Renderer::new(self.split_bank(split)?, self.data.clone())?)
    }

    pub fn inverse_index(&self, split: Split) -> Result<InverseIndex> {
        Ok(InverseIndex::build(&self.split_bank(split)?, &self.data)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.canonical()).unwrap(), cfg);
        assert_eq!(RunConfig::from_toml("").unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn continuous_viewpoints_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.data.viewpoints = None;
        assert!(cfg.canonical().contains("viewpoints = 0"));
        assert_eq!(RunConfig::from_toml(&cfg.canonical()).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[train]\nlamda = 1.0\n").unwrap_err();
        assert!(err.to_string().contains("lamda"), "{err}");
        assert!(RunConfig::from_toml("bogus = 1\n").is_err());
    }

    #[test]
    fn partial_sections_fill_defaults() {
        let cfg = RunConfig::from_toml("[train]\nmode = \"ae-gan\"\n[net]\ndim_v = 2\n").unwrap();
        assert_eq!(cfg.net.dim_v, 2);
        assert_eq!(cfg.net.dim_c, NetConfig::default().dim_c);
        assert_eq!(cfg.train.lambda, 1.0);
    }

    #[test]
    fn validation_names_the_key() {
        let mut cfg = RunConfig::default();
        cfg.data.image_size = 16;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("data.image_size"), "{msg}");
        let mut cfg = RunConfig::default();
        cfg.split.n_train = 30;
        assert!(cfg.validate().unwrap_err().to_string().contains("split.n_train"));
    }

    #[test]
    fn hash_ignores_budget_but_not_hyperparameters() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.train.steps = 99;
        b.checkpoint_interval = 7;
        b.eval.seed = 3;
        assert_eq!(a.trajectory_hash(), b.trajectory_hash());
        b.train.lambda = 0.5;
        assert_ne!(a.trajectory_hash(), b.trajectory_hash());
    }
}
