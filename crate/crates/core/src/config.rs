//! Loss weights and the editing configuration file.
//!
//! The configuration is a TOML document:
//!
//! ```toml
//! seed = 0
//! learning_rate = 0.0005
//! max_steps = 100000
//! inject_fine = true
//! use_id_loss = true
//! optimizer = "ranger"        # or "adam"
//! checkpoint_every = 5000
//!
//! [partition]
//! layers = 18
//! coarse_end = 4
//! medium_end = 8
//!
//! [weights]
//! clip = 1.0
//! l2 = 1.0
//! id = 1.0
//! color = 0.005
//! bg = 0.3
//! ```
//!
//! Unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::LatentPartition;

/// The five coefficients of the disentangled editing loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights", into = "RawWeights")]
pub struct LossWeights {
    pub clip: f64,
    pub l2: f64,
    pub id: f64,
    pub color: f64,
    pub bg: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWeights {
    clip: f64,
    l2: f64,
    id: f64,
    color: f64,
    bg: f64,
}

impl TryFrom<RawWeights> for LossWeights {
    type Error = Error;

    fn try_from(r: RawWeights) -> Result<Self> {
        LossWeights::new(r.clip, r.l2, r.id, r.color, r.bg)
    }
}

impl From<LossWeights> for RawWeights {
    fn from(w: LossWeights) -> Self {
        RawWeights {
            clip: w.clip,
            l2: w.l2,
            id: w.id,
            color: w.color,
            bg: w.bg,
        }
    }
}

impl LossWeights {
    pub fn new(clip: f64, l2: f64, id: f64, color: f64, bg: f64) -> Result<Self> {
        let w = LossWeights {
            clip,
            l2,
            id,
            color,
            bg,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.named() {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("weight {name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    /// Sleeve-length editing coefficients.
    pub fn sleeve() -> Self {
        LossWeights {
            clip: 1.0,
            l2: 1.0,
            id: 1.0,
            color: 5e-3,
            bg: 0.3,
        }
    }

    /// Garment-colour editing coefficients; the background term is stronger.
    pub fn color() -> Self {
        LossWeights {
            clip: 1.0,
            l2: 1.0,
            id: 1.0,
            color: 5e-3,
            bg: 1.0,
        }
    }

    /// Per-image latent optimization: unit norm weight and a heavy identity term.
    pub fn latent_optimizer() -> Self {
        LossWeights {
            clip: 1.0,
            l2: 1.0,
            id: 20.0,
            color: 0.0,
            bg: 0.0,
        }
    }

    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("clip", self.clip),
            ("l2", self.l2),
            ("id", self.id),
            ("color", self.color),
            ("bg", self.bg),
        ]
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights::sleeve()
    }
}

/// Parameter update rule used by mapper training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    /// Rectified Adam with lookahead.
    #[default]
    Ranger,
}

/// Everything a mapper training or editing run needs besides data and backends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub max_steps: usize,
    /// Feed the text embedding to the fine sub-mapper.
    pub inject_fine: bool,
    pub use_id_loss: bool,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
    pub partition: LatentPartition,
    pub weights: LossWeights,
}

fn default_checkpoint_every() -> usize {
    5000
}

impl Default for EditConfig {
    fn default() -> Self {
        EditConfig {
            seed: 0,
            learning_rate: 5e-4,
            max_steps: 100_000,
            inject_fine: true,
            use_id_loss: true,
            optimizer: OptimizerKind::Ranger,
            checkpoint_every: default_checkpoint_every(),
            partition: LatentPartition::default(),
            weights: LossWeights::sleeve(),
        }
    }
}

impl EditConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be > 0".into()));
        }
        self.weights.validate()
    }

    /// The weights actually optimized, after the ablation toggles.
    pub fn effective_weights(&self) -> LossWeights {
        let mut w = self.weights;
        if !self.use_id_loss {
            w.id = 0.0;
        }
        w
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: EditConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::make_partition;
    use proptest::prelude::*;

    #[test]
    fn default_round_trips() {
        let cfg = EditConfig::default();
        let text = cfg.to_toml_string().unwrap();
        assert_eq!(EditConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut text = EditConfig::default().to_toml_string().unwrap();
        text = text.replacen("seed = 0", "seed = 0\nmomentum = 0.9", 1);
        assert!(EditConfig::from_toml_str(&text).is_err());

        let text = EditConfig::default()
            .to_toml_string()
            .unwrap()
            .replace("bg = 0.3", "bg = 0.3\nlpips = 1.0");
        assert!(EditConfig::from_toml_str(&text).is_err());
    }

    #[test]
    fn invalid_values_rejected() {
        let text = EditConfig::default()
            .to_toml_string()
            .unwrap()
            .replace("bg = 0.3", "bg = -0.3");
        assert!(EditConfig::from_toml_str(&text).is_err());
        let text = EditConfig::default()
            .to_toml_string()
            .unwrap()
            .replace("medium_end = 8", "medium_end = 2");
        assert!(EditConfig::from_toml_str(&text).is_err());
        let mut cfg = EditConfig::default();
        cfg.max_steps = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn id_toggle_zeroes_weight() {
        let mut cfg = EditConfig::default();
        cfg.use_id_loss = false;
        assert_eq!(cfg.effective_weights().id, 0.0);
    }

    proptest! {
        #[test]
        fn config_round_trips_bit_exactly(
            seed in 0..=i64::MAX as u64,
            lr in 1e-8f64..10.0,
            steps in 1usize..1_000_000,
            flags in any::<(bool, bool, bool)>(),
            every in 1usize..100_000,
            layers in 3usize..40,
            w in proptest::array::uniform5(0.0f64..1e3),
        ) {
            let cfg = EditConfig {
                seed,
                learning_rate: lr,
                max_steps: steps,
                inject_fine: flags.0,
                use_id_loss: flags.1,
                optimizer: if flags.2 { OptimizerKind::Adam } else { OptimizerKind::Ranger },
                checkpoint_every: every,
                partition: make_partition(layers, 1, 2).unwrap(),
                weights: LossWeights::new(w[0], w[1], w[2], w[3], w[4]).unwrap(),
            };
            let back = EditConfig::from_toml_str(&cfg.to_toml_string().unwrap()).unwrap();
            prop_assert_eq!(back.learning_rate.to_bits(), cfg.learning_rate.to_bits());
            prop_assert_eq!(back.weights.color.to_bits(), cfg.weights.color.to_bits());
            prop_assert_eq!(back, cfg);
        }
    }
}
