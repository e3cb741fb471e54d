use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{AttackConfig, SYNTHETIC_EPSILON};
use crate::data::{self, AugmentationPool, Dataset, SyntheticConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::models::InitScheme;
use crate::sam::SamConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synthetic(SyntheticConfig),
    /// CIFAR binary batches; pixel data lives in `[0, 1]`.
    Cifar {
        train: PathBuf,
        test: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticConfig::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSource::Synthetic(cfg) => data::generate(cfg),
            DataSource::Cifar { train, test } => Ok((
                data::load_cifar_binary(train)?,
                data::load_cifar_binary(test)?,
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default)]
    pub sam: Option<SamConfig>,
    #[serde(default)]
    pub use_discriminator: bool,
    #[serde(default = "default_pretrain_attack")]
    pub pretrain_attack: AttackConfig,
    #[serde(default = "default_le_attack")]
    pub le_attack: AttackConfig,
    #[serde(default = "default_eval_attack")]
    pub eval_attack: AttackConfig,
    #[serde(default = "default_epochs_pretrain")]
    pub epochs_pretrain: usize,
    #[serde(default = "default_epochs_le")]
    pub epochs_le: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lr_extractor")]
    pub lr_extractor: f64,
    #[serde(default = "default_lr_discriminator")]
    pub lr_discriminator: f64,
    #[serde(default = "default_lr_classifier")]
    pub lr_classifier: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub augment: AugmentationPool,
    #[serde(default = "default_init")]
    pub init: InitScheme,
    /// Train on benign InfoNCE alone with no attack.
    #[serde(default)]
    pub benign_only: bool,
    /// Draw fresh adversarial views for the discriminator step instead of
    /// reusing the extractor's.
    #[serde(default)]
    pub regenerate_for_discriminator: bool,
    /// Off by default so repeated runs produce identical CSVs.
    #[serde(default)]
    pub record_wall_time: bool,
}

fn default_pretrain_attack() -> AttackConfig {
    AttackConfig::pretrain(SYNTHETIC_EPSILON)
}
fn default_le_attack() -> AttackConfig {
    AttackConfig::linear_eval(SYNTHETIC_EPSILON)
}
fn default_eval_attack() -> AttackConfig {
    AttackConfig::evaluation(SYNTHETIC_EPSILON)
}
fn default_epochs_pretrain() -> usize {
    100
}
fn default_epochs_le() -> usize {
    50
}
fn default_batch_size() -> usize {
    64
}
fn default_lr_extractor() -> f64 {
    0.05
}
fn default_lr_discriminator() -> f64 {
    0.5
}
fn default_lr_classifier() -> f64 {
    0.1
}
fn default_init() -> InitScheme {
    InitScheme::UniformHe
}

impl Default for RunConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if let Some(s) = &self.sam {
            s.validate()?;
        }
        self.pretrain_attack.validate()?;
        self.le_attack.validate()?;
        self.eval_attack.validate()?;
        self.augment.validate()?;
        if self.batch_size < 2 {
            return Err(Error::Config(format!(
                "batch_size must be >= 2, got {}",
                self.batch_size
            )));
        }
        for (name, lr) in [
            ("lr_extractor", self.lr_extractor),
            ("lr_discriminator", self.lr_discriminator),
            ("lr_classifier", self.lr_classifier),
        ] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {lr}")));
            }
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON with the seed zeroed, so every seed of
    /// one configuration shares a hash.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        if let DataSource::Synthetic(s) = &mut c.data {
            s.seed = 0;
        }
        let text = serde_json::to_string(&c).expect("serializable");
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    /// The same configuration under another seed. The synthetic data seed
    /// follows the run seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.seed = seed;
        if let DataSource::Synthetic(s) = &mut c.data {
            s.seed = seed;
        }
        c
    }

    /// Step used for the extractor: doubled on the SAM path to offset the
    /// gradient averaging.
    pub fn effective_lr_extractor(&self) -> f64 {
        if self.sam.is_some() {
            2.0 * self.lr_extractor
        } else {
            self.lr_extractor
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.epochs_pretrain, 100);
        assert_eq!(c.epochs_le, 50);
        assert_eq!(c.batch_size, 64);
        assert_eq!(c.lr_discriminator, 0.5);
        assert_eq!(c.loss.lambda_global, 0.5);
        assert_eq!(c.pretrain_attack.steps, 7);
        assert_eq!(c.le_attack.steps, 10);
        assert_eq!(c.eval_attack.steps, 20);
        c.validate().unwrap();
    }

    #[test]
    fn parses_listed_field_names() {
        let text = r#"{
            "loss": {"tau": 0.5, "beta": null, "lambda_global": 0.5, "lambda_benign": 2.0},
            "sam": {"rho": 1.0, "adaptive": true},
            "use_discriminator": true,
            "pretrain_attack": {"epsilon": 0.25, "steps": 7, "step_size": 0.0625, "random_start": true, "clamp": null},
            "le_attack": {"epsilon": 0.25, "steps": 10, "step_size": 0.0625},
            "eval_attack": {"epsilon": 0.25, "steps": 20, "step_size": 0.025},
            "epochs_pretrain": 3, "epochs_le": 2, "batch_size": 32,
            "lr_extractor": 0.05, "lr_discriminator": 0.5, "lr_classifier": 0.1,
            "seed": 7,
            "data": {"synthetic": {"M": 4, "d_in": 8, "sigma": 0.5, "n_train": 200, "n_test": 100}}
        }"#;
        let c = RunConfig::from_json(text).unwrap();
        assert_eq!(c.loss.lambda_benign, 2.0);
        assert!(c.sam.is_some() && c.use_discriminator);
        assert_eq!(c.effective_lr_extractor(), 0.1);
    }

    #[test]
    fn rejects_bad_values_and_unknown_fields() {
        assert!(RunConfig::from_json(r#"{"batch_size": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"lr_extractor": 0}"#).is_err());
        assert!(RunConfig::from_json(r#"{"not_a_field": 1}"#).is_err());
        assert!(RunConfig::from_json(r#"{"loss": {"tau": -1}}"#).is_err());
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = RunConfig::default();
        assert_eq!(a.config_hash(), a.with_seed(9).config_hash());
        let mut b = a.clone();
        b.loss.lambda_benign = 0.0;
        assert_ne!(a.config_hash(), b.config_hash());
    }
}
