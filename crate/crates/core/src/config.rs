//! One nested run-configuration document covering corpus, model, teacher and
//! training settings. Every field has a default; unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::training::{TeacherTrainConfig, TrainConfig};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub teacher: TeacherTrainConfig,
    pub training: TrainConfig,
}

impl RunConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(s).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("config serialize: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.training.validate()?;
        if self.corpus.d_in != self.model.padd.d_in {
            return Err(Error::Config(format!(
                "corpus d_in {} does not match model d_in {}",
                self.corpus.d_in, self.model.padd.d_in
            )));
        }
        Ok(())
    }

    /// Override every seed in the document (used for the NEPADD_SEED variable
    /// and the --seed flag).
    pub fn override_seed(&mut self, seed: u64) {
        self.corpus.seed = seed;
        self.teacher.seed = seed;
        self.training.seed = seed;
    }

    /// Stable digest of the canonical JSON form, embedded in checkpoints.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}
