//! Experiment configuration: one JSON document with a section per stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::adapt::AdaptConfig;
use crate::corpus::{CorpusConfig, PretrainConfig, Split};
use crate::error::{Error, Result};
use crate::network::ArchConfig;
use crate::rng::mix64;

const PRETRAIN_SALT: u64 = 0x7072_6574_7261_696e;
const ADAPT_SALT: u64 = 0x6164_6170_7400_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub iterations: Vec<usize>,
    pub split: Split,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { iterations: vec![0, 50, 100, 200, 400], split: Split::TestRecurrent }
    }
}

impl SweepConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations.is_empty() {
            return Err(Error::Param("sweep needs at least one iteration count".into()));
        }
        if self.iterations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Param(format!("sweep iterations {:?} are not strictly increasing", self.iterations)));
        }
        Ok(())
    }
}

fn default_splits() -> Vec<Split> {
    vec![Split::TestRecurrent, Split::TestControl]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    /// Defaults to `<output_dir>/corpus`.
    #[serde(default)]
    pub corpus_dir: Option<PathBuf>,
    /// Defaults to `<output_dir>/pretrain/theta0.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusConfig,
    #[serde(default)]
    pub arch: ArchConfig,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub adapt: AdaptConfig,
    #[serde(default = "default_splits")]
    pub adapt_splits: Vec<Split>,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            output_dir: default_output(),
            corpus_dir: None,
            checkpoint: None,
            corpus: CorpusConfig::default(),
            arch: ArchConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::default(),
            adapt_splits: default_splits(),
            sweep: SweepConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies command-line overrides and derives per-stage seeds from the
    /// global seed.
    pub fn resolve(mut self, seed: Option<u64>, out: Option<PathBuf>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out {
            self.output_dir = o;
        }
        self.pretrain.seed = mix64(self.seed ^ PRETRAIN_SALT);
        self.adapt.seed = mix64(self.seed ^ ADAPT_SALT);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.arch.validate()?;
        self.pretrain.validate()?;
        self.adapt.validate()?;
        self.sweep.validate()?;
        if self.arch.image_channels != self.corpus.channels {
            return Err(Error::Param(format!(
                "arch expects {} channels but the corpus has {}",
                self.arch.image_channels, self.corpus.channels
            )));
        }
        let (h, w) = self.corpus.dims();
        let stride = 1 << self.arch.depth;
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Param(format!("image {h}x{w} not divisible by {stride}")));
        }
        Ok(())
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.corpus_dir.clone().unwrap_or_else(|| self.output_dir.join("corpus"))
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| self.output_dir.join("pretrain").join("theta0.ckpt"))
    }

    /// SHA-256 of the resolved configuration, leaving out where files live.
    pub fn fingerprint(&self) -> String {
        let located = Self {
            output_dir: PathBuf::new(),
            corpus_dir: None,
            checkpoint: None,
            ..self.clone()
        };
        let digest = Sha256::digest(located.to_json().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Fine-tuning seed for one image.
    pub fn image_seed(&self, image_seed: u64) -> u64 {
        mix64(self.adapt.seed ^ image_seed)
    }
}
