use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::models::{EncoderConfig, SegmenterConfig};

/// Initialization (fresh or pretrained encoder) × fine-tuning domain set
/// (reference only or reference plus seen domains).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    BaselineSingle,
    BaselineMulti,
    PretrainedSingle,
    PretrainedMulti,
}

impl Mode {
    pub const ALL: [Mode; 4] = [
        Mode::BaselineSingle,
        Mode::BaselineMulti,
        Mode::PretrainedSingle,
        Mode::PretrainedMulti,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Mode::BaselineSingle => "baseline_single",
            Mode::BaselineMulti => "baseline_multi",
            Mode::PretrainedSingle => "pretrained_single",
            Mode::PretrainedMulti => "pretrained_multi",
        }
    }

    pub fn pretrained(self) -> bool {
        matches!(self, Mode::PretrainedSingle | Mode::PretrainedMulti)
    }

    pub fn multi(self) -> bool {
        matches!(self, Mode::BaselineMulti | Mode::PretrainedMulti)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mode {s:?}")))
    }
}

/// Synthetic dataset used when no manifest path is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub seed: u64,
    pub slide_size: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub lambda: f64,
    /// Patch locations sampled per training slide and epoch.
    pub per_slide: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub max_lr: f64,
    pub per_slide: usize,
    pub bg_frac: f64,
    /// Fixed validation patches per validation slide.
    pub val_per_slide: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub overlap: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    /// Dataset manifest; when absent the dataset is generated from `data`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    pub data: DataConfig,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub patch_size: usize,
    pub block_channels: Vec<usize>,
    pub pretrain: PretrainConfig,
    pub finetune: FinetuneConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    /// Published training parameters: 256-pixel patches, 200 pretraining
    /// epochs at batch 64 and max LR 1e-6, 100 fine-tuning epochs at batch 8
    /// and max LR 1e-4, 128-pixel window overlap, 30/5/9 slides.
    pub fn paper() -> Self {
        Self {
            name: "paper".into(),
            manifest: None,
            data: DataConfig {
                seed: 0,
                slide_size: 1024,
                n_train: 30,
                n_val: 5,
                n_test: 9,
            },
            modes: Mode::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            patch_size: 256,
            block_channels: EncoderConfig::default().block_channels,
            pretrain: PretrainConfig {
                epochs: 200,
                batch_size: 64,
                max_lr: 1e-6,
                lambda: crate::ssl_loss::DEFAULT_LAMBDA,
                per_slide: 50,
            },
            finetune: FinetuneConfig {
                epochs: 100,
                batch_size: 8,
                max_lr: 1e-4,
                per_slide: 50,
                bg_frac: 0.10,
                val_per_slide: 50,
            },
            eval: EvalConfig { overlap: 128 },
        }
    }

    /// 256-pixel slides, 64-pixel patches, 12/3/5 slides.
    pub fn desk() -> Self {
        Self {
            name: "desk".into(),
            data: DataConfig {
                seed: 0,
                slide_size: 256,
                n_train: 12,
                n_val: 3,
                n_test: 5,
            },
            patch_size: 64,
            pretrain: PretrainConfig {
                epochs: 30,
                batch_size: 32,
                max_lr: 1e-2,
                lambda: crate::ssl_loss::DEFAULT_LAMBDA,
                per_slide: 64,
            },
            finetune: FinetuneConfig {
                epochs: 20,
                batch_size: 8,
                max_lr: 2e-3,
                per_slide: 20,
                bg_frac: 0.10,
                val_per_slide: 20,
            },
            eval: EvalConfig { overlap: 32 },
            ..Self::paper()
        }
    }

    /// 128-pixel slides, 32-pixel patches and a three-block encoder; the
    /// scale the acceptance suite runs at.
    pub fn compact() -> Self {
        Self {
            name: "compact".into(),
            data: DataConfig {
                slide_size: 128,
                ..Self::desk().data
            },
            patch_size: 32,
            block_channels: vec![8, 16, 32],
            finetune: FinetuneConfig {
                per_slide: 16,
                val_per_slide: 16,
                ..Self::desk().finetune
            },
            eval: EvalConfig { overlap: 16 },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "desk" => Ok(Self::desk()),
            "compact" => Ok(Self::compact()),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }

    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            in_channels: 3,
            block_channels: self.block_channels.clone(),
        }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig::new(self.encoder_config())
    }

    pub fn validate(&self) -> Result<()> {
        let enc = self.encoder_config();
        enc.validate()?;
        if self.modes.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("at least one mode and one seed required".into()));
        }
        let f = enc.downsample_factor();
        if self.patch_size == 0 || self.patch_size % f != 0 {
            return Err(Error::Config(format!(
                "patch size {} not divisible by downsampling factor {f}",
                self.patch_size
            )));
        }
        if self.manifest.is_none() && (self.data.slide_size < self.patch_size || self.data.slide_size % f != 0) {
            return Err(Error::Config(format!(
                "slide size {} must hold a patch and be divisible by {f}",
                self.data.slide_size
            )));
        }
        if self.eval.overlap >= self.patch_size {
            return Err(Error::Config("window overlap must be below the patch size".into()));
        }
        let p = &self.pretrain;
        if p.batch_size < 2 || p.per_slide == 0 || !(p.max_lr > 0.0) || !(p.lambda > 0.0) {
            return Err(Error::Config(
                "pretraining needs batch ≥ 2, patches, positive LR and λ".into(),
            ));
        }
        let t = &self.finetune;
        if t.batch_size == 0 || t.per_slide == 0 || t.val_per_slide == 0 || !(t.max_lr > 0.0) {
            return Err(Error::Config(
                "fine-tuning needs positive batch, patch counts and LR".into(),
            ));
        }
        if !(0.0..=1.0).contains(&t.bg_frac) {
            return Err(Error::Config(format!("bg_frac {} outside [0, 1]", t.bg_frac)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    /// First 16 hex digits of the SHA-256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
    }

    /// The manifest named in the config, or one generated from `data`.
    pub fn dataset_manifest(&self) -> Result<DatasetManifest> {
        match &self.manifest {
            Some(path) => DatasetManifest::load(path),
            None => {
                let d = &self.data;
                let m = DatasetManifest::new(d.seed, d.slide_size, d.n_train, d.n_val, d.n_test);
                m.validate()?;
                Ok(m)
            }
        }
    }
}
