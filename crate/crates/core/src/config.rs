//! Run configuration, persisted as TOML.
//!
//! Every field has a default, so a config file only lists what it changes.
//! Paths have no default; commands that need one fail with
//! [`Error::MissingKey`] naming it. `seed` initializes model weights; the
//! per-stage `seed` keys drive shuffling and sampling.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::MacroScope;
use crate::mention::MentionTrainConfig;
use crate::nn::EncoderConfig;
use crate::pipeline::{GridSpec, Objective, PipelineConfig};
use crate::ranker::CrossEncoderTrainConfig;
use crate::relation::{RelationConfig, RelationMode};
use crate::retrieval::BiEncoderTrainConfig;
use crate::text::{RepConfig, Vocabulary};
use crate::train::TrainConfig;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    /// Directory with the knowledge-graph files.
    pub kb_dir: Option<PathBuf>,
    pub train: Option<PathBuf>,
    pub dev: Option<PathBuf>,
    pub test: Option<PathBuf>,
    /// Checkpoints, index and thresholds live here.
    pub model_dir: Option<PathBuf>,
    /// Overrides `model_dir/thresholds.json`.
    pub thresholds: Option<PathBuf>,
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::MissingKey(key.to_string()))
}

impl Paths {
    pub fn kb_dir(&self) -> Result<&Path> {
        require(&self.kb_dir, "paths.kb_dir")
    }

    pub fn train(&self) -> Result<&Path> {
        require(&self.train, "paths.train")
    }

    pub fn dev(&self) -> Result<&Path> {
        require(&self.dev, "paths.dev")
    }

    pub fn test(&self) -> Result<&Path> {
        require(&self.test, "paths.test")
    }

    pub fn model_dir(&self) -> Result<&Path> {
        require(&self.model_dir, "paths.model_dir")
    }

    pub fn thresholds(&self) -> Result<PathBuf> {
        match &self.thresholds {
            Some(p) => Ok(p.clone()),
            None => Ok(self.model_dir()?.join("thresholds.json")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSettings {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_positions: usize,
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            dim: 64,
            layers: 2,
            heads: 4,
            ffn_dim: 128,
            max_positions: 128,
        }
    }
}

impl EncoderSettings {
    pub fn build(&self, vocab: &Vocabulary) -> EncoderConfig {
        EncoderConfig {
            vocab_size: vocab.len(),
            dim: self.dim,
            layers: self.layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            max_positions: self.max_positions,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct MentionSettings {
    #[serde(flatten)]
    pub train: MentionTrainConfig,
    /// Longest span scored, in tokens; 0 scores every span.
    pub max_span_len: usize,
    /// Encoder shape for the recognizer alone; unset uses `[encoder]`.
    pub encoder: Option<EncoderSettings>,
}

impl MentionSettings {
    pub fn span_cap(&self) -> Option<usize> {
        (self.max_span_len > 0).then_some(self.max_span_len)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RelationSettings {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub mode: RelationMode,
    pub type_dim: usize,
    /// Output size of `l_s` and `l_o`; 0 means the encoder width.
    pub bilinear_dim: usize,
    /// Fine-tune a private encoder initialized from the ranker; otherwise
    /// read joint embeddings from the frozen ranker.
    pub finetune_encoder: bool,
    /// Train on the ranker's top candidate for each gold mention instead of
    /// the gold entity.
    pub train_on_predicted: bool,
    /// Probability per example and step of renaming every entity mention.
    pub name_substitution: f64,
}

impl Default for RelationSettings {
    fn default() -> Self {
        let r = RelationConfig::default();
        RelationSettings {
            train: TrainConfig::default(),
            mode: r.mode,
            type_dim: r.type_dim,
            bilinear_dim: r.bilinear_dim,
            finetune_encoder: r.finetune_encoder,
            train_on_predicted: false,
            name_substitution: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub beta: f64,
    pub objective: Objective,
    /// Grid spacing; the grid runs from `step` to `1 - step`.
    pub grid_step: f64,
    pub refine: bool,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            beta: 1.0,
            objective: Objective::Micro,
            grid_step: 0.05,
            refine: true,
        }
    }
}

impl CalibrationSettings {
    pub fn grid(&self) -> Result<GridSpec> {
        if !(self.grid_step > 0.0 && self.grid_step < 1.0) {
            return Err(Error::validation(format!(
                "calibration.grid_step = {} must lie in (0, 1)",
                self.grid_step
            )));
        }
        let n = (1.0 / self.grid_step).round() as usize;
        let g: Vec<f64> = (1..n)
            .map(|i| i as f64 * self.grid_step)
            .filter(|&x| x < 1.0)
            .collect();
        Ok(GridSpec {
            epsilon_m: g.clone(),
            epsilon_c: g.clone(),
            epsilon_r: g,
            refine: self.refine,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvaluationSettings {
    pub macro_scope: MacroScope,
    pub bootstrap_samples: usize,
    pub bootstrap_seed: u64,
}

impl Default for EvaluationSettings {
    fn default() -> Self {
        EvaluationSettings {
            macro_scope: MacroScope::Supported,
            bootstrap_samples: 50,
            bootstrap_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSettings {
    pub modes: Vec<RelationMode>,
}

impl Default for AblationSettings {
    fn default() -> Self {
        AblationSettings {
            modes: RelationMode::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub encoder: EncoderSettings,
    pub representation: RepConfig,
    pub mention: MentionSettings,
    pub biencoder: BiEncoderTrainConfig,
    pub crossencoder: CrossEncoderTrainConfig,
    pub relation: RelationSettings,
    pub pipeline: PipelineConfig,
    pub calibration: CalibrationSettings,
    pub evaluation: EvaluationSettings,
    pub ablation: AblationSettings,
}

impl RunConfig {
    /// Settings sized for the synthetic corpus on a CPU: higher learning
    /// rates and fewer epochs than the defaults, a short context window,
    /// and fewer ranker negatives. The recognizer is wider and trained with
    /// word dropout, and ranker and relation extractor see renamed mentions,
    /// so names absent from training are still found and linked.
    pub fn synthetic() -> Self {
        let train = |epochs, batch_size, lr| TrainConfig {
            epochs,
            batch_size,
            lr,
            ..TrainConfig::default()
        };
        let mut c = RunConfig {
            encoder: EncoderSettings {
                dim: 32,
                layers: 2,
                heads: 4,
                ffn_dim: 64,
                max_positions: 64,
            },
            representation: RepConfig {
                window: 6,
                max_len: 48,
                include_description: true,
            },
            ..RunConfig::default()
        };
        c.mention.train.train = train(12, 16, 3e-3);
        c.mention.max_span_len = 6;
        c.mention.train.word_dropout = 0.15;
        c.mention.encoder = Some(EncoderSettings {
            dim: 64,
            ffn_dim: 128,
            ..c.encoder
        });
        c.biencoder.train = train(4, 32, 2e-3);
        c.biencoder.gamma = 4;
        c.crossencoder.train = train(3, 16, 2e-3);
        c.crossencoder.negatives = 3;
        c.crossencoder.name_substitution = 0.5;
        c.relation.name_substitution = 0.5;
        c.relation.train = train(4, 16, 1e-3);
        c.pipeline.max_mentions = 16;
        c
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            e => e,
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let line = e
                .span()
                .map(|s| text[..s.start.min(text.len())].lines().count().max(1))
                .unwrap_or(0);
            Error::Parse {
                path: PathBuf::from("<config>"),
                line,
                message: e.message().to_string(),
            }
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("config serialization: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }

    pub fn relation_config(&self, mode: RelationMode) -> RelationConfig {
        RelationConfig {
            mode,
            type_dim: self.relation.type_dim,
            bilinear_dim: self.relation.bilinear_dim,
            finetune_encoder: self.relation.finetune_encoder,
            rep: self.representation,
        }
    }
}
