//! Run configuration: one TOML document with a section per component.
//!
//! ```toml
//! seed = 1
//! [model]
//! vision_layers = 4
//! [prompt]
//! textual_len = 10
//! schedule = "all"
//! ```
//!
//! Every key is optional and falls back to the desk-scale default; unknown
//! keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::pipeline::Architecture;
use crate::prompt::{InitPolicy, PromptPlan, ScheduleVariant};
use crate::spec::{LanguageModelSpec, ModelSpec, VisionEncoderSpec};
use crate::tasks::{required_vocab, SuiteConfig};
use crate::trainer::TrainConfig;
use crate::{Error, Result};

pub const ECHO_FILE: &str = "config.echo";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub vision_layers: usize,
    pub vision_dim: usize,
    pub vision_heads: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    pub patch_dim: usize,
    pub llm_layers: usize,
    pub llm_dim: usize,
    pub llm_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection::from(ModelSpec::desk())
    }
}

impl From<ModelSpec> for ModelSection {
    fn from(s: ModelSpec) -> Self {
        ModelSection {
            vision_layers: s.vision.num_layers,
            vision_dim: s.vision.model_dim,
            vision_heads: s.vision.num_heads,
            patch_rows: s.vision.patch_rows,
            patch_cols: s.vision.patch_cols,
            patch_dim: s.vision.patch_dim,
            llm_layers: s.language.num_layers,
            llm_dim: s.language.model_dim,
            llm_heads: s.language.num_heads,
            vocab_size: s.language.vocab_size,
            max_seq_len: s.language.max_seq_len,
        }
    }
}

impl From<ModelSection> for ModelSpec {
    fn from(m: ModelSection) -> Self {
        ModelSpec {
            vision: VisionEncoderSpec {
                num_layers: m.vision_layers,
                model_dim: m.vision_dim,
                num_heads: m.vision_heads,
                patch_rows: m.patch_rows,
                patch_cols: m.patch_cols,
                patch_dim: m.patch_dim,
            },
            language: LanguageModelSpec {
                num_layers: m.llm_layers,
                model_dim: m.llm_dim,
                num_heads: m.llm_heads,
                vocab_size: m.vocab_size,
                max_seq_len: m.max_seq_len,
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitName {
    Xavier,
    RandomNormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptSection {
    pub textual_len: usize,
    pub visual_len: usize,
    pub schedule: ScheduleVariant,
    pub init: InitName,
    /// Standard deviation for `init = "random_normal"`.
    pub init_sigma: f64,
}

pub const DEFAULT_INIT_SIGMA: f64 = 0.02;

impl Default for PromptSection {
    fn default() -> Self {
        PromptSection::from(PromptPlan::default())
    }
}

impl From<PromptPlan> for PromptSection {
    fn from(p: PromptPlan) -> Self {
        let (init, init_sigma) = match p.init {
            InitPolicy::Xavier => (InitName::Xavier, DEFAULT_INIT_SIGMA),
            InitPolicy::RandomNormal { sigma } => (InitName::RandomNormal, sigma),
        };
        PromptSection {
            textual_len: p.textual_len,
            visual_len: p.visual_len,
            schedule: p.schedule,
            init,
            init_sigma,
        }
    }
}

impl From<PromptSection> for PromptPlan {
    fn from(p: PromptSection) -> Self {
        PromptPlan {
            textual_len: p.textual_len,
            visual_len: p.visual_len,
            schedule: p.schedule,
            init: match p.init {
                InitName::Xavier => InitPolicy::Xavier,
                InitName::RandomNormal => InitPolicy::RandomNormal { sigma: p.init_sigma },
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    /// Project visual-prompt outputs into the language model as well.
    pub project_prompts: bool,
    pub trainable: bool,
}

impl Default for FusionSection {
    fn default() -> Self {
        FusionSection {
            project_prompts: true,
            trainable: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub head_trainable: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            base_lr: t.base_lr,
            warmup_ratio: t.warmup_ratio,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            head_trainable: t.head_trainable,
            max_steps: t.max_steps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub prompt: PromptSection,
    pub fusion: FusionSection,
    pub train: TrainSection,
    pub tasks: SuiteConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 1,
            model: ModelSection::default(),
            prompt: PromptSection::default(),
            fusion: FusionSection::default(),
            train: TrainSection::default(),
            tasks: SuiteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e.span().map(|s| text[s].trim().to_string()).unwrap_or_default();
            Error::config(field, e.message().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config is always representable")
    }

    /// Checks every field before anything is allocated.
    pub fn validate(&self) -> Result<()> {
        self.architecture().validate()?;
        self.train_config().validate()?;
        self.tasks.validate()?;
        let need = required_vocab(self.tasks.num_tasks);
        if self.model.vocab_size < need {
            return Err(Error::config(
                "model.vocab_size",
                format!("{} tasks need at least {need} tokens", self.tasks.num_tasks),
            ));
        }
        Ok(())
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            spec: self.model.into(),
            plan: self.prompt.into(),
            project_prompts: self.fusion.project_prompts,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            base_lr: t.base_lr,
            warmup_ratio: t.warmup_ratio,
            epochs: t.epochs,
            batch_size: t.batch_size,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            head_trainable: t.head_trainable,
            interaction_trainable: self.fusion.trainable,
            max_steps: t.max_steps,
        }
    }

    /// Writes `config.echo` into `dir`.
    pub fn write_echo(&self, dir: &Path) -> Result<()> {
        let path = dir.join(ECHO_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(path, e))
    }
}
