//! Backbone dimensions.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// ViT-style encoder over a grid of patch tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisionEncoderSpec {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// Raw features per patch.
    pub patch_dim: usize,
}

impl VisionEncoderSpec {
    pub fn num_patches(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    pub fn validate(&self) -> Result<()> {
        check_positive("model.vision_layers", self.num_layers)?;
        check_positive("model.vision_heads", self.num_heads)?;
        check_positive("model.vision_dim", self.model_dim)?;
        check_positive("model.patch_rows", self.patch_rows)?;
        check_positive("model.patch_cols", self.patch_cols)?;
        check_positive("model.patch_dim", self.patch_dim)?;
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model.vision_dim",
                format!("{} is not divisible by {} heads", self.model_dim, self.num_heads),
            ));
        }
        Ok(())
    }
}

/// Decoder-only causal language model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanguageModelSpec {
    pub num_layers: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl LanguageModelSpec {
    pub fn validate(&self) -> Result<()> {
        check_positive("model.llm_layers", self.num_layers)?;
        check_positive("model.llm_heads", self.num_heads)?;
        check_positive("model.llm_dim", self.model_dim)?;
        check_positive("model.max_seq_len", self.max_seq_len)?;
        if self.vocab_size < 2 {
            return Err(Error::config("model.vocab_size", "must be at least 2"));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::config(
                "model.llm_dim",
                format!("{} is not divisible by {} heads", self.model_dim, self.num_heads),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vision: VisionEncoderSpec,
    pub language: LanguageModelSpec,
}

impl ModelSpec {
    /// Desk-scale defaults.
    pub fn desk() -> Self {
        ModelSpec {
            vision: VisionEncoderSpec {
                num_layers: 4,
                model_dim: 64,
                num_heads: 4,
                patch_rows: 4,
                patch_cols: 4,
                patch_dim: crate::tasks::PATCH_DIM,
            },
            language: LanguageModelSpec {
                num_layers: 4,
                model_dim: 128,
                num_heads: 4,
                vocab_size: 64,
                max_seq_len: 256,
            },
        }
    }

    /// CLIP-L / Vicuna-7B sized dimensions, used only for parameter accounting.
    pub fn reference_scale() -> Self {
        ModelSpec {
            vision: VisionEncoderSpec {
                num_layers: 24,
                model_dim: 1024,
                num_heads: 16,
                patch_rows: 16,
                patch_cols: 16,
                patch_dim: 588,
            },
            language: LanguageModelSpec {
                num_layers: 32,
                model_dim: 4096,
                num_heads: 32,
                vocab_size: 32000,
                max_seq_len: 1024,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.language.validate()
    }
}

fn check_positive(field: &str, value: usize) -> Result<()> {
    if value == 0 {
        return Err(Error::config(field, "must be at least 1"));
    }
    Ok(())
}
