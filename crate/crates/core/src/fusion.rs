//! Interaction layer from encoder space into the language model, and
//! assembly of the language-model input.

use std::ops::Range;

use m2pt_tensor::{ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::model::Graph;
use crate::seed::rng_for;
use crate::sequence::{Layout, Region, TokenSequence};
use crate::spec::{LanguageModelSpec, ModelSpec};
use crate::{Error, Result};

pub const FUSION_WEIGHT: &str = "fusion.weight";
pub const FUSION_BIAS: &str = "fusion.bias";

/// Xavier-uniform weight over `d_v -> d_t`, zero bias.
pub fn init_interaction(spec: &ModelSpec, seed: u64) -> ParamStore<f32> {
    let (dv, dt) = (spec.vision.model_dim, spec.language.model_dim);
    let bound = (6.0 / (dv + dt) as f64).sqrt() as f32;
    let mut rng = rng_for(seed, "fusion");
    let w = (0..dv * dt).map(|_| rng.random_range(-bound..=bound)).collect();
    [
        (FUSION_WEIGHT.to_string(), Tensor::new(vec![dv, dt], w).expect("fusion shape")),
        (FUSION_BIAS.to_string(), Tensor::zeros(vec![dt])),
    ]
    .into_iter()
    .collect()
}

/// Position-wise affine map of final encoder states into the language
/// model width. With `project_prompts == false` the visual-prompt rows are
/// dropped first and only image tokens cross over.
pub fn project_vision<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    spec: &ModelSpec,
    encoder_output: &TokenSequence,
    project_prompts: bool,
) -> Result<TokenSequence> {
    let shape = g.tape.shape(encoder_output.value).to_vec();
    if shape.len() != 2 || shape[1] != spec.vision.model_dim {
        return Err(Error::Dimension(format!(
            "interaction layer expects width {}, got {shape:?}",
            spec.vision.model_dim
        )));
    }
    let mut input = encoder_output.clone();
    if !project_prompts && input.layouts.iter().any(|l| l.width(Region::VisualPrompt) > 0) {
        let mut index = Vec::new();
        for (offset, l) in input.offsets().into_iter().zip(&input.layouts) {
            index.extend(l.range(Region::ImageTokens).map(|r| (0, offset + r)));
        }
        input = TokenSequence {
            value: g.tape.gather_rows(&[input.value], &index)?,
            layouts: input.layouts.iter().map(|l| l.without(Region::VisualPrompt)).collect(),
            causal: input.causal,
        };
    }
    let value = g.linear(input.value, "fusion")?;
    Ok(TokenSequence {
        value,
        layouts: input.layouts,
        causal: true,
    })
}

/// Language-model input plus the target tokens it is trained to emit.
#[derive(Clone, Debug)]
pub struct FusedSequence {
    pub seq: TokenSequence,
    pub targets: Vec<Vec<usize>>,
}

impl FusedSequence {
    /// All six region ranges of sequence `b`, empty ones included.
    pub fn boundaries(&self, b: usize) -> Vec<(Region, Range<usize>)> {
        let l = &self.seq.layouts[b];
        Region::ALL.iter().map(|&r| (r, l.range(r))).collect()
    }

    pub fn loss_mask(&self, b: usize) -> Vec<bool> {
        self.seq.layouts[b].tags().into_iter().map(|r| r == Region::Target).collect()
    }
}

/// Text tokens of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct TextParts<'a> {
    pub system: &'a [usize],
    pub instruction: &'a [usize],
    pub target: &'a [usize],
}

/// Concatenate `[P_t | system | projected vision | instruction | target]`
/// per sequence. Text tokens come from the frozen embedding table; every
/// non-prompt position gets a learned positional embedding counted from the
/// first non-prompt position.
pub fn assemble_llm_input<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    spec: &LanguageModelSpec,
    textual_prompt: Option<Var>,
    vision: &TokenSequence,
    text: &[TextParts<'_>],
) -> Result<FusedSequence> {
    if text.len() != vision.batch_size() {
        return Err(Error::Dimension(format!(
            "{} text parts for {} images",
            text.len(),
            vision.batch_size()
        )));
    }
    let vshape = g.tape.shape(vision.value);
    if vshape[1] != spec.model_dim {
        return Err(Error::Dimension(format!(
            "projected vision has width {}, language model expects {}",
            vshape[1], spec.model_dim
        )));
    }
    let lt = match textual_prompt {
        Some(p) => {
            let s = g.tape.shape(p);
            if s[1] != spec.model_dim {
                return Err(Error::Dimension(format!("textual prompt width {} != {}", s[1], spec.model_dim)));
            }
            s[0]
        }
        None => 0,
    };

    let mut content = Vec::new();
    let mut positions = Vec::new();
    let mut layouts = Vec::with_capacity(text.len());
    for ((offset, vl), parts) in vision.offsets().into_iter().zip(&vision.layouts).zip(text) {
        for &t in parts.system.iter().chain(parts.instruction).chain(parts.target) {
            if t >= spec.vocab_size {
                return Err(Error::Capacity(format!("token {t} outside vocabulary of {}", spec.vocab_size)));
            }
        }
        let layout = Layout::new(vec![
            (Region::TextualPrompt, lt),
            (Region::SystemText, parts.system.len()),
            (Region::VisualPrompt, vl.width(Region::VisualPrompt)),
            (Region::ImageTokens, vl.width(Region::ImageTokens)),
            (Region::Instruction, parts.instruction.len()),
            (Region::Target, parts.target.len()),
        ])?;
        if layout.len() > spec.max_seq_len {
            return Err(Error::Capacity(format!(
                "fused sequence of {} positions exceeds max_seq_len {}",
                layout.len(),
                spec.max_seq_len
            )));
        }
        let start = content.len();
        content.extend(parts.system.iter().map(|&t| (0, t)));
        content.extend((offset..offset + vl.len()).map(|r| (1, r)));
        content.extend(parts.instruction.iter().chain(parts.target).map(|&t| (0, t)));
        positions.extend((0..content.len() - start).map(|p| (0, p)));
        layouts.push(layout);
    }

    let table = g.param("llm.token_embed")?;
    let x = g.tape.gather_rows(&[table, vision.value], &content)?;
    let pos = g.param("llm.pos_embed")?;
    let pos = g.tape.gather_rows(&[pos], &positions)?;
    let mut value = g.tape.add(x, pos)?;

    if let Some(p) = textual_prompt.filter(|_| lt > 0) {
        let mut index = Vec::new();
        let mut row = 0;
        for l in &layouts {
            index.extend((0..lt).map(|r| (1, r)));
            let n = l.len() - lt;
            index.extend((row..row + n).map(|r| (0, r)));
            row += n;
        }
        value = g.tape.gather_rows(&[value, p], &index)?;
    }
    Ok(FusedSequence {
        seq: TokenSequence {
            value,
            layouts,
            causal: true,
        },
        targets: text.iter().map(|t| t.target.to_vec()).collect(),
    })
}
