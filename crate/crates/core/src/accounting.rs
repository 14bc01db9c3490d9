//! Trainable-parameter accounting.

use serde::Serialize;

use crate::model::backbone_decls;
use crate::prompt::PromptPlan;
use crate::spec::ModelSpec;

/// Nominal size of a 7B language model, the denominator used for the
/// reference-scale ratios.
pub const REFERENCE_BASE_TOTAL: u64 = 7_000_000_000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamAccount {
    pub visual_prompts: u64,
    pub textual_prompts: u64,
    pub interaction: u64,
    pub head: u64,
    pub trainable: u64,
    pub base_total: u64,
    /// `trainable / base_total`.
    pub ratio: f64,
    /// `trainable / (base_total + trainable)`.
    pub ratio_of_combined: f64,
}

impl ParamAccount {
    pub fn percent(&self) -> f64 {
        100.0 * self.ratio
    }

    /// Percentage rounded to two decimals, e.g. `"0.09%"`.
    pub fn percent_rounded(&self) -> String {
        format!("{:.2}%", self.percent())
    }
}

/// Parameter count of the frozen backbone, head included.
pub fn backbone_total(spec: &ModelSpec) -> u64 {
    backbone_decls(spec)
        .iter()
        .map(|d| d.shape.iter().product::<usize>() as u64)
        .sum()
}

/// Closed-form count of what a run trains. Only the interaction layer and
/// head flags decide whether those components count.
pub fn count_params_ratio(
    spec: &ModelSpec,
    plan: &PromptPlan,
    base_total: u64,
    head_trainable: bool,
    interaction_trainable: bool,
) -> ParamAccount {
    let (dv, dt, v) = (
        spec.vision.model_dim as u64,
        spec.language.model_dim as u64,
        spec.language.vocab_size as u64,
    );
    let visual_prompts = plan.visual_layers(spec).len() as u64 * plan.visual_len as u64 * dv;
    let textual_prompts = plan.textual_layers(spec).len() as u64 * plan.textual_len as u64 * dt;
    let interaction = if interaction_trainable { dv * dt + dt } else { 0 };
    let head = if head_trainable { dt * v + v } else { 0 };
    let trainable = visual_prompts + textual_prompts + interaction + head;
    let ratio = if base_total == 0 { 0.0 } else { trainable as f64 / base_total as f64 };
    let combined = base_total + trainable;
    ParamAccount {
        visual_prompts,
        textual_prompts,
        interaction,
        head,
        trainable,
        base_total,
        ratio,
        ratio_of_combined: if combined == 0 { 0.0 } else { trainable as f64 / combined as f64 },
    }
}
