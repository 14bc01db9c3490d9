//! Learnable visual and textual soft prompts, their layer schedule and
//! initialization, and insertion into a running token sequence.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use m2pt_tensor::{ParamStore, Scalar, Tensor};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::model::Graph;
use crate::seed::rng_for;
use crate::sequence::{Region, TokenSequence};
use crate::spec::ModelSpec;
use crate::{Error, Result};

/// Which layers receive fresh prompts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleVariant {
    FirstLayer,
    OddLayers,
    TopHalf,
    LatterHalf,
    All,
}

impl ScheduleVariant {
    pub const ALL: [ScheduleVariant; 5] = [
        ScheduleVariant::FirstLayer,
        ScheduleVariant::OddLayers,
        ScheduleVariant::TopHalf,
        ScheduleVariant::LatterHalf,
        ScheduleVariant::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScheduleVariant::FirstLayer => "first_layer",
            ScheduleVariant::OddLayers => "odd_layers",
            ScheduleVariant::TopHalf => "top_half",
            ScheduleVariant::LatterHalf => "latter_half",
            ScheduleVariant::All => "all",
        }
    }
}

impl fmt::Display for ScheduleVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ScheduleVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleVariant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::config("prompt.schedule", format!("unknown schedule `{s}`")))
    }
}

/// 1-based indices of the layers that receive prompts.
pub fn schedule_layers(variant: ScheduleVariant, num_layers: usize) -> BTreeSet<usize> {
    let half = num_layers.div_ceil(2);
    match variant {
        ScheduleVariant::FirstLayer => (1..=num_layers.min(1)).collect(),
        ScheduleVariant::OddLayers => (1..=num_layers).step_by(2).collect(),
        ScheduleVariant::TopHalf => (1..=half).collect(),
        ScheduleVariant::LatterHalf => (half.max(1)..=num_layers).collect(),
        ScheduleVariant::All => (1..=num_layers).collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitPolicy {
    /// Uniform in `±sqrt(6 / 2d)`, taking fan-in = fan-out = model width.
    Xavier,
    RandomNormal { sigma: f64 },
}

impl InitPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            InitPolicy::Xavier => "xavier",
            InitPolicy::RandomNormal { .. } => "random_normal",
        }
    }
}

pub fn xavier_bound(d: usize) -> f64 {
    (6.0 / (2 * d) as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptPlan {
    pub textual_len: usize,
    pub visual_len: usize,
    pub schedule: ScheduleVariant,
    pub init: InitPolicy,
}

impl Default for PromptPlan {
    fn default() -> Self {
        PromptPlan {
            textual_len: 10,
            visual_len: 10,
            schedule: ScheduleVariant::All,
            init: InitPolicy::Xavier,
        }
    }
}

impl PromptPlan {
    pub fn validate(&self) -> Result<()> {
        if let InitPolicy::RandomNormal { sigma } = self.init {
            if !(sigma.is_finite() && sigma > 0.0) {
                return Err(Error::config("prompt.init_sigma", format!("must be positive, got {sigma}")));
            }
        }
        Ok(())
    }

    /// Encoder layers holding a visual prompt matrix (empty when `visual_len` is 0).
    pub fn visual_layers(&self, spec: &ModelSpec) -> BTreeSet<usize> {
        if self.visual_len == 0 {
            return BTreeSet::new();
        }
        schedule_layers(self.schedule, spec.vision.num_layers)
    }

    pub fn textual_layers(&self, spec: &ModelSpec) -> BTreeSet<usize> {
        if self.textual_len == 0 {
            return BTreeSet::new();
        }
        schedule_layers(self.schedule, spec.language.num_layers)
    }

    pub fn prompt_params(&self, spec: &ModelSpec) -> usize {
        self.visual_layers(spec).len() * self.visual_len * spec.vision.model_dim
            + self.textual_layers(spec).len() * self.textual_len * spec.language.model_dim
    }
}

pub fn visual_prompt_name(i: usize) -> String {
    format!("prompt.visual.layer{i}")
}

pub fn textual_prompt_name(j: usize) -> String {
    format!("prompt.textual.layer{j}")
}

/// Every prompt matrix the plan requires, with its shape.
pub fn prompt_shapes(plan: &PromptPlan, spec: &ModelSpec) -> Vec<(String, Vec<usize>)> {
    let visual = plan
        .visual_layers(spec)
        .into_iter()
        .map(|i| (visual_prompt_name(i), vec![plan.visual_len, spec.vision.model_dim]));
    let textual = plan
        .textual_layers(spec)
        .into_iter()
        .map(|j| (textual_prompt_name(j), vec![plan.textual_len, spec.language.model_dim]));
    visual.chain(textual).collect()
}

fn sample(policy: InitPolicy, rows: usize, d: usize, rng: &mut impl Rng) -> Tensor<f32> {
    let data = match policy {
        InitPolicy::Xavier => {
            let b = xavier_bound(d) as f32;
            (0..rows * d).map(|_| rng.random_range(-b..=b)).collect()
        }
        InitPolicy::RandomNormal { sigma } => {
            let dist = Normal::new(0.0, sigma).expect("validated sigma");
            (0..rows * d).map(|_| dist.sample(rng) as f32).collect()
        }
    };
    Tensor::new(vec![rows, d], data).expect("prompt shape")
}

/// Fresh prompt matrices. Each matrix has its own random stream, so changing
/// one tower's length or schedule leaves the other tower's prompts intact.
pub fn init_prompts(plan: &PromptPlan, spec: &ModelSpec, seed: u64) -> ParamStore<f32> {
    prompt_shapes(plan, spec)
        .into_iter()
        .map(|(name, shape)| {
            let mut rng = rng_for(seed, &name);
            let t = sample(plan.init, shape[0], shape[1], &mut rng);
            (name, t)
        })
        .collect()
}

/// Deep-prompt insertion with replace semantics: prompt rows already at the
/// front of each sequence are dropped, then `prompt` (if any) is prepended.
fn insert_prompts<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    region: Region,
    prompt: Option<&str>,
    prev: &TokenSequence,
) -> Result<TokenSequence> {
    for layout in &prev.layouts {
        let r = layout.range(region);
        if !r.is_empty() && r.start != 0 {
            return Err(Error::Layout(format!("{region} positions must lead the sequence, found at {r:?}")));
        }
    }
    let present = prev.layouts.iter().any(|l| l.width(region) > 0);
    if prompt.is_none() && !present {
        return Ok(prev.clone());
    }
    gather_carried(g, region, prompt, prev)
}

fn gather_carried<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    region: Region,
    prompt: Option<&str>,
    prev: &TokenSequence,
) -> Result<TokenSequence> {
    let mut sources = vec![prev.value];
    let mut len = 0;
    if let Some(name) = prompt {
        let p = g.param(name)?;
        let shape = g.tape.shape(p);
        let width = g.tape.shape(prev.value)[1];
        if shape[1] != width {
            return Err(Error::Dimension(format!(
                "prompt `{name}` has width {}, sequence has {width}",
                shape[1]
            )));
        }
        len = shape[0];
        sources.push(p);
    }
    let mut index = Vec::new();
    let mut layouts = Vec::with_capacity(prev.layouts.len());
    for (offset, layout) in prev.offsets().into_iter().zip(&prev.layouts) {
        index.extend((0..len).map(|r| (1, r)));
        let skip = layout.width(region);
        index.extend((offset + skip..offset + layout.len()).map(|r| (0, r)));
        layouts.push(layout.with_width(region, len));
    }
    let value = g.tape.gather_rows(&sources, &index)?;
    Ok(TokenSequence {
        value,
        layouts,
        causal: prev.causal,
    })
}

/// Input of encoder layer `i`: carried tokens with `P_v^i` in front when
/// layer `i` is scheduled.
pub fn insert_visual_prompts<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    plan: &PromptPlan,
    spec: &ModelSpec,
    layer: usize,
    prev: &TokenSequence,
) -> Result<TokenSequence> {
    let name = plan.visual_layers(spec).contains(&layer).then(|| visual_prompt_name(layer));
    insert_prompts(g, Region::VisualPrompt, name.as_deref(), prev)
}

/// Input of language-model layer `j`, mirroring [`insert_visual_prompts`].
pub fn insert_textual_prompts<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    plan: &PromptPlan,
    spec: &ModelSpec,
    layer: usize,
    prev: &TokenSequence,
) -> Result<TokenSequence> {
    let name = plan.textual_layers(spec).contains(&layer).then(|| textual_prompt_name(layer));
    insert_prompts(g, Region::TextualPrompt, name.as_deref(), prev)
}
