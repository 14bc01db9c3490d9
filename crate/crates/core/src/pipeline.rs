//! End-to-end forward pass: prompted encoder, interaction layer, prompted
//! language model, head. Also next-token loss and greedy decoding.

use std::collections::{BTreeMap, BTreeSet};

use m2pt_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::fusion::{
    assemble_llm_input, init_interaction, project_vision, FusedSequence, TextParts, FUSION_BIAS, FUSION_WEIGHT,
};
use crate::model::{
    argmax_rows, backbone_decls, encoder_layer_forward, head_logits, init_backbone, llm_layer_forward, patchify_embed, Graph,
    LayerOutput,
};
use crate::prompt::{init_prompts, prompt_shapes, insert_textual_prompts, insert_visual_prompts, PromptPlan};
use crate::sequence::{Region, TokenSequence};
use crate::spec::ModelSpec;
use crate::{Error, Result};

/// Everything that fixes the parameter layout and the forward wiring.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub spec: ModelSpec,
    pub plan: PromptPlan,
    pub project_prompts: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        self.plan.validate()
    }
}

/// Name and shape of every parameter the architecture owns.
pub fn declared_shapes(arch: &Architecture) -> BTreeMap<String, Vec<usize>> {
    let mut shapes: BTreeMap<String, Vec<usize>> = backbone_decls(&arch.spec)
        .into_iter()
        .map(|d| (d.name, d.shape))
        .collect();
    shapes.extend(prompt_shapes(&arch.plan, &arch.spec));
    let (dv, dt) = (arch.spec.vision.model_dim, arch.spec.language.model_dim);
    shapes.insert(FUSION_WEIGHT.into(), vec![dv, dt]);
    shapes.insert(FUSION_BIAS.into(), vec![dt]);
    shapes
}

/// One multimodal input. `target` may be a partial prefix while decoding.
#[derive(Clone, Copy, Debug)]
pub struct Example<'a> {
    pub image: &'a Tensor<f32>,
    pub instruction: &'a [usize],
    pub target: &'a [usize],
}

/// Every intermediate sequence of one forward pass.
pub struct Trace {
    /// Input of each encoder layer, after prompt insertion.
    pub encoder_inputs: Vec<TokenSequence>,
    pub encoder_layers: Vec<LayerOutput>,
    pub projected: TokenSequence,
    /// Language-model input before layer-1 textual prompts are inserted.
    pub fused: FusedSequence,
    pub llm_inputs: Vec<TokenSequence>,
    pub llm_layers: Vec<LayerOutput>,
    /// Final-normed language-model states, laid out like the last layer.
    pub hidden: TokenSequence,
}

pub fn forward<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    arch: &Architecture,
    system: &[usize],
    batch: &[Example<'_>],
) -> Result<Trace> {
    if batch.is_empty() {
        return Err(Error::Dimension("empty batch".into()));
    }
    let spec = &arch.spec;
    let images: Vec<&Tensor<f32>> = batch.iter().map(|e| e.image).collect();
    let mut seq = patchify_embed(g, &spec.vision, &images)?;
    let mut encoder_inputs = Vec::with_capacity(spec.vision.num_layers);
    let mut encoder_layers = Vec::with_capacity(spec.vision.num_layers);
    for i in 1..=spec.vision.num_layers {
        let input = insert_visual_prompts(g, &arch.plan, spec, i, &seq)?;
        let out = encoder_layer_forward(g, &spec.vision, i, &input)?;
        seq = out.seq.clone();
        encoder_inputs.push(input);
        encoder_layers.push(out);
    }
    seq.value = g.norm(seq.value, "encoder.final_norm")?;
    let projected = project_vision(g, spec, &seq, arch.project_prompts)?;

    let text: Vec<TextParts<'_>> = batch
        .iter()
        .map(|e| TextParts {
            system,
            instruction: e.instruction,
            target: e.target,
        })
        .collect();
    let fused = assemble_llm_input(g, &spec.language, None, &projected, &text)?;
    let mut seq = fused.seq.clone();
    let mut llm_inputs = Vec::with_capacity(spec.language.num_layers);
    let mut llm_layers = Vec::with_capacity(spec.language.num_layers);
    for j in 1..=spec.language.num_layers {
        let input = insert_textual_prompts(g, &arch.plan, spec, j, &seq)?;
        let out = llm_layer_forward(g, &spec.language, j, &input)?;
        seq = out.seq.clone();
        llm_inputs.push(input);
        llm_layers.push(out);
    }
    seq.value = g.norm(seq.value, "llm.final_norm")?;
    Ok(Trace {
        encoder_inputs,
        encoder_layers,
        projected,
        fused,
        llm_inputs,
        llm_layers,
        hidden: seq,
    })
}

/// Rows whose next-token prediction is a target token, with those tokens.
pub fn target_predictors(hidden: &TokenSequence, targets: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut tokens = Vec::new();
    for ((offset, layout), target) in hidden.offsets().into_iter().zip(&hidden.layouts).zip(targets) {
        let r = layout.range(Region::Target);
        if r.len() != target.len() {
            return Err(Error::Layout(format!("target region of {} for {} tokens", r.len(), target.len())));
        }
        if r.start == 0 && !r.is_empty() {
            return Err(Error::Layout("target region cannot open the sequence".into()));
        }
        rows.extend(r.map(|p| offset + p - 1));
        tokens.extend_from_slice(target);
    }
    Ok((rows, tokens))
}

/// Mean next-token cross-entropy over target positions.
pub fn loss<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    arch: &Architecture,
    system: &[usize],
    batch: &[Example<'_>],
) -> Result<(Var, Trace)> {
    let trace = forward(g, arch, system, batch)?;
    let (rows, tokens) = target_predictors(&trace.hidden, &trace.fused.targets)?;
    let index: Vec<_> = rows.into_iter().map(|r| (0, r)).collect();
    let h = g.tape.gather_rows(&[trace.hidden.value], &index)?;
    let logits = head_logits(g, h)?;
    let mask = vec![true; tokens.len()];
    let l = g.tape.cross_entropy(logits, &tokens, &mask)?;
    Ok((l, trace))
}

/// Backbone, prompts and interaction layer as one named parameter set.
#[derive(Clone, Debug)]
pub struct M2ptModel {
    pub arch: Architecture,
    pub params: ParamStore<f32>,
}

impl M2ptModel {
    /// Each component draws from its own seed stream, so e.g. dropping the
    /// visual prompts leaves the backbone, textual prompts and interaction
    /// layer bitwise identical.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut params = init_backbone(&arch.spec, seed);
        for (name, t) in init_prompts(&arch.plan, &arch.spec, seed)
            .iter()
            .chain(init_interaction(&arch.spec, seed).iter())
        {
            params.insert(name, t.clone());
        }
        Ok(M2ptModel { arch, params })
    }

    pub fn loss_value(&self, system: &[usize], batch: &[Example<'_>]) -> Result<f32> {
        let none = BTreeSet::new();
        let mut tape = Tape::<f32>::new();
        let mut g = Graph::new(&mut tape, &self.params, &none);
        let (l, _) = loss(&mut g, &self.arch, system, batch)?;
        Ok(tape.value(l).item())
    }

    /// Greedy decoding of up to `max_len` tokens per example, stopping each
    /// sequence after it emits `end`. The emitted `end` is kept.
    pub fn greedy_decode(
        &self,
        system: &[usize],
        batch: &[Example<'_>],
        max_len: usize,
        end: usize,
    ) -> Result<Vec<Vec<usize>>> {
        let none = BTreeSet::new();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); batch.len()];
        for _ in 0..max_len {
            let open: Vec<usize> = (0..batch.len()).filter(|&b| out[b].last() != Some(&end)).collect();
            if open.is_empty() {
                break;
            }
            let examples: Vec<Example<'_>> = open
                .iter()
                .map(|&b| Example {
                    target: &out[b],
                    ..batch[b]
                })
                .collect();
            let mut tape = Tape::<f32>::new();
            let mut g = Graph::new(&mut tape, &self.params, &none);
            let trace = forward(&mut g, &self.arch, system, &examples)?;
            let hidden = &trace.hidden;
            let index: Vec<_> = hidden
                .offsets()
                .into_iter()
                .zip(&hidden.layouts)
                .map(|(o, l)| (0, o + l.len() - 1))
                .collect();
            let h = g.tape.gather_rows(&[hidden.value], &index)?;
            let logits = head_logits(&mut g, h)?;
            let next = argmax_rows(tape.value(logits));
            for (&b, t) in open.iter().zip(next) {
                out[b].push(t);
            }
        }
        Ok(out)
    }
}
