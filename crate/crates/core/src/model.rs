//! Frozen backbones: a ViT-style vision encoder and a causal language model
//! with an output head. Pre-norm blocks, GELU MLP with 4x expansion.

use std::collections::BTreeSet;

use m2pt_tensor::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::sequence::{Layout, Region, TokenSequence};
use crate::seed::rng_for;
use crate::spec::{LanguageModelSpec, ModelSpec, VisionEncoderSpec};
use crate::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_EXPANSION: usize = 4;
/// Std of the position and token embedding tables.
pub const POS_EMBED_STD: f64 = 0.1;
pub const TOKEN_EMBED_STD: f64 = 0.1;

/// How a freshly created parameter is filled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    Normal(f64),
}

/// A parameter the backbone expects, before allocation.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

fn decl(name: String, shape: Vec<usize>, init: Init) -> ParamDecl {
    ParamDecl { name, shape, init }
}

fn linear_decls(prefix: &str, fan_in: usize, fan_out: usize) -> [ParamDecl; 2] {
    [
        decl(
            format!("{prefix}.weight"),
            vec![fan_in, fan_out],
            Init::Normal(1.0 / (fan_in as f64).sqrt()),
        ),
        decl(format!("{prefix}.bias"), vec![fan_out], Init::Zeros),
    ]
}

fn norm_decls(prefix: &str, d: usize) -> [ParamDecl; 2] {
    [
        decl(format!("{prefix}.gain"), vec![d], Init::Ones),
        decl(format!("{prefix}.bias"), vec![d], Init::Zeros),
    ]
}

fn block_decls(prefix: &str, d: usize) -> Vec<ParamDecl> {
    let hidden = d * MLP_EXPANSION;
    let mut out = Vec::new();
    out.extend(norm_decls(&format!("{prefix}.norm1"), d));
    for proj in ["q", "k", "v", "out"] {
        out.extend(linear_decls(&format!("{prefix}.attn.{proj}"), d, d));
    }
    out.extend(norm_decls(&format!("{prefix}.norm2"), d));
    out.extend(linear_decls(&format!("{prefix}.mlp.fc1"), d, hidden));
    out.extend(linear_decls(&format!("{prefix}.mlp.fc2"), hidden, d));
    out
}

pub fn encoder_layer_prefix(i: usize) -> String {
    format!("encoder.layer{i}")
}

pub fn llm_layer_prefix(j: usize) -> String {
    format!("llm.layer{j}")
}

/// Every backbone parameter (encoder, language model, head) with its shape.
pub fn backbone_decls(spec: &ModelSpec) -> Vec<ParamDecl> {
    let v = &spec.vision;
    let t = &spec.language;
    let mut out = Vec::new();
    out.extend(linear_decls("encoder.patch_embed", v.patch_dim, v.model_dim));
    out.push(decl(
        "encoder.pos_embed".into(),
        vec![v.num_patches(), v.model_dim],
        Init::Normal(POS_EMBED_STD),
    ));
    for i in 1..=v.num_layers {
        out.extend(block_decls(&encoder_layer_prefix(i), v.model_dim));
    }
    out.extend(norm_decls("encoder.final_norm", v.model_dim));
    out.push(decl("llm.token_embed".into(), vec![t.vocab_size, t.model_dim], Init::Normal(TOKEN_EMBED_STD)));
    out.push(decl(
        "llm.pos_embed".into(),
        vec![t.max_seq_len, t.model_dim],
        Init::Normal(POS_EMBED_STD),
    ));
    for j in 1..=t.num_layers {
        out.extend(block_decls(&llm_layer_prefix(j), t.model_dim));
    }
    out.extend(norm_decls("llm.final_norm", t.model_dim));
    out.extend(linear_decls("head", t.model_dim, t.vocab_size));
    out
}

pub(crate) fn materialize(decl: &ParamDecl, rng: &mut impl Rng) -> Tensor<f32> {
    let n: usize = decl.shape.iter().product();
    let data = match decl.init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => {
            let dist = Normal::new(0.0, std).expect("finite std");
            (0..n).map(|_| dist.sample(rng) as f32).collect()
        }
    };
    Tensor::new(decl.shape.clone(), data).expect("declared shape")
}

/// Randomly initialized backbone parameters, reproducible from `seed`.
pub fn init_backbone(spec: &ModelSpec, seed: u64) -> ParamStore<f32> {
    let mut rng = rng_for(seed, "backbone");
    backbone_decls(spec)
        .iter()
        .map(|d| (d.name.clone(), materialize(d, &mut rng)))
        .collect()
}

/// A tape plus the parameters it may bind.
pub struct Graph<'t, 'p, S: Scalar> {
    pub tape: &'t mut Tape<S>,
    params: &'p ParamStore<S>,
    trainable: &'p BTreeSet<String>,
}

impl<'t, 'p, S: Scalar> Graph<'t, 'p, S> {
    pub fn new(tape: &'t mut Tape<S>, params: &'p ParamStore<S>, trainable: &'p BTreeSet<String>) -> Self {
        Graph {
            tape,
            params,
            trainable,
        }
    }

    /// Bind a named parameter as a tape leaf, taking gradients iff trainable.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let t = self
            .params
            .get(name)
            .ok_or_else(|| Error::Registry(format!("parameter `{name}` is not registered")))?;
        Ok(self.tape.param(name, t, self.trainable.contains(name)))
    }

    pub fn has_param(&self, name: &str) -> bool {
        self.params.contains(name)
    }

    pub fn linear(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let y = self.tape.matmul(x, w)?;
        Ok(self.tape.add_row(y, b)?)
    }

    pub fn norm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let g = self.param(&format!("{prefix}.gain"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        Ok(self.tape.layer_norm(x, g, b, LN_EPS)?)
    }
}

/// Output of one transformer layer; `attention` is the attention node,
/// whose probabilities can be read back with `Tape::attention_maps`.
pub struct LayerOutput {
    pub seq: TokenSequence,
    pub attention: Var,
}

fn block_forward<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    prefix: &str,
    input: &TokenSequence,
    heads: usize,
) -> Result<LayerOutput> {
    let x = input.value;
    let h = g.norm(x, &format!("{prefix}.norm1"))?;
    let q = g.linear(h, &format!("{prefix}.attn.q"))?;
    let k = g.linear(h, &format!("{prefix}.attn.k"))?;
    let v = g.linear(h, &format!("{prefix}.attn.v"))?;
    let attention = g.tape.attention(q, k, v, input.attention_spec(heads))?;
    let a = g.linear(attention, &format!("{prefix}.attn.out"))?;
    let x = g.tape.add(x, a)?;
    let h = g.norm(x, &format!("{prefix}.norm2"))?;
    let h = g.linear(h, &format!("{prefix}.mlp.fc1"))?;
    let h = g.tape.gelu(h);
    let h = g.linear(h, &format!("{prefix}.mlp.fc2"))?;
    let x = g.tape.add(x, h)?;
    Ok(LayerOutput {
        seq: TokenSequence {
            value: x,
            layouts: input.layouts.clone(),
            causal: input.causal,
        },
        attention,
    })
}

fn check_width<S: Scalar>(g: &Graph<'_, '_, S>, seq: &TokenSequence, d: usize, what: &str) -> Result<()> {
    let shape = g.tape.shape(seq.value);
    if shape.len() != 2 || shape[1] != d || shape[0] != seq.total_rows() {
        return Err(Error::Dimension(format!(
            "{what} expects [{} x {d}], got {shape:?}",
            seq.total_rows()
        )));
    }
    Ok(())
}

/// Embed images of shape `[rows, cols, patch_dim]` as patch tokens with
/// learned positional embeddings.
pub fn patchify_embed<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    spec: &VisionEncoderSpec,
    images: &[&Tensor<f32>],
) -> Result<TokenSequence> {
    let expected = [spec.patch_rows, spec.patch_cols, spec.patch_dim];
    let mut data = Vec::with_capacity(images.len() * spec.num_patches() * spec.patch_dim);
    for img in images {
        if img.shape() != expected {
            return Err(Error::Dimension(format!(
                "image grid {:?} does not match encoder grid {expected:?}",
                img.shape()
            )));
        }
        data.extend(img.data().iter().map(|&v| S::of(v as f64)));
    }
    let p = spec.num_patches();
    let raw = g
        .tape
        .constant(Tensor::new(vec![images.len() * p, spec.patch_dim], data)?);
    let emb = g.linear(raw, "encoder.patch_embed")?;
    let pos = g.param("encoder.pos_embed")?;
    let index: Vec<_> = (0..images.len()).flat_map(|_| (0..p).map(|r| (0, r))).collect();
    let pos = g.tape.gather_rows(&[pos], &index)?;
    let value = g.tape.add(emb, pos)?;
    let layout = Layout::new(vec![(Region::ImageTokens, p)])?;
    Ok(TokenSequence {
        value,
        layouts: vec![layout; images.len()],
        causal: false,
    })
}

/// Bidirectional encoder layer `i` (1-based).
pub fn encoder_layer_forward<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    spec: &VisionEncoderSpec,
    layer: usize,
    input: &TokenSequence,
) -> Result<LayerOutput> {
    if layer == 0 || layer > spec.num_layers {
        return Err(Error::Dimension(format!("encoder has no layer {layer}")));
    }
    check_width(g, input, spec.model_dim, "encoder layer")?;
    let input = TokenSequence {
        causal: false,
        ..input.clone()
    };
    block_forward(g, &encoder_layer_prefix(layer), &input, spec.num_heads)
}

/// Causal language-model layer `j` (1-based).
pub fn llm_layer_forward<S: Scalar>(
    g: &mut Graph<'_, '_, S>,
    spec: &LanguageModelSpec,
    layer: usize,
    input: &TokenSequence,
) -> Result<LayerOutput> {
    if layer == 0 || layer > spec.num_layers {
        return Err(Error::Dimension(format!("language model has no layer {layer}")));
    }
    check_width(g, input, spec.model_dim, "language model layer")?;
    if let Some(l) = input.layouts.iter().find(|l| l.len() > spec.max_seq_len) {
        return Err(Error::Capacity(format!(
            "sequence of {} positions exceeds max_seq_len {}",
            l.len(),
            spec.max_seq_len
        )));
    }
    let input = TokenSequence {
        causal: true,
        ..input.clone()
    };
    block_forward(g, &llm_layer_prefix(layer), &input, spec.num_heads)
}

/// Vocabulary logits for every row of `hidden`.
pub fn head_logits<S: Scalar>(g: &mut Graph<'_, '_, S>, hidden: Var) -> Result<Var> {
    g.linear(hidden, "head")
}

/// Index of the largest logit in each row; ties go to the lowest index.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let v = logits.cols();
    logits
        .data()
        .chunks_exact(v)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, S::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                .0
        })
        .collect()
}
