#![allow(dead_code)]

use std::collections::BTreeSet;

use m2pt_core::model::Graph;
use m2pt_core::pipeline::{forward, Trace};
use m2pt_core::{Architecture, Example, LanguageModelSpec, ModelSpec, PromptPlan, VisionEncoderSpec};
use m2pt_tensor::{ParamStore, Scalar, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SYSTEM: [usize; 2] = [1, 2];

/// N = M = 2, d_v = 16, d_t = 32, 2x2 patches.
pub fn toy_spec() -> ModelSpec {
    ModelSpec {
        vision: VisionEncoderSpec {
            num_layers: 2,
            model_dim: 16,
            num_heads: 2,
            patch_rows: 2,
            patch_cols: 2,
            patch_dim: 6,
        },
        language: LanguageModelSpec {
            num_layers: 2,
            model_dim: 32,
            num_heads: 2,
            vocab_size: 12,
            max_seq_len: 48,
        },
    }
}

pub fn toy_arch(lt: usize, lv: usize) -> Architecture {
    Architecture {
        spec: toy_spec(),
        plan: PromptPlan {
            textual_len: lt,
            visual_len: lv,
            ..PromptPlan::default()
        },
        project_prompts: true,
    }
}

pub fn image(spec: &ModelSpec, seed: u64) -> Tensor<f32> {
    let v = &spec.vision;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = v.num_patches() * v.patch_dim;
    Tensor::new(
        vec![v.patch_rows, v.patch_cols, v.patch_dim],
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub struct Owned {
    pub images: Vec<Tensor<f32>>,
    pub instructions: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

impl Owned {
    pub fn new(spec: &ModelSpec, n: usize) -> Self {
        Owned {
            images: (0..n as u64).map(|s| image(spec, 100 + s)).collect(),
            instructions: (0..n).map(|i| vec![3 + i % 4, 7, 8 + i % 3]).collect(),
            targets: (0..n).map(|i| vec![4 + i % 5, 0]).collect(),
        }
    }

    pub fn batch(&self) -> Vec<Example<'_>> {
        (0..self.images.len())
            .map(|i| Example {
                image: &self.images[i],
                instruction: &self.instructions[i],
                target: &self.targets[i],
            })
            .collect()
    }
}

/// Forward pass with nothing trainable; returns the tape so values can be read.
pub fn run<S: Scalar>(arch: &Architecture, params: &ParamStore<S>, batch: &[Example<'_>]) -> (Tape<S>, Trace) {
    let none = BTreeSet::new();
    let mut tape = Tape::new();
    let trace = {
        let mut g = Graph::new(&mut tape, params, &none);
        forward(&mut g, arch, &SYSTEM, batch).unwrap()
    };
    (tape, trace)
}

pub fn rows<S: Scalar>(t: &Tensor<S>, range: std::ops::Range<usize>) -> Vec<S> {
    let d = t.cols();
    t.data()[range.start * d..range.end * d].to_vec()
}
