//! Frozen/trainable partition, learning-rate schedule, AdamW and the
//! training loop.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use m2pt_tensor::{ParamStore, Tape, TensorError};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::model::Graph;
use crate::pipeline::{declared_shapes, loss, Architecture, Example, M2ptModel};
use crate::seed::rng_for;
use crate::tasks::{Instance, SyntheticTask, SYSTEM};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub grad_clip: f64,
    pub head_trainable: bool,
    pub interaction_trainable: bool,
    /// Stop after this many optimizer steps; the schedule is laid out over
    /// the capped count.
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 7e-4,
            warmup_ratio: 0.03,
            epochs: 3,
            batch_size: 16,
            weight_decay: 0.0,
            grad_clip: 1.0,
            head_trainable: false,
            interaction_trainable: true,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr.is_finite() && self.base_lr > 0.0) {
            return Err(Error::config("train.base_lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::config("train.warmup_ratio", "must lie in [0, 1)"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be nonnegative"));
        }
        if !(self.grad_clip >= 0.0 && self.grad_clip.is_finite()) {
            return Err(Error::config("train.grad_clip", "must be nonnegative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamPartition {
    pub trainable: BTreeSet<String>,
    pub frozen: BTreeSet<String>,
}

/// Split the model's parameters. Trainable = prompts, plus the interaction
/// layer and the head when enabled; everything else is frozen. Every name
/// in `params` must be one the architecture declares, and vice versa.
pub fn partition_params(
    params: &ParamStore<f32>,
    arch: &Architecture,
    head_trainable: bool,
    interaction_trainable: bool,
) -> Result<ParamPartition> {
    let expected = declared_shapes(arch);
    for (name, t) in params.iter() {
        match expected.get(name) {
            None => return Err(Error::Registry(format!("unexpected parameter `{name}`"))),
            Some(shape) if shape.as_slice() != t.shape() => {
                return Err(Error::Registry(format!(
                    "parameter `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(missing) = expected.keys().find(|n| !params.contains(n)) {
        return Err(Error::Registry(format!("parameter `{missing}` is not registered")));
    }

    let (trainable, frozen) = params.names().map(str::to_string).partition(|n: &String| {
        n.starts_with("prompt.")
            || (interaction_trainable && n.starts_with("fusion."))
            || (head_trainable && n.starts_with("head."))
    });
    Ok(ParamPartition { trainable, frozen })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub total_steps: usize,
    pub warmup_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, total_steps: usize, warmup_ratio: f64) -> Result<Self> {
        let warmup_steps = (warmup_ratio * total_steps as f64).round() as usize;
        if total_steps > 0 && warmup_steps >= total_steps {
            return Err(Error::config(
                "train.warmup_ratio",
                format!("{warmup_steps} warmup steps leave nothing of {total_steps}"),
            ));
        }
        Ok(LrSchedule {
            base_lr,
            total_steps,
            warmup_steps,
        })
    }

    /// Linear warmup over `[0, W)`, then cosine from `base_lr` to 0 at `T`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step < w {
            return self.base_lr * ((step + 1) as f64 / w as f64);
        }
        if t <= w {
            return self.base_lr;
        }
        let progress = (step.min(t) - w) as f64 / (t - w) as f64;
        self.base_lr * 0.5 * (1.0 + (PI * progress).cos())
    }
}

/// Decoupled-weight-decay Adam over a fixed set of named parameters.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    steps: BTreeMap<String, u64>,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            moments: BTreeMap::new(),
            steps: BTreeMap::new(),
        }
    }

    /// Number of updates applied to each parameter.
    pub fn step_counts(&self) -> &BTreeMap<String, u64> {
        &self.steps
    }

    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &ParamStore<f32>, lr: f64) -> Result<()> {
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| Error::Registry(format!("gradient for unknown parameter `{name}`")))?;
            let n = p.numel();
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; n], vec![0.0; n]));
            let t = self.steps.entry(name.to_string()).or_insert(0);
            *t += 1;
            let bc1 = 1.0 - self.beta1.powi(*t as i32);
            let bc2 = 1.0 - self.beta2.powi(*t as i32);
            let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
            let step = (lr / bc1) as f32;
            let bc2_sqrt = bc2.sqrt() as f32;
            let decay = (lr * self.weight_decay) as f32;
            let eps = self.eps as f32;
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *w -= decay * *w;
                *w -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }
}

/// Scale `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before scaling.
pub fn clip_global_norm(grads: &mut ParamStore<f32>, max_norm: f64) -> f64 {
    let norm = grads.iter().map(|(_, g)| g.norm_sq() as f64).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / norm) as f32;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetric {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub metrics: Vec<StepMetric>,
    pub partition: ParamPartition,
    pub step_counts: BTreeMap<String, u64>,
}

pub fn example(inst: &Instance) -> Example<'_> {
    Example {
        image: &inst.image,
        instruction: &inst.instruction,
        target: &inst.target,
    }
}

/// Steps per epoch for `n` instances.
pub fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Mini-batch AdamW on next-token loss over the target region. Instances
/// are reshuffled every epoch from `seed`; only the trainable partition is
/// updated.
pub fn train(
    model: &mut M2ptModel,
    tasks: &[SyntheticTask],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    config.validate()?;
    let partition = partition_params(
        &model.params,
        &model.arch,
        config.head_trainable,
        config.interaction_trainable,
    )?;
    let instances: Vec<&Instance> = tasks.iter().flat_map(|t| &t.instances).collect();
    if instances.is_empty() {
        return Err(Error::Split("no training instances".into()));
    }
    let per_epoch = steps_per_epoch(instances.len(), config.batch_size);
    let mut total = per_epoch * config.epochs;
    if let Some(cap) = config.max_steps {
        total = total.min(cap);
    }
    let schedule = LrSchedule::new(config.base_lr, total, config.warmup_ratio)?;
    let mut opt = AdamW::new(config.weight_decay);
    let mut metrics = Vec::with_capacity(total);
    let mut step = 0;
    'epochs: for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..instances.len()).collect();
        order.shuffle(&mut rng_for(seed, &format!("epoch{epoch}")));
        for (batch_id, chunk) in order.chunks(config.batch_size).enumerate() {
            if step == total {
                break 'epochs;
            }
            let batch: Vec<Example<'_>> = chunk.iter().map(|&i| example(instances[i])).collect();
            let mut tape = Tape::<f32>::new();
            let mut g = Graph::new(&mut tape, &model.params, &partition.trainable);
            let non_finite = Error::NonFiniteLoss { step, batch: batch_id };
            let l = match loss(&mut g, &model.arch, &SYSTEM, &batch) {
                Ok((l, _)) => l,
                Err(Error::Tensor(TensorError::NonFinite(_))) => return Err(non_finite),
                Err(e) => return Err(e),
            };
            let value = tape.value(l).item();
            if !value.is_finite() {
                return Err(non_finite);
            }
            let mut grads = if partition.trainable.is_empty() {
                ParamStore::new()
            } else {
                tape.backward(l)?.named(&tape)
            };
            clip_global_norm(&mut grads, config.grad_clip);
            let lr = schedule.lr_at(step);
            opt.step(&mut model.params, &grads, lr)?;
            metrics.push(StepMetric {
                step,
                epoch,
                lr,
                loss: value as f64,
            });
            step += 1;
        }
    }
    Ok(TrainOutcome {
        metrics,
        partition,
        step_counts: opt.step_counts().clone(),
    })
}
