//! Zero-shot evaluation by exact-match greedy decoding.

use std::collections::BTreeSet;

use serde::Serialize;

use crate::pipeline::M2ptModel;
use crate::tasks::{SyntheticTask, END, MAX_TARGET_LEN, SYSTEM};
use crate::trainer::example;
use crate::{Error, Result};

const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TaskAccuracy {
    pub task_id: usize,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyReport {
    pub per_task: Vec<TaskAccuracy>,
    /// Unweighted mean of the per-task accuracies.
    pub mean: f64,
}

/// Fails if any unseen task id or instance hash also occurs in training.
pub fn assert_disjoint(train: &[SyntheticTask], unseen: &[SyntheticTask]) -> Result<()> {
    let ids: BTreeSet<usize> = train.iter().map(|t| t.id).collect();
    if let Some(t) = unseen.iter().find(|t| ids.contains(&t.id)) {
        return Err(Error::Split(format!("task {} is both trained on and held out", t.id)));
    }
    let hashes: BTreeSet<String> = train.iter().flat_map(|t| &t.instances).map(|i| i.hash()).collect();
    if let Some(i) = unseen.iter().flat_map(|t| &t.instances).find(|i| hashes.contains(&i.hash())) {
        return Err(Error::Split(format!("instance {} of task {} leaked into training", i.seed, i.task_id)));
    }
    Ok(())
}

/// Exact match of the greedy decode against the full target, end token
/// included.
pub fn evaluate_accuracy(model: &M2ptModel, tasks: &[SyntheticTask]) -> Result<AccuracyReport> {
    if tasks.is_empty() {
        return Err(Error::Split("no tasks to evaluate".into()));
    }
    let mut per_task = Vec::with_capacity(tasks.len());
    for task in tasks {
        let mut correct = 0;
        for chunk in task.instances.chunks(EVAL_BATCH) {
            let batch: Vec<_> = chunk.iter().map(|i| example(i)).collect();
            let decoded = model.greedy_decode(&SYSTEM, &batch, MAX_TARGET_LEN, END)?;
            correct += chunk.iter().zip(&decoded).filter(|(i, d)| &i.target == *d).count();
        }
        let total = task.instances.len();
        per_task.push(TaskAccuracy {
            task_id: task.id,
            correct,
            total,
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
        });
    }
    let mean = per_task.iter().map(|t| t.accuracy).sum::<f64>() / per_task.len() as f64;
    Ok(AccuracyReport { per_task, mean })
}
