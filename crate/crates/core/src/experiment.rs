//! Train-and-evaluate runs and the studies built from them: grid search,
//! component ablations, prompt locations and sweeps.
//!
//! Every study varies one thing against a base [`RunConfig`]; everything
//! else, the seed included, is shared.

use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Serialize;

use crate::config::{InitName, RunConfig};
use crate::eval::{assert_disjoint, evaluate_accuracy, AccuracyReport};
use crate::pipeline::M2ptModel;
use crate::prompt::ScheduleVariant;
use crate::tasks::{generate_task_suite, split_train_zeroshot, subsample, SyntheticTask, TaskSplit};
use crate::trainer::{train, StepMetric, TrainOutcome};
use crate::{Error, Result};

pub struct RunOutput {
    pub model: M2ptModel,
    pub outcome: TrainOutcome,
    pub unseen: AccuracyReport,
    pub trainable_params: usize,
}

impl RunOutput {
    pub fn final_loss(&self) -> f64 {
        self.outcome.metrics.last().map_or(f64::NAN, |m| m.loss)
    }
}

/// The configured task suite, split into training and unseen tasks.
pub fn load_split(config: &RunConfig) -> Result<TaskSplit> {
    let suite = generate_task_suite(&config.tasks, config.model.vocab_size)?;
    let split = split_train_zeroshot(&suite, config.tasks.holdout_fraction)?;
    assert_disjoint(&split.train, &split.unseen)?;
    Ok(split)
}

/// Builds a model from `config.seed`, trains it on `train` and scores it on
/// `unseen`.
pub fn run(config: &RunConfig, train_tasks: &[SyntheticTask], unseen: &[SyntheticTask]) -> Result<RunOutput> {
    config.validate()?;
    assert_disjoint(train_tasks, unseen)?;
    let mut model = M2ptModel::new(config.architecture(), config.seed)?;
    let outcome = train(&mut model, train_tasks, &config.train_config(), config.seed)?;
    let unseen = evaluate_accuracy(&model, unseen)?;
    let trainable_params = outcome
        .partition
        .trainable
        .iter()
        .filter_map(|n| model.params.get(n))
        .map(|t| t.numel())
        .sum();
    Ok(RunOutput {
        model,
        outcome,
        unseen,
        trainable_params,
    })
}

/// Maps `f` over `items` on up to `available_parallelism` threads, keeping
/// input order.
fn par_map<T: Sync, R: Send>(items: &[T], f: impl Fn(usize, &T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len());
    if workers <= 1 {
        return items.iter().enumerate().map(|(i, t)| f(i, t)).collect();
    }
    let next = AtomicUsize::new(0);
    let out: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(i, &items[i]);
                out.lock().expect("no worker panicked")[i] = Some(r);
            });
        }
    });
    out.into_inner()
        .expect("no worker panicked")
        .into_iter()
        .map(|r| r.expect("every cell ran"))
        .collect()
}

/// One row of an ablation, location or sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub setting: String,
    pub accuracy: f64,
    pub trainable_params: usize,
    pub final_loss: f64,
}

fn study(cells: Vec<(String, RunConfig, Vec<SyntheticTask>)>, unseen: &[SyntheticTask]) -> Result<Vec<StudyRow>> {
    par_map(&cells, |_, (setting, config, train_tasks)| {
        let out = run(config, train_tasks, unseen)?;
        Ok(StudyRow {
            setting: setting.clone(),
            accuracy: out.unseen.mean,
            trainable_params: out.trainable_params,
            final_loss: out.final_loss(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Drop {
    Visual,
    Textual,
    Interaction,
}

impl Drop {
    pub const ALL: [Drop; 3] = [Drop::Visual, Drop::Textual, Drop::Interaction];

    pub fn name(self) -> &'static str {
        match self {
            Drop::Visual => "visual",
            Drop::Textual => "textual",
            Drop::Interaction => "interaction",
        }
    }

    /// Visual or textual prompts get length 0; the interaction layer stays
    /// in place but is frozen at its initial value.
    pub fn apply(self, config: &RunConfig) -> RunConfig {
        let mut c = *config;
        match self {
            Drop::Visual => c.prompt.visual_len = 0,
            Drop::Textual => c.prompt.textual_len = 0,
            Drop::Interaction => c.fusion.trainable = false,
        }
        c
    }
}

impl fmt::Display for Drop {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Drop {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Drop::ALL
            .into_iter()
            .find(|d| d.name() == s)
            .ok_or_else(|| Error::config("drop", format!("`{s}` is not one of visual, textual, interaction")))
    }
}

/// The full configuration followed by one row per dropped component.
pub fn ablate_components(base: &RunConfig, split: &TaskSplit, drops: &[Drop]) -> Result<Vec<StudyRow>> {
    let mut cells = vec![("full".to_string(), *base, split.train.clone())];
    cells.extend(drops.iter().map(|d| (format!("drop_{d}"), d.apply(base), split.train.clone())));
    study(cells, &split.unseen)
}

/// One row per prompt schedule.
pub fn location_study(base: &RunConfig, split: &TaskSplit) -> Result<Vec<StudyRow>> {
    let cells = ScheduleVariant::ALL
        .into_iter()
        .map(|v| {
            let mut c = *base;
            c.prompt.schedule = v;
            (v.name().to_string(), c, split.train.clone())
        })
        .collect();
    study(cells, &split.unseen)
}

/// Trains on nested per-task subsamples of the training tasks.
pub fn sweep_data(base: &RunConfig, split: &TaskSplit, fractions: &[f64]) -> Result<Vec<StudyRow>> {
    if fractions.is_empty() {
        return Err(Error::config("fractions", "grid is empty"));
    }
    let cells = fractions
        .iter()
        .map(|&f| Ok((format!("{f}"), *base, subsample(&split.train, f, base.seed)?)))
        .collect::<Result<_>>()?;
    study(cells, &split.unseen)
}

pub fn sweep_epochs(base: &RunConfig, split: &TaskSplit, epochs: &[usize]) -> Result<Vec<StudyRow>> {
    if epochs.is_empty() {
        return Err(Error::config("epochs", "grid is empty"));
    }
    let cells = epochs
        .iter()
        .map(|&e| {
            let mut c = *base;
            c.train.epochs = e;
            (format!("{e}"), c, split.train.clone())
        })
        .collect();
    study(cells, &split.unseen)
}

/// Xavier against random-normal prompt initialisation.
pub fn sweep_init(base: &RunConfig, split: &TaskSplit) -> Result<Vec<StudyRow>> {
    let cells = [InitName::Xavier, InitName::RandomNormal]
        .into_iter()
        .map(|init| {
            let mut c = *base;
            c.prompt.init = init;
            let name = match init {
                InitName::Xavier => "xavier".to_string(),
                InitName::RandomNormal => format!("random_normal({})", c.prompt.init_sigma),
            };
            (name, c, split.train.clone())
        })
        .collect();
    study(cells, &split.unseen)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridRow {
    pub lr: f64,
    pub lt: usize,
    pub lv: usize,
    pub accuracy: Option<f64>,
    pub trainable_params: usize,
    pub status: String,
}

/// Ranked cells that trained, then the ones that failed.
#[derive(Clone, Debug, PartialEq)]
pub struct GridReport {
    pub ranked: Vec<GridRow>,
    pub failed: Vec<GridRow>,
}

impl GridReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_rows(self.ranked.iter().chain(&self.failed), path)
    }
}

/// Trains every (lr, Lt, Lv) combination. Cell `k`, in lr-major order,
/// uses seed `base.seed ^ k`. A cell whose training aborts is reported as
/// failed and the grid carries on.
pub fn grid_search(
    base: &RunConfig,
    split: &TaskSplit,
    lrs: &[f64],
    lts: &[usize],
    lvs: &[usize],
) -> Result<GridReport> {
    if lrs.is_empty() || lts.is_empty() || lvs.is_empty() {
        return Err(Error::config("grid", "every grid axis needs at least one value"));
    }
    let mut cells = Vec::new();
    for &lr in lrs {
        for &lt in lts {
            for &lv in lvs {
                cells.push((lr, lt, lv));
            }
        }
    }
    let rows = par_map(&cells, |k, &(lr, lt, lv)| {
        let mut c = *base;
        c.seed = base.seed ^ k as u64;
        c.train.base_lr = lr;
        c.prompt.textual_len = lt;
        c.prompt.visual_len = lv;
        let row = |accuracy, trainable_params, status: String| GridRow {
            lr,
            lt,
            lv,
            accuracy,
            trainable_params,
            status,
        };
        match run(&c, &split.train, &split.unseen) {
            Ok(out) => row(Some(out.unseen.mean), out.trainable_params, "ok".into()),
            Err(e) => row(None, 0, format!("failed: {e}")),
        }
    });
    let (mut ranked, failed): (Vec<_>, Vec<_>) = rows.into_iter().partition(|r| r.accuracy.is_some());
    ranked.sort_by(|a, b| {
        b.accuracy
            .partial_cmp(&a.accuracy)
            .expect("accuracies are finite")
            .then(a.trainable_params.cmp(&b.trainable_params))
            .then(a.lr.total_cmp(&b.lr))
    });
    Ok(GridReport { ranked, failed })
}

pub fn write_rows<'a, R: Serialize + 'a>(rows: impl IntoIterator<Item = &'a R>, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Per-step log with header `step,epoch,lr,loss`.
pub fn write_metrics(metrics: &[StepMetric], path: &Path) -> Result<()> {
    write_rows(metrics, path)
}
