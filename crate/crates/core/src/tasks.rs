//! Synthetic multimodal instruction tasks.
//!
//! Images are a 4x4 grid of cells, each cell a 3x3 RGB pixel patch, so one
//! patch token carries 27 raw features. Objects are 6x6 pixel shapes filling
//! one of the four image quadrants, so each object spans four patches. Tasks come in five families and two
//! rendering styles; each task has its own prefix token, while question and
//! label tokens are shared within a family.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use m2pt_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::seed::{derive_seed, rng_for};
use crate::{Error, Result};

pub const GRID: usize = 4;
pub const CELL: usize = 3;
pub const CHANNELS: usize = 3;
pub const PATCH_DIM: usize = CELL * CELL * CHANNELS;
pub const NOISE_SIGMA: f32 = 0.05;

pub const END: usize = 0;
pub const SYSTEM: [usize; 3] = [1, 2, 3];
const SHAPE_BASE: usize = 4;
const COLOR_BASE: usize = 8;
const COUNT_BASE: usize = 12;
const YES: usize = 16;
const NO: usize = 17;
const EVEN: usize = 18;
const ODD: usize = 19;
const Q_SHAPE: usize = 20;
const Q_COLOR: usize = 21;
const Q_COUNT: usize = 22;
const Q_RELATION: usize = 23;
const REL_LEFT: usize = 24;
const REL_ABOVE: usize = 25;
const Q_PARITY: usize = 26;
const PREFIX_BASE: usize = 27;

/// Longest target any task produces, end token included.
pub const MAX_TARGET_LEN: usize = 2;

pub fn required_vocab(num_tasks: usize) -> usize {
    PREFIX_BASE + num_tasks
}

const SIDE: usize = GRID * CELL;
const OBJ: usize = SIDE / 2;
const QUADRANTS: usize = 4;
const NUM_SHAPES: usize = 4;

/// Square, cross, diagonal cross, horizontal bar.
fn shape_on(shape: usize, y: usize, x: usize) -> bool {
    let mid = |v: usize| (OBJ / 2 - 1..=OBJ / 2).contains(&v);
    match shape {
        0 => true,
        1 => mid(y) || mid(x),
        2 => y == x || y + x == OBJ - 1,
        _ => mid(y),
    }
}

/// Offset of canvas pixel (y, x) in the patch-major image layout.
fn at(y: usize, x: usize) -> usize {
    ((y / CELL) * GRID + x / CELL) * PATCH_DIM + ((y % CELL) * CELL + x % CELL) * CHANNELS
}

/// Red, green, blue, yellow are the nameable colours; white is used where
/// colour is not part of the question.
const COLORS: [[f32; CHANNELS]; 5] = [
    [1.0, 0.0, 0.0],
    [0.0, 1.0, 0.0],
    [0.0, 0.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 1.0, 1.0],
];
const NAMED_COLORS: usize = 4;
const WHITE: usize = 4;
const SQUARE: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Shape,
    Color,
    Count,
    Relation,
    Parity,
}

impl Family {
    pub const ALL: [Family; 5] = [Family::Shape, Family::Color, Family::Count, Family::Relation, Family::Parity];

    pub fn label_tokens(self) -> Vec<usize> {
        match self {
            Family::Shape => (SHAPE_BASE..SHAPE_BASE + 4).collect(),
            Family::Color => (COLOR_BASE..COLOR_BASE + 4).collect(),
            Family::Count => (COUNT_BASE..COUNT_BASE + 4).collect(),
            Family::Relation => vec![YES, NO],
            Family::Parity => vec![EVEN, ODD],
        }
    }

    fn question(self) -> usize {
        match self {
            Family::Shape => Q_SHAPE,
            Family::Color => Q_COLOR,
            Family::Count => Q_COUNT,
            Family::Relation => Q_RELATION,
            Family::Parity => Q_PARITY,
        }
    }
}

/// Rendering style: background level and object brightness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Style {
    pub background: f32,
    pub intensity: f32,
}

pub const STYLES: [Style; 2] = [
    Style {
        background: 0.0,
        intensity: 1.0,
    },
    Style {
        background: 0.3,
        intensity: 0.7,
    },
];

#[derive(Clone, Debug, PartialEq)]
pub struct Instance {
    pub task_id: usize,
    pub seed: u64,
    pub image: Tensor<f32>,
    pub instruction: Vec<usize>,
    pub target: Vec<usize>,
}

impl Instance {
    /// SHA-256 over identity, tokens and pixels.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update((self.task_id as u64).to_le_bytes());
        h.update(self.seed.to_le_bytes());
        for &t in self.instruction.iter().chain([usize::MAX].iter()).chain(&self.target) {
            h.update((t as u64).to_le_bytes());
        }
        h.update(self.image.to_le_bytes());
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub id: usize,
    pub family: Family,
    pub style: Style,
    pub prefix: usize,
    pub instances: Vec<Instance>,
}

impl SyntheticTask {
    pub fn labels(&self) -> Vec<usize> {
        self.family.label_tokens()
    }

    /// Regenerate one instance from its seed and label index.
    pub fn render(&self, seed: u64, label: usize, noisy: bool) -> Instance {
        render(self.id, self.family, self.style, self.prefix, seed, label, noisy)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub num_tasks: usize,
    pub instances_per_task: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        SuiteConfig {
            num_tasks: 10,
            instances_per_task: 200,
            holdout_fraction: 0.2,
            seed: 7,
        }
    }
}

impl SuiteConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_tasks < 2 {
            return Err(Error::config("tasks.num_tasks", "must be at least 2"));
        }
        if self.instances_per_task == 0 {
            return Err(Error::config("tasks.instances_per_task", "must be at least 1"));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(Error::config("tasks.holdout_fraction", "must lie in (0, 1)"));
        }
        Ok(())
    }
}

fn place(image: &mut [f32], style: Style, quadrant: (usize, usize), shape: usize, color: usize) {
    for y in 0..OBJ {
        for x in 0..OBJ {
            if shape_on(shape, y, x) {
                let p = at(quadrant.0 * OBJ + y, quadrant.1 * OBJ + x);
                for ch in 0..CHANNELS {
                    image[p + ch] = COLORS[color][ch] * style.intensity;
                }
            }
        }
    }
}

fn distinct_quadrants(rng: &mut ChaCha8Rng, n: usize) -> Vec<(usize, usize)> {
    let mut q: Vec<usize> = (0..QUADRANTS).collect();
    q.shuffle(rng);
    q[..n].iter().map(|&k| (k / 2, k % 2)).collect()
}

fn render(
    task_id: usize,
    family: Family,
    style: Style,
    prefix: usize,
    seed: u64,
    label: usize,
    noisy: bool,
) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut image = vec![style.background; GRID * GRID * PATCH_DIM];
    let mut instruction = vec![prefix, family.question()];
    match family {
        Family::Shape => {
            let cell = distinct_quadrants(&mut rng, 1)[0];
            place(&mut image, style, cell, label, WHITE);
        }
        Family::Color => {
            let cell = distinct_quadrants(&mut rng, 1)[0];
            let shape = rng.random_range(0..NUM_SHAPES);
            place(&mut image, style, cell, shape, label);
        }
        Family::Count | Family::Parity => {
            let n = if family == Family::Count {
                label + 1
            } else {
                // even -> {2,4}, odd -> {1,3}
                2 * rng.random_range(0..2) + if label == 0 { 2 } else { 1 }
            };
            for cell in distinct_quadrants(&mut rng, n) {
                place(&mut image, style, cell, SQUARE, WHITE);
            }
        }
        Family::Relation => {
            let above = rng.random_bool(0.5);
            let mut colors: Vec<usize> = (0..NAMED_COLORS).collect();
            colors.shuffle(&mut rng);
            let (a, b) = (colors[0], colors[1]);
            let (ca, cb) = loop {
                let cells = distinct_quadrants(&mut rng, 2);
                let key = |c: (usize, usize)| if above { c.0 } else { c.1 };
                if key(cells[0]) != key(cells[1]) {
                    let (lo, hi) = if key(cells[0]) < key(cells[1]) {
                        (cells[0], cells[1])
                    } else {
                        (cells[1], cells[0])
                    };
                    break if label == 0 { (lo, hi) } else { (hi, lo) };
                }
            };
            place(&mut image, style, ca, rng.random_range(0..NUM_SHAPES), a);
            place(&mut image, style, cb, rng.random_range(0..NUM_SHAPES), b);
            instruction.extend([if above { REL_ABOVE } else { REL_LEFT }, COLOR_BASE + a, COLOR_BASE + b]);
        }
    }
    if noisy {
        let noise = Normal::new(0.0f32, NOISE_SIGMA).expect("positive sigma");
        for v in &mut image {
            *v += noise.sample(&mut rng);
        }
    }
    Instance {
        task_id,
        seed,
        image: Tensor::new(vec![GRID, GRID, PATCH_DIM], image).expect("grid shape"),
        instruction,
        target: vec![family.label_tokens()[label], END],
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSuite {
    pub config: SuiteConfig,
    pub tasks: Vec<SyntheticTask>,
}

/// Task `t` belongs to family `t mod 5` and style `(t / 5) mod 2`. Labels
/// are assigned cyclically and shuffled, so every label is within one
/// instance of uniform.
pub fn generate_task_suite(config: &SuiteConfig, vocab_size: usize) -> Result<TaskSuite> {
    config.validate()?;
    let need = required_vocab(config.num_tasks);
    if need > vocab_size {
        return Err(Error::Capacity(format!(
            "{} tasks need {need} tokens, vocabulary has {vocab_size}",
            config.num_tasks
        )));
    }
    let tasks = (0..config.num_tasks)
        .map(|id| {
            let family = Family::ALL[id % Family::ALL.len()];
            let style = STYLES[(id / Family::ALL.len()) % STYLES.len()];
            let n_labels = family.label_tokens().len();
            let mut labels: Vec<usize> = (0..config.instances_per_task).map(|k| k % n_labels).collect();
            labels.shuffle(&mut rng_for(config.seed, &format!("task{id}.labels")));
            let instances = labels
                .into_iter()
                .enumerate()
                .map(|(k, label)| {
                    let seed = derive_seed(config.seed, &format!("task{id}.instance{k}"));
                    render(id, family, style, PREFIX_BASE + id, seed, label, true)
                })
                .collect();
            SyntheticTask {
                id,
                family,
                style,
                prefix: PREFIX_BASE + id,
                instances,
            }
        })
        .collect();
    Ok(TaskSuite {
        config: *config,
        tasks,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskSplit {
    pub train: Vec<SyntheticTask>,
    pub unseen: Vec<SyntheticTask>,
}

/// Task-level split. Held-out tasks are drawn from distinct families where
/// possible, and preferably from families that keep a member in training.
pub fn split_train_zeroshot(suite: &TaskSuite, holdout_fraction: f64) -> Result<TaskSplit> {
    let n = suite.tasks.len();
    let k = (holdout_fraction * n as f64).round() as usize;
    if k == 0 || k >= n {
        return Err(Error::Split(format!(
            "holdout fraction {holdout_fraction} of {n} tasks leaves an empty side"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_for(suite.config.seed, "split"));
    let family_size = |f: Family| suite.tasks.iter().filter(|t| t.family == f).count();
    let mut held: Vec<usize> = Vec::new();
    let mut used: BTreeSet<usize> = BTreeSet::new();
    let passes: [&dyn Fn(&SyntheticTask, &[usize]) -> bool; 3] = [
        &|t, held| family_size(t.family) > 1 && !held.iter().any(|&h| suite.tasks[h].family == t.family),
        &|t, held| {
            let out = held.iter().filter(|&&h| suite.tasks[h].family == t.family).count();
            family_size(t.family) > out + 1
        },
        &|_, _| true,
    ];
    for pass in passes {
        for &t in &order {
            if held.len() == k {
                break;
            }
            if !used.contains(&t) && pass(&suite.tasks[t], &held) {
                held.push(t);
                used.insert(t);
            }
        }
    }
    let (unseen, train) = suite.tasks.iter().cloned().partition(|t| used.contains(&t.id));
    Ok(TaskSplit { train, unseen })
}

/// Per-task instance subsample: the first `round(fraction * n)` entries of a
/// seeded permutation, so smaller fractions are subsets of larger ones.
pub fn subsample(train: &[SyntheticTask], fraction: f64, seed: u64) -> Result<Vec<SyntheticTask>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Split(format!("fraction {fraction} outside (0, 1]")));
    }
    let out: Vec<SyntheticTask> = train
        .iter()
        .map(|task| {
            let n = task.instances.len();
            let keep = (fraction * n as f64).round() as usize;
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_for(seed, &format!("subsample.task{}", task.id)));
            let mut kept: Vec<usize> = order[..keep].to_vec();
            kept.sort_unstable();
            SyntheticTask {
                instances: kept.into_iter().map(|i| task.instances[i].clone()).collect(),
                ..task.clone()
            }
        })
        .collect();
    if out.iter().all(|t| t.instances.is_empty()) {
        return Err(Error::Split(format!("fraction {fraction} leaves no training instances")));
    }
    Ok(out)
}

#[derive(Serialize)]
struct Record<'a> {
    task_id: usize,
    seed: u64,
    instruction: &'a [usize],
    target: &'a [usize],
}

/// One JSON record per line; images are regenerated from seeds.
pub fn dump_jsonl(tasks: &[SyntheticTask], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    for inst in tasks.iter().flat_map(|t| &t.instances) {
        let rec = Record {
            task_id: inst.task_id,
            seed: inst.seed,
            instruction: &inst.instruction,
            target: &inst.target,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn occupied(image: &Tensor<f32>, style: Style, quadrant: (usize, usize)) -> Option<(usize, usize)> {
    let d = image.data();
    let pixel = |y: usize, x: usize| {
        let p = at(quadrant.0 * OBJ + y, quadrant.1 * OBJ + x);
        &d[p..p + CHANNELS]
    };
    let on = |y, x| pixel(y, x).iter().any(|&v| (v - style.background).abs() > 0.15);
    if !(0..OBJ * OBJ).any(|k| on(k / OBJ, k % OBJ)) {
        return None;
    }
    let shape = (0..NUM_SHAPES).find(|&s| (0..OBJ * OBJ).all(|k| on(k / OBJ, k % OBJ) == shape_on(s, k / OBJ, k % OBJ)))?;
    // the centre is lit in every shape
    let p = pixel(OBJ / 2 - 1, OBJ / 2 - 1);
    let color = COLORS.iter().position(|c| {
        c.iter()
            .zip(p)
            .all(|(&want, &got)| (got - want * style.intensity).abs() < 0.5 * style.intensity)
    })?;
    Some((shape, color))
}

/// Closed-form reader of a rendered instance: returns the label token it
/// implies, or `None` if the image is not a clean rendering.
pub fn solve(task: &SyntheticTask, image: &Tensor<f32>, instruction: &[usize]) -> Option<usize> {
    let objects: Vec<((usize, usize), (usize, usize))> = (0..QUADRANTS)
        .filter_map(|k| {
            let cell = (k / 2, k % 2);
            occupied(image, task.style, cell).map(|o| (cell, o))
        })
        .collect();
    let labels = task.family.label_tokens();
    match task.family {
        Family::Shape => (objects.len() == 1).then(|| labels[objects[0].1 .0]),
        Family::Color => (objects.len() == 1).then(|| labels[objects[0].1 .1]),
        Family::Count => (1..=4).contains(&objects.len()).then(|| labels[objects.len() - 1]),
        Family::Parity => Some(labels[objects.len() % 2]),
        Family::Relation => {
            let (rel, a, b) = (instruction[2], instruction[3] - COLOR_BASE, instruction[4] - COLOR_BASE);
            let find = |c: usize| objects.iter().find(|o| o.1 .1 == c).map(|o| o.0);
            let (pa, pb) = (find(a)?, find(b)?);
            let yes = if rel == REL_ABOVE { pa.0 < pb.0 } else { pa.1 < pb.1 };
            Some(if yes { YES } else { NO })
        }
    }
}

/// Left-right mirror of a grid image, pixels within each cell included.
pub fn mirror_horizontal(image: &Tensor<f32>) -> Tensor<f32> {
    let mut out = image.clone();
    for r in 0..GRID {
        for c in 0..GRID {
            for py in 0..CELL {
                for px in 0..CELL {
                    let src = (r * GRID + c) * PATCH_DIM + (py * CELL + px) * CHANNELS;
                    let dst = (r * GRID + (GRID - 1 - c)) * PATCH_DIM + (py * CELL + (CELL - 1 - px)) * CHANNELS;
                    out.data_mut()[dst..dst + CHANNELS].copy_from_slice(&image.data()[src..src + CHANNELS]);
                }
            }
        }
    }
    out
}
