//! Acceptance checks, one line per criterion. Runs as a plain binary so the
//! output stays readable; exits nonzero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use m2pt_core::attention::AttentionRegionReport;
use m2pt_core::checkpoint::{encode, load_checkpoint, save_checkpoint};
use m2pt_core::experiment::{load_split, run, Drop};
use m2pt_core::model::Graph;
use m2pt_core::pipeline::{forward, loss, Trace};
use m2pt_core::prompt::{schedule_layers, textual_prompt_name, visual_prompt_name};
use m2pt_core::sequence::Region;
use m2pt_core::tasks::{generate_task_suite, split_train_zeroshot, SuiteConfig, SyntheticTask, PATCH_DIM, SYSTEM};
use m2pt_core::trainer::{partition_params, train, LrSchedule, TrainConfig};
use m2pt_core::{
    Architecture, Example, LanguageModelSpec, M2ptModel, ModelSpec, PromptPlan, RunConfig, ScheduleVariant,
    VisionEncoderSpec,
};
use m2pt_tensor::{finite_diff_check, GradCheckConfig, ParamStore, Scalar, Tape, Tensor};
use sha2::{Digest, Sha256};

type Check = std::result::Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: std::result::Result<T, E>) -> std::result::Result<T, String> {
    r.map_err(|e| e.to_string())
}

/// N = M = 2, d_v = 16, d_t = 32 over the real 4x4 patch grid.
fn toy_arch(lt: usize, lv: usize) -> Architecture {
    Architecture {
        spec: ModelSpec {
            vision: VisionEncoderSpec {
                num_layers: 2,
                model_dim: 16,
                num_heads: 2,
                patch_rows: 4,
                patch_cols: 4,
                patch_dim: PATCH_DIM,
            },
            language: LanguageModelSpec {
                num_layers: 2,
                model_dim: 32,
                num_heads: 2,
                vocab_size: 64,
                max_seq_len: 64,
            },
        },
        plan: PromptPlan {
            textual_len: lt,
            visual_len: lv,
            ..PromptPlan::default()
        },
        project_prompts: true,
    }
}

fn toy_tasks() -> Vec<SyntheticTask> {
    let config = SuiteConfig {
        instances_per_task: 20,
        ..SuiteConfig::default()
    };
    let suite = generate_task_suite(&config, 64).unwrap();
    split_train_zeroshot(&suite, config.holdout_fraction).unwrap().train
}

fn toy_batch(tasks: &[SyntheticTask], n: usize) -> Vec<Example<'_>> {
    tasks
        .iter()
        .map(|t| &t.instances[0])
        .take(n)
        .map(|i| Example {
            image: &i.image,
            instruction: &i.instruction,
            target: &i.target,
        })
        .collect()
}

fn trace<S: Scalar>(arch: &Architecture, params: &ParamStore<S>, batch: &[Example<'_>]) -> (Tape<S>, Trace) {
    let none = BTreeSet::new();
    let mut tape = Tape::new();
    let trace = {
        let mut g = Graph::new(&mut tape, params, &none);
        forward(&mut g, arch, &SYSTEM, batch).unwrap()
    };
    (tape, trace)
}

fn rows(t: &Tensor<f32>, r: std::ops::Range<usize>) -> &[f32] {
    let d = t.cols();
    &t.data()[r.start * d..r.end * d]
}

fn parameter_ratio() -> Check {
    let start = Instant::now();
    let out = ok(Command::new(env!("CARGO_BIN_EXE_m2pt")).args(["count-params", "--paper-scale"]).output())?;
    let elapsed = start.elapsed();
    ensure!(out.status.success(), "count-params exited with {}", out.status);
    let text = String::from_utf8_lossy(&out.stdout);
    for (row, want) in [("Lt=10 Lv=20", "0.0857% (0.09%)"), ("Lt=10 Lv=10", "0.0822% (0.08%)")] {
        let line = text.lines().find(|l| l.starts_with(row)).ok_or(format!("no {row} row"))?;
        ensure!(line.ends_with(want), "{line}");
    }
    ensure!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    Ok("0.0857% (0.09%) and 0.0822% (0.08%)".into())
}

fn gradient_fidelity() -> Check {
    let arch = toy_arch(2, 2);
    let model = ok(M2ptModel::new(arch, 3))?;
    let part = ok(partition_params(&model.params, &arch, false, true))?;
    let tasks = toy_tasks();
    let batch = toy_batch(&tasks, 2);
    let params = model.params.cast::<f64>();
    let report = ok(finite_diff_check(&params, &part.trainable, GradCheckConfig::default(), |tape, store| {
        let mut g = Graph::new(tape, store, &part.trainable);
        loss(&mut g, &arch, &SYSTEM, &batch).map(|(l, _)| l)
    }))?;
    ensure!(report.params.len() == part.trainable.len(), "checked {} of {} tensors", report.params.len(), part.trainable.len());
    let worst = report.max_rel_error();
    ensure!(report.passed() && worst < 1e-4, "max relative error {worst:e}");
    Ok(format!("{} tensors, max relative error {worst:.2e}", report.params.len()))
}

fn freezing_invariant() -> Check {
    let digest = |p: &ParamStore<f32>| -> BTreeMap<String, Vec<u8>> {
        p.iter().map(|(n, t)| (n.to_string(), Sha256::digest(t.to_le_bytes()).to_vec())).collect()
    };
    let mut model = ok(M2ptModel::new(toy_arch(2, 2), 1))?;
    let before = digest(&model.params);
    let config = TrainConfig {
        batch_size: 8,
        max_steps: Some(100),
        epochs: 100,
        ..TrainConfig::default()
    };
    let out = ok(train(&mut model, &toy_tasks(), &config, 1))?;
    ensure!(out.metrics.len() == 100, "{} steps", out.metrics.len());
    let after = digest(&model.params);
    for n in &out.partition.frozen {
        ensure!(before[n] == after[n], "frozen `{n}` changed");
    }
    for n in &out.partition.trainable {
        ensure!(before[n] != after[n], "trainable `{n}` unchanged");
    }
    Ok(format!(
        "{} frozen unchanged, {} trainable changed",
        out.partition.frozen.len(),
        out.partition.trainable.len()
    ))
}

fn replace_semantics() -> Check {
    let tasks = toy_tasks();
    let batch = toy_batch(&tasks, 2);
    let patches = 16;
    for variant in ScheduleVariant::ALL {
        let mut arch = toy_arch(3, 5);
        arch.plan.schedule = variant;
        let model = ok(M2ptModel::new(arch, 6))?;
        let (tape, tr) = trace(&arch, &model.params, &batch);
        let vis = arch.plan.visual_layers(&arch.spec);
        for (i, input) in tr.encoder_inputs.iter().enumerate() {
            let lv = if vis.contains(&(i + 1)) { 5 } else { 0 };
            ensure!(input.layouts[0].len() == lv + patches, "{variant} encoder layer {}", i + 1);
            if i > 0 {
                let prev = tape.value(tr.encoder_layers[i - 1].seq.value);
                let prev_lv = tr.encoder_layers[i - 1].seq.layouts[0].width(Region::VisualPrompt);
                let carried = &tape.value(input.value).data()[lv * 16..(lv + patches) * 16];
                ensure!(carried == rows(prev, prev_lv..prev_lv + patches), "{variant} layer {} carry", i + 1);
            }
        }
        let txt = arch.plan.textual_layers(&arch.spec);
        let carried = tr.fused.seq.layouts[0].len();
        for (j, input) in tr.llm_inputs.iter().enumerate() {
            let lt = if txt.contains(&(j + 1)) { 3 } else { 0 };
            ensure!(input.layouts[0].len() == lt + carried, "{variant} llm layer {}", j + 1);
            if lt > 0 {
                let fresh = model.params.get(&textual_prompt_name(j + 1)).unwrap().data();
                ensure!(rows(tape.value(input.value), 0..lt) == fresh, "{variant} llm layer {} prompt rows", j + 1);
            }
        }
    }
    // perturbation oracle: P_v^i moves the non-prompt outputs of layer i
    let arch = toy_arch(2, 3);
    let model = ok(M2ptModel::new(arch, 7))?;
    for i in 1..=2 {
        let mut bumped = model.params.clone();
        bumped.get_mut(&visual_prompt_name(i)).unwrap().data_mut().iter_mut().for_each(|v| *v += 0.5);
        let (ta, a) = trace(&arch, &model.params, &batch[..1]);
        let (tb, b) = trace(&arch, &bumped, &batch[..1]);
        let (oa, ob) = (ta.value(a.encoder_layers[i - 1].seq.value), tb.value(b.encoder_layers[i - 1].seq.value));
        ensure!(rows(oa, 3..3 + patches) != rows(ob, 3..3 + patches), "P_v^{i} has no effect on layer {i}");
    }
    Ok("lengths, carry and perturbation hold for all 5 schedules".into())
}

fn cross_modal_flow() -> Check {
    let arch = toy_arch(2, 2);
    let model = ok(M2ptModel::new(arch, 10))?;
    let tasks = toy_tasks();
    let batch = toy_batch(&tasks, 4);
    let part = ok(partition_params(&model.params, &arch, false, true))?;
    let mut tape = Tape::<f32>::new();
    let mut g = Graph::new(&mut tape, &model.params, &part.trainable);
    let (l, _) = ok(loss(&mut g, &arch, &SYSTEM, &batch))?;
    let grads = ok(tape.backward(l))?.named(&tape);
    let norm = grads.get(&visual_prompt_name(1)).map_or(0.0, |g| g.norm_sq().sqrt());
    ensure!(norm > 0.0, "gradient of P_v^1 vanishes");

    let dropped = Drop::Interaction.apply(&RunConfig::default());
    let mut model = ok(M2ptModel::new(arch, 10))?;
    let init = model.params.clone();
    let config = TrainConfig {
        batch_size: 8,
        max_steps: Some(20),
        interaction_trainable: dropped.fusion.trainable,
        ..TrainConfig::default()
    };
    ok(train(&mut model, &tasks, &config, 10))?;
    for name in ["fusion.weight", "fusion.bias"] {
        ensure!(model.params.get(name).unwrap().bitwise_eq(init.get(name).unwrap()), "`{name}` moved");
    }
    Ok(format!("|dL/dP_v^1| = {norm:.3e}, fusion bitwise at init after drop=interaction"))
}

fn zero_shot_ordering() -> Check {
    let start = Instant::now();
    let base = RunConfig::default();
    ensure!(base.tasks == SuiteConfig::default(), "suite differs from the default");
    ensure!(base.train.epochs == 3, "epochs = {}", base.train.epochs);
    let split = ok(load_split(&base))?;
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 1..=5 {
        let mut acc = Vec::new();
        for (lt, lv) in [(10, 10), (10, 0), (0, 10), (0, 0)] {
            let mut config = base.clone();
            config.seed = seed;
            config.prompt.textual_len = lt;
            config.prompt.visual_len = lv;
            acc.push(ok(run(&config, &split.train, &split.unseen))?.unseen.mean);
        }
        let single = acc[1].max(acc[2]);
        let ordered = acc[0] > single && single > acc[3];
        wins += ordered as usize;
        detail.push(format!(
            "seed {seed}: {:.3} / {:.3} / {:.3} / {:.3}{}",
            acc[0],
            acc[1],
            acc[2],
            acc[3],
            if ordered { "" } else { " x" }
        ));
    }
    let elapsed = start.elapsed();
    let summary = format!("{wins}/5 seeds ordered [{}] in {:.0}s", detail.join("; "), elapsed.as_secs_f64());
    ensure!(wins >= 4, "{summary}");
    ensure!(elapsed < Duration::from_secs(30 * 60), "{summary}");
    Ok(summary)
}

fn schedule_sets() -> Check {
    let set = |v, n| schedule_layers(v, n).into_iter().collect::<Vec<_>>();
    let odd: Vec<usize> = vec![1, 3, 5, 7, 9, 11, 13, 15, 17, 19, 21, 23];
    let top: Vec<usize> = vec![1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16];
    let latter: Vec<usize> = vec![12, 13, 14, 15, 16, 17, 18, 19, 20, 21, 22, 23, 24];
    ensure!(set(ScheduleVariant::OddLayers, 24) == odd, "OddLayers(24)");
    ensure!(set(ScheduleVariant::TopHalf, 32) == top, "TopHalf(32)");
    ensure!(set(ScheduleVariant::LatterHalf, 24) == latter, "LatterHalf(24)");
    ensure!(set(ScheduleVariant::FirstLayer, 24) == vec![1], "FirstLayer(24)");
    ensure!(set(ScheduleVariant::All, 32) == (1..=32).collect::<Vec<_>>(), "All(32)");
    Ok("OddLayers(24), TopHalf(32), LatterHalf(24) match".into())
}

fn attention_conservation() -> Check {
    let tasks = toy_tasks();
    let batch = toy_batch(&tasks, 3);
    let mut worst_row: f64 = 0.0;
    let mut worst_total: f64 = 0.0;
    for (lt, lv) in [(2, 3), (0, 3), (2, 0), (0, 0)] {
        let arch = toy_arch(lt, lv);
        let model = ok(M2ptModel::new(arch, 11))?;
        let (tape, tr) = trace(&arch, &model.params, &batch);
        for layer in tr.encoder_layers.iter().chain(&tr.llm_layers) {
            let maps = tape.attention_maps(layer.attention).ok_or("attention not captured")?;
            for s in 0..maps.segment_lens.len() {
                for h in 0..maps.heads {
                    for row in maps.head(s, h).chunks(maps.segment_lens[s]) {
                        worst_row = worst_row.max((row.iter().sum::<f32>() as f64 - 1.0).abs());
                    }
                }
            }
        }
        for s in 0..batch.len() {
            let report = ok(AttentionRegionReport::from_trace(&tape, &tr, s))?;
            for map in [&report.encoder, &report.llm] {
                worst_total = worst_total.max((map.weighted_total() - 1.0).abs());
                ensure!(map.regions.iter().all(|r| r.width > 0), "empty region reported");
            }
            ensure!(report.llm.region(Region::TextualPrompt).is_some() == (lt > 0), "textual region, lt={lt}");
            ensure!(report.llm.region(Region::VisualPrompt).is_some() == (lv > 0), "visual region, lv={lv}");
            ensure!(report.encoder.region(Region::VisualPrompt).is_some() == (lv > 0), "encoder region, lv={lv}");
            for r in [Region::SystemText, Region::ImageTokens, Region::Instruction] {
                ensure!(report.llm.region(r).is_some(), "missing {}", r.name());
            }
        }
    }
    ensure!(worst_row < 1e-5, "row sum off by {worst_row:e}");
    ensure!(worst_total < 1e-4, "weighted total off by {worst_total:e}");
    Ok(format!("row error {worst_row:.1e}, region total error {worst_total:.1e}"))
}

fn lr_schedule() -> Check {
    let s = ok(LrSchedule::new(7e-4, 1000, 0.03))?;
    ensure!(s.lr_at(14) == 3.5e-4, "s=14 gives {}", s.lr_at(14));
    ensure!(s.lr_at(30) == 7e-4, "s=30 gives {}", s.lr_at(30));
    ensure!(s.lr_at(1000) == 0.0, "s=1000 gives {}", s.lr_at(1000));
    ensure!((30..1000).all(|t| s.lr_at(t + 1) <= s.lr_at(t)), "not monotone after warmup");
    Ok("3.5e-4 at 14, 7e-4 at 30, 0 at 1000".into())
}

fn determinism() -> Check {
    let tasks = toy_tasks();
    let config = TrainConfig {
        batch_size: 8,
        max_steps: Some(30),
        ..TrainConfig::default()
    };
    let trained = |seed| -> std::result::Result<M2ptModel, String> {
        let mut model = ok(M2ptModel::new(toy_arch(2, 2), seed))?;
        ok(train(&mut model, &tasks, &config, seed))?;
        Ok(model)
    };
    let (a, b) = (trained(21)?, trained(21)?);
    ensure!(encode(&a.params, "") == encode(&b.params, ""), "same seed, different checkpoints");
    let dir = ok(tempfile::tempdir())?;
    let (first, second) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    ok(save_checkpoint(&first, &a.params, "seed = 21\n"))?;
    let back = ok(load_checkpoint(&first, &toy_arch(2, 2)))?;
    ok(save_checkpoint(&second, &back.params, &back.echo))?;
    ensure!(ok(std::fs::read(&first))? == ok(std::fs::read(&second))?, "save-load-save changed bytes");
    Ok("bitwise-equal checkpoints, byte-identical round trip".into())
}

fn main() -> ExitCode {
    let only: Option<usize> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let checks: [(&str, fn() -> Check); 10] = [
        ("parameter ratio", parameter_ratio),
        ("gradient fidelity", gradient_fidelity),
        ("freezing invariant", freezing_invariant),
        ("deep-prompt replace", replace_semantics),
        ("cross-modal gradient flow", cross_modal_flow),
        ("zero-shot ordering", zero_shot_ordering),
        ("schedule sets", schedule_sets),
        ("attention conservation", attention_conservation),
        ("lr schedule", lr_schedule),
        ("determinism and round trip", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in checks.iter().enumerate() {
        if only.is_some_and(|n| n != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(check).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {:>2}. {name}: {detail} ({secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL  {:>2}. {name}: {why} ({secs:.1}s)", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
