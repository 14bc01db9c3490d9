//! `m2pt`: train, evaluate and analyse multimodal prompt tuning runs.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use m2pt_core::accounting::{backbone_total, count_params_ratio, ParamAccount, REFERENCE_BASE_TOTAL};
use m2pt_core::attention::extract_attention_report;
use m2pt_core::checkpoint::{check_shapes, load_checkpoint, read_checkpoint, save_checkpoint};
use m2pt_core::eval::evaluate_accuracy;
use m2pt_core::experiment::{
    ablate_components, grid_search, load_split, location_study, run, sweep_data, sweep_epochs, sweep_init,
    write_metrics, write_rows, Drop, StudyRow,
};
use m2pt_core::tasks::dump_jsonl;
use m2pt_core::{M2ptModel, ModelSpec, PromptPlan, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "m2pt", version, about = "Multimodal prompt tuning experiments")]
struct Cli {
    /// TOML run configuration; defaults apply to anything left out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, default_value = "runs/latest")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train, then write the checkpoint, metrics and unseen-task accuracy.
    Train,
    /// Score a checkpoint on the unseen tasks.
    Eval {
        /// Defaults to `<out>/model.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain with one component removed at a time.
    Ablate {
        #[arg(long, value_delimiter = ',', default_values = ["visual", "textual", "interaction"])]
        drop: Vec<String>,
    },
    /// Compare the five prompt schedules.
    Locations,
    /// Grid over learning rate and prompt lengths.
    Grid {
        #[arg(long, value_delimiter = ',', required = true)]
        lrs: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        lt: Vec<usize>,
        #[arg(long, value_delimiter = ',', required = true)]
        lv: Vec<usize>,
    },
    /// Train on growing fractions of the training data.
    SweepData {
        #[arg(long, value_delimiter = ',', default_values = ["0.25", "0.5", "0.75", "1.0"])]
        fractions: Vec<f64>,
    },
    /// Train for different numbers of epochs.
    SweepEpochs {
        #[arg(long, value_delimiter = ',', default_values = ["1", "2", "3"])]
        epochs: Vec<usize>,
    },
    /// Xavier against random-normal prompt initialisation.
    SweepInit,
    /// Trainable-parameter accounting.
    CountParams {
        /// Use CLIP-L / Vicuna-7B dimensions and print both reference rows.
        #[arg(long = "paper-scale")]
        reference_scale: bool,
    },
    /// Per-region attention of the last encoder and language-model layers.
    AnalyzeAttention {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        instance_seed: u64,
        /// Task to draw the instance from; defaults to the first unseen task.
        #[arg(long)]
        task: Option<usize>,
    },
    /// Write both task splits as JSON lines.
    DumpData,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn prepare_out(dir: &Path, config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    config.write_echo(dir)?;
    Ok(())
}

fn print_rows(title: &str, rows: &[StudyRow]) {
    println!("{title}");
    for r in rows {
        println!(
            "  {:<24} accuracy {:.4}  trainable {:>8}  final loss {:.4}",
            r.setting, r.accuracy, r.trainable_params, r.final_loss
        );
    }
}

fn print_account(label: &str, a: &ParamAccount) {
    println!(
        "{label}: visual {} + textual {} + interaction {} + head {} = {} trainable of {} -> {:.4}% ({})",
        a.visual_prompts,
        a.textual_prompts,
        a.interaction,
        a.head,
        a.trainable,
        a.base_total,
        a.percent(),
        a.percent_rounded()
    );
}

fn count_params(config: &RunConfig, reference_scale: bool) {
    let interaction = config.fusion.trainable;
    let head = config.train.head_trainable;
    if reference_scale {
        let spec = ModelSpec::reference_scale();
        for (lt, lv) in [(10, 20), (10, 10)] {
            let plan = PromptPlan {
                textual_len: lt,
                visual_len: lv,
                ..config.architecture().plan
            };
            let a = count_params_ratio(&spec, &plan, REFERENCE_BASE_TOTAL, head, interaction);
            print_account(&format!("Lt={lt} Lv={lv}"), &a);
        }
    } else {
        let arch = config.architecture();
        let a = count_params_ratio(&arch.spec, &arch.plan, backbone_total(&arch.spec), head, interaction);
        print_account(&format!("Lt={} Lv={}", arch.plan.textual_len, arch.plan.visual_len), &a);
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    let out = &cli.out;
    match &cli.command {
        Command::CountParams { reference_scale } => {
            count_params(&config, *reference_scale);
            return Ok(());
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| out.join("model.ckpt"));
            let ckpt = read_checkpoint(&path)?;
            // Without an explicit --config, score under the checkpoint's own settings.
            let config = match &cli.config {
                Some(_) => config,
                None => RunConfig::parse(&ckpt.echo).context("checkpoint config echo")?,
            };
            check_shapes(&ckpt.params, &config.architecture())?;
            let model = M2ptModel {
                arch: config.architecture(),
                params: ckpt.params,
            };
            let split = load_split(&config)?;
            let report = evaluate_accuracy(&model, &split.unseen)?;
            std::fs::create_dir_all(out)?;
            write_rows(&report.per_task, &out.join("eval.csv"))?;
            for t in &report.per_task {
                println!("task {:>3}: {}/{} = {:.4}", t.task_id, t.correct, t.total, t.accuracy);
            }
            println!("unseen accuracy {:.4}", report.mean);
            return Ok(());
        }
        _ => {}
    }

    prepare_out(out, &config)?;
    let split = load_split(&config)?;
    match &cli.command {
        Command::Train => {
            let result = run(&config, &split.train, &split.unseen)?;
            save_checkpoint(&out.join("model.ckpt"), &result.model.params, &config.to_toml())?;
            write_metrics(&result.outcome.metrics, &out.join("metrics.csv"))?;
            write_rows(&result.unseen.per_task, &out.join("accuracy.csv"))?;
            println!(
                "trained {} steps, final loss {:.4}, {} trainable parameters",
                result.outcome.metrics.len(),
                result.final_loss(),
                result.trainable_params
            );
            println!("unseen accuracy {:.4}", result.unseen.mean);
        }
        Command::Ablate { drop } => {
            let drops = drop.iter().map(|d| d.parse()).collect::<Result<Vec<Drop>, _>>()?;
            let rows = ablate_components(&config, &split, &drops)?;
            write_rows(&rows, &out.join("ablate.csv"))?;
            print_rows("ablation", &rows);
        }
        Command::Locations => {
            let rows = location_study(&config, &split)?;
            write_rows(&rows, &out.join("locations.csv"))?;
            print_rows("prompt locations", &rows);
        }
        Command::Grid { lrs, lt, lv } => {
            let report = grid_search(&config, &split, lrs, lt, lv)?;
            report.write_csv(&out.join("grid.csv"))?;
            for r in report.ranked.iter().chain(&report.failed) {
                let acc = r.accuracy.map_or("-".to_string(), |a| format!("{a:.4}"));
                println!("lr {:<8} lt {:>3} lv {:>3}  accuracy {acc}  trainable {:>8}  {}", r.lr, r.lt, r.lv, r.trainable_params, r.status);
            }
            if report.ranked.is_empty() {
                bail!("every grid cell failed");
            }
        }
        Command::SweepData { fractions } => {
            let rows = sweep_data(&config, &split, fractions)?;
            write_rows(&rows, &out.join("sweep_data.csv"))?;
            print_rows("data fraction", &rows);
        }
        Command::SweepEpochs { epochs } => {
            let rows = sweep_epochs(&config, &split, epochs)?;
            write_rows(&rows, &out.join("sweep_epochs.csv"))?;
            print_rows("epochs", &rows);
        }
        Command::SweepInit => {
            let rows = sweep_init(&config, &split)?;
            write_rows(&rows, &out.join("sweep_init.csv"))?;
            print_rows("prompt init", &rows);
        }
        Command::AnalyzeAttention {
            checkpoint,
            instance_seed,
            task,
        } => {
            let arch = config.architecture();
            let ckpt = load_checkpoint(checkpoint, &arch)?;
            let model = M2ptModel {
                arch,
                params: ckpt.params,
            };
            let all = split.train.iter().chain(&split.unseen);
            let task = match task {
                Some(id) => all.clone().find(|t| t.id == *id).with_context(|| format!("no task {id}"))?,
                None => &split.unseen[0],
            };
            let label = (*instance_seed % task.labels().len() as u64) as usize;
            let instance = task.render(*instance_seed, label, true);
            let report = extract_attention_report(&model, &instance)?;
            report.encoder.write_csv(&out.join("attention_encoder.csv"))?;
            report.llm.write_csv(&out.join("attention_llm.csv"))?;
            report.write_summary_csv(&out.join("attention_regions.csv"))?;
            for (tower, map) in [("encoder", &report.encoder), ("llm", &report.llm)] {
                println!("{tower} (last layer, {} positions)", map.len);
                for r in &map.regions {
                    println!("  {:<16} [{:>3}, {:>3})  mean {:.5}", r.region.name(), r.start, r.start + r.width, r.mean);
                }
            }
        }
        Command::DumpData => {
            dump_jsonl(&split.train, &out.join("train.jsonl"))?;
            dump_jsonl(&split.unseen, &out.join("unseen.jsonl"))?;
            println!(
                "{} training tasks, {} unseen tasks written to {}",
                split.train.len(),
                split.unseen.len(),
                out.display()
            );
        }
        Command::CountParams { .. } | Command::Eval { .. } => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
