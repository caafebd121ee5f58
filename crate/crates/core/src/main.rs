//! `consolidate` — train synthetic experts, merge checkpoints with any of
//! twenty recipes, and reproduce the full comparison suite.
//!
//! Exit codes: 0 success, 1 domain error (validation, singularity,
//! divergence; one `ERROR <code>: <detail>` line on stderr), 2 usage error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use consolidate::calibrate::CalibrationSet;
use consolidate::checkpoint::{read_checkpoint, write_atomic, write_checkpoint, Checkpoint};
use consolidate::error::{Error, Result};
use consolidate::merge::{execute_recipe, MergeRecipe, Method, RecipeFile, ALL_METHODS};
use consolidate::mlp::MlpArch;
use consolidate::taskvec::{
    compute_task_vector, layer_norm_profile, profile_to_csv, subspace_angles,
};
use consolidate::testbed::{
    evaluate, gen_tasks, init_base, read_dataset, report_to_csv, run_suite, suite_to_csv,
    suite_to_markdown, train, train_joint, write_dataset, Dataset, EvalReport, EvalRow,
    SuiteConfig, TaskSetConfig, TrainMode, TrainOptions,
};

#[derive(Parser)]
#[command(
    name = "consolidate",
    version,
    about = "Parameter-level model consolidation toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate synthetic task datasets (train/cal/eval splits per task).
    GenTasks {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        similarity: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        n_tasks: usize,
        #[arg(long, default_value_t = 16)]
        input_dim: usize,
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 0.35)]
        noise: f64,
        #[arg(long, default_value_t = 512)]
        train: usize,
        #[arg(long, default_value_t = 64)]
        cal: usize,
        #[arg(long, default_value_t = 256)]
        eval: usize,
    },
    /// Initialize the shared base model (He init + mixture pre-training).
    InitBase {
        #[arg(long)]
        seed: u64,
        /// Training datasets, one per task.
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune an expert on one task dataset.
    Train {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// full or lowrank
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long, default_value_t = 2)]
        rank: usize,
    },
    /// Train the data-mixing baseline on the union of all task datasets.
    TrainJoint {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        steps: usize,
        #[arg(long, default_value_t = 0.05)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        /// Ablation: consume the union strictly in task order instead of
        /// shuffling (order-sensitivity study).
        #[arg(long, default_value_t = false)]
        ordered: bool,
    },
    /// Apply a merge recipe (JSON file naming base, experts, and options).
    Merge {
        #[arg(long)]
        recipe: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a model on eval datasets; optional retention baseline.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// CSV produced by `eval` holding each task's expert accuracy.
        #[arg(long)]
        expert_report: Option<PathBuf>,
    },
    /// Per-depth update-norm profile of experts against a base.
    Profile {
        #[arg(long)]
        base: PathBuf,
        #[arg(long, num_args = 1.., required = true)]
        experts: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Principal angles between two experts' update subspaces.
    Angles {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        expert_a: PathBuf,
        #[arg(long)]
        expert_b: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full study: base, experts, joint baseline, every recipe, one table.
    Suite {
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 0.3)]
        similarity: f64,
        /// "all" or a comma-separated list of method ids.
        #[arg(long, default_value = "all")]
        recipes: String,
        #[arg(long)]
        out: PathBuf,
        /// Merge low-rank experts instead of fully fine-tuned ones.
        #[arg(long, default_value_t = false)]
        lowrank: bool,
        #[arg(long, default_value_t = 2)]
        rank: usize,
        #[arg(long, default_value_t = 500)]
        train_steps: usize,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERROR {}: {e}", e.code());
            ExitCode::FAILURE
        }
    }
}

fn threads_from_env() -> Result<usize> {
    match std::env::var("CONSOLIDATE_THREADS") {
        Err(_) => Ok(1),
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::validation(format!(
                "CONSOLIDATE_THREADS must be a positive integer, got '{raw}'"
            ))),
        },
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::GenTasks {
            seed,
            similarity,
            out,
            n_tasks,
            input_dim,
            classes,
            noise,
            train,
            cal,
            eval,
        } => {
            let cfg = TaskSetConfig {
                n_tasks,
                input_dim,
                n_classes: classes,
                noise,
                similarity,
                seed,
                train_per_task: train,
                cal_per_task: cal,
                eval_per_task: eval,
            };
            let (_, data) = gen_tasks(&cfg)?;
            ensure_dir(&out)?;
            for (t, td) in data.iter().enumerate() {
                write_dataset(&td.train, &out.join(format!("task{t}.train.mrgf")))?;
                write_dataset(&td.cal, &out.join(format!("task{t}.cal.mrgf")))?;
                write_dataset(&td.eval, &out.join(format!("task{t}.eval.mrgf")))?;
            }
            println!("wrote {} tasks to {}", data.len(), out.display());
            Ok(())
        }
        Cmd::InitBase { seed, data, out } => {
            let sets = read_datasets(&data)?;
            let arch = MlpArch {
                input_dim: sets[0].inputs.shape()[1],
                n_classes: class_count(&sets)?,
                ..MlpArch::default()
            };
            let base = init_base(seed, &arch, &sets)?;
            write_checkpoint(&base, &out)?;
            println!("wrote base to {}", out.display());
            Ok(())
        }
        Cmd::Train {
            base,
            data,
            out,
            seed,
            steps,
            lr,
            batch,
            mode,
            rank,
        } => {
            let base = read_checkpoint(&base)?;
            let ds = read_dataset(&data)?;
            let mode = match mode.as_str() {
                "full" => TrainMode::Full,
                "lowrank" => TrainMode::Lowrank { rank },
                other => {
                    return Err(Error::validation(format!(
                        "mode must be 'full' or 'lowrank', got '{other}'"
                    )))
                }
            };
            let opts = TrainOptions {
                steps,
                lr,
                batch,
                mode,
                seed,
                ordered: false,
            };
            let expert = train(&base, &ds, &opts)?;
            write_checkpoint(&expert, &out)?;
            println!("wrote expert to {}", out.display());
            Ok(())
        }
        Cmd::TrainJoint {
            base,
            data,
            out,
            seed,
            steps,
            lr,
            batch,
            ordered,
        } => {
            let base = read_checkpoint(&base)?;
            let sets = read_datasets(&data)?;
            let opts = TrainOptions {
                steps,
                lr,
                batch,
                mode: TrainMode::Full,
                seed,
                ordered,
            };
            let joint = train_joint(&base, &sets, &opts)?;
            write_checkpoint(&joint, &out)?;
            println!("wrote joint model to {}", out.display());
            Ok(())
        }
        Cmd::Merge { recipe, out } => {
            let file = RecipeFile::load(&recipe)?;
            let resolved = file.to_recipe()?;
            let base = read_checkpoint(Path::new(&file.base))?;
            let experts: Vec<Checkpoint> = file
                .experts
                .iter()
                .map(|p| read_checkpoint(Path::new(p)))
                .collect::<Result<_>>()?;
            let refs: Vec<&Checkpoint> = experts.iter().collect();
            let cals = match &file.calibration {
                None => None,
                Some(paths) => {
                    let sets: Vec<CalibrationSet> = paths
                        .iter()
                        .map(|p| {
                            let ds = read_dataset(Path::new(p))?;
                            let labels = (!ds.labels.is_empty()).then_some(ds.labels);
                            CalibrationSet::with_labels(
                                ds.inputs,
                                labels,
                                &format!("task{}", ds.task_id),
                                resolved.seed,
                            )
                        })
                        .collect::<Result<_>>()?;
                    Some(sets)
                }
            };
            let merged = execute_recipe(&resolved, &base, &refs, cals.as_deref())?;
            for w in &merged.warnings {
                eprintln!("warning: {w}");
            }
            write_checkpoint(&merged.checkpoint, &out)?;
            println!(
                "merged {} experts with {}",
                experts.len(),
                resolved.method_id
            );
            Ok(())
        }
        Cmd::Eval {
            model,
            data,
            out,
            expert_report,
        } => {
            let model = read_checkpoint(&model)?;
            let sets = read_datasets(&data)?;
            let baseline = expert_report.map(|p| read_report(&p)).transpose()?;
            let report = evaluate(&model, &sets, baseline.as_ref())?;
            write_atomic(&out, report_to_csv(&report).as_bytes())?;
            println!("mean accuracy {:.4}", report.mean_accuracy);
            Ok(())
        }
        Cmd::Profile { base, experts, out } => {
            let base = read_checkpoint(&base)?;
            let mut tvs = experts
                .iter()
                .map(|p| {
                    let e = read_checkpoint(p)?;
                    compute_task_vector(&base, &e)
                })
                .collect::<Result<Vec<_>>>()?;
            // Disambiguate experts that share a source tag.
            let tags: Vec<String> = tvs.iter().map(|tv| tv.expert_tag.clone()).collect();
            for (i, tv) in tvs.iter_mut().enumerate() {
                if tags.iter().filter(|t| **t == tv.expert_tag).count() > 1 {
                    tv.expert_tag = format!("{}.{i}", tv.expert_tag);
                }
            }
            let rows = layer_norm_profile(&tvs);
            write_atomic(&out, profile_to_csv(&rows).as_bytes())?;
            println!("wrote {} profile rows", rows.len());
            Ok(())
        }
        Cmd::Angles {
            base,
            expert_a,
            expert_b,
            k,
            out,
        } => {
            let base = read_checkpoint(&base)?;
            let a = compute_task_vector(&base, &read_checkpoint(&expert_a)?)?;
            let b = compute_task_vector(&base, &read_checkpoint(&expert_b)?)?;
            let mut csv = String::from("tensor,index,radians\n");
            for e in a.manifest.entries.iter().filter(|e| e.shape.len() == 2) {
                let angles = subspace_angles(a.delta(&e.name)?, b.delta(&e.name)?, k)?;
                for (i, angle) in angles.iter().enumerate() {
                    csv.push_str(&format!("{},{},{:.6}\n", e.name, i, angle));
                }
            }
            write_atomic(&out, csv.as_bytes())?;
            println!("wrote angles to {}", out.display());
            Ok(())
        }
        Cmd::Suite {
            seed,
            similarity,
            recipes,
            out,
            lowrank,
            rank,
            train_steps,
        } => {
            let recipe_list = parse_recipe_list(&recipes, seed)?;
            let mut cfg = SuiteConfig::new(seed, similarity, recipe_list);
            cfg.lowrank = lowrank;
            cfg.lowrank_rank = rank;
            cfg.threads = threads_from_env()?;
            cfg.train.steps = train_steps;
            let result = run_suite(&cfg)?;
            ensure_dir(&out)?;
            write_checkpoint(&result.base, &out.join("base.mrgf"))?;
            for (t, e) in result.experts.iter().enumerate() {
                write_checkpoint(e, &out.join(format!("expert{t}.mrgf")))?;
            }
            write_checkpoint(&result.joint, &out.join("joint.mrgf"))?;
            for (label, mm) in &result.merged {
                write_checkpoint(&mm.checkpoint, &out.join(format!("{label}.mrgf")))?;
            }
            write_atomic(
                &out.join("suite.csv"),
                suite_to_csv(&result.rows).as_bytes(),
            )?;
            write_atomic(
                &out.join("suite.md"),
                suite_to_markdown(&result.rows).as_bytes(),
            )?;
            println!(
                "suite complete: {} rows -> {}",
                result.rows.len(),
                out.join("suite.csv").display()
            );
            Ok(())
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), &e))
}

fn read_datasets(paths: &[PathBuf]) -> Result<Vec<Dataset>> {
    paths.iter().map(|p| read_dataset(p)).collect()
}

fn class_count(sets: &[Dataset]) -> Result<usize> {
    let max = sets
        .iter()
        .flat_map(|s| s.labels.iter())
        .max()
        .ok_or_else(|| Error::validation("datasets carry no labels"))?;
    Ok(max + 1)
}

/// "all" expands to every method in catalog order with defaults.
fn parse_recipe_list(list: &str, seed: u64) -> Result<Vec<MergeRecipe>> {
    if list == "all" {
        return Ok(ALL_METHODS
            .into_iter()
            .map(|m| MergeRecipe::with_defaults(m, seed))
            .collect());
    }
    list.split(',')
        .map(|id| Method::parse(id.trim()).map(|m| MergeRecipe::with_defaults(m, seed)))
        .collect()
}

/// Parses an eval-report CSV back into a retention baseline: the first row
/// per task supplies that task's expert accuracy.
fn read_report(path: &Path) -> Result<EvalReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
    let mut rows: Vec<EvalRow> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() < 3 {
            return Err(Error::validation(format!(
                "report line {} has {} fields, expected at least 3",
                i + 1,
                fields.len()
            )));
        }
        let task_id: usize = fields[1]
            .parse()
            .map_err(|_| Error::validation(format!("bad task id '{}'", fields[1])))?;
        let accuracy: f64 = fields[2]
            .parse()
            .map_err(|_| Error::validation(format!("bad accuracy '{}'", fields[2])))?;
        if !rows.iter().any(|r: &EvalRow| r.task_id == task_id) {
            rows.push(EvalRow {
                model_tag: fields[0].to_string(),
                task_id,
                accuracy,
                retention: None,
            });
        }
    }
    if rows.is_empty() {
        return Err(Error::validation("expert report holds no rows"));
    }
    let mean = rows.iter().map(|r| r.accuracy).sum::<f64>() / rows.len() as f64;
    Ok(EvalReport {
        rows,
        mean_accuracy: mean,
    })
}
