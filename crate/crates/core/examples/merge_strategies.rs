//! Demonstrates the merging toolkit end to end on a small synthetic study:
//! three tasks, per-task experts fine-tuned from a shared base, and four
//! merging strategies evaluated side by side.
//!
//! Run with: `cargo run --example merge_strategies`

use consolidate::calibrate::CalibrationSet;
use consolidate::merge::{execute_recipe, MergeRecipe, Method};
use consolidate::mlp::MlpArch;
use consolidate::tensor::stream_seed;
use consolidate::testbed::{
    evaluate, gen_tasks, init_base, train, Dataset, TaskSetConfig, TrainOptions,
};

fn main() -> consolidate::Result<()> {
    let seed = 42;
    let cfg = TaskSetConfig {
        seed,
        similarity: 0.3,
        ..TaskSetConfig::default()
    };
    let (_, data) = gen_tasks(&cfg)?;
    let train_sets: Vec<Dataset> = data.iter().map(|t| t.train.clone()).collect();
    let eval_sets: Vec<Dataset> = data.iter().map(|t| t.eval.clone()).collect();

    println!("training base and {} experts...", data.len());
    let base = init_base(seed, &MlpArch::default(), &train_sets)?;
    let experts: Vec<_> = data
        .iter()
        .enumerate()
        .map(|(t, td)| {
            let opts = TrainOptions {
                seed: stream_seed(seed, t as u64, "expert-full"),
                ..TrainOptions::default()
            };
            train(&base, &td.train, &opts)
        })
        .collect::<consolidate::Result<_>>()?;
    let refs: Vec<&_> = experts.iter().collect();

    println!(
        "\n{:<12} {:>8} {:>8} {:>8} {:>8}",
        "model", "task0", "task1", "task2", "mean"
    );
    for (t, e) in experts.iter().enumerate() {
        let rep = evaluate(e, &eval_sets, None)?;
        print_row(&format!("expert{t}"), &rep);
    }

    // Per-expert calibration inputs for the activation-matching method.
    let cals: Vec<CalibrationSet> = data
        .iter()
        .map(|td| CalibrationSet::new(td.cal.inputs.clone(), "cal", seed))
        .collect::<consolidate::Result<_>>()?;

    for method in [Method::Average, Method::Ties, Method::Tsv, Method::RegMean] {
        let recipe = MergeRecipe::with_defaults(method, seed);
        let merged = if method.needs_calibration() {
            execute_recipe(&recipe, &base, &refs, Some(&cals))?
        } else {
            execute_recipe(&recipe, &base, &refs, None)?
        };
        let rep = evaluate(&merged.checkpoint, &eval_sets, None)?;
        print_row(method.id(), &rep);
    }
    Ok(())
}

fn print_row(label: &str, rep: &consolidate::testbed::EvalReport) {
    print!("{label:<12}");
    for row in &rep.rows {
        print!(" {:>8.3}", row.accuracy);
    }
    println!(" {:>8.3}", rep.mean_accuracy);
}
