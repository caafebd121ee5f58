//! Desk-scale multi-expert study: synthetic classification tasks with a
//! similarity knob, expert fine-tuning (full and low-rank), a joint-training
//! baseline on the dataset union, and side-by-side evaluation of every
//! merging recipe.
//!
//! Each task draws inputs from rotated Gaussian class clusters. The
//! similarity knob interpolates the rotation angles: 1.0 makes all tasks
//! identical, 0.0 gives each task an independent rotation, so experts'
//! updates range from aligned to near-orthogonal.

use std::collections::BTreeMap;
use std::path::Path;

use crate::calibrate::CalibrationSet;
use crate::checkpoint::{
    read_container, write_container, Checkpoint, CheckpointKind, Container, Manifest,
    ManifestEntry, Role,
};
use crate::error::{Error, Result};
use crate::merge::{execute_recipe, MergeRecipe, MergedModel};
use crate::mlp::{self, MlpArch, MlpParams};
use crate::taskvec::LORA_ALPHA;
use crate::tensor::{stream_seed, SplitMix64, Tensor};

// ── Synthetic tasks ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TaskSetConfig {
    pub n_tasks: usize,
    pub input_dim: usize,
    pub n_classes: usize,
    pub noise: f64,
    pub similarity: f64,
    pub seed: u64,
    pub train_per_task: usize,
    pub cal_per_task: usize,
    pub eval_per_task: usize,
}

impl Default for TaskSetConfig {
    fn default() -> Self {
        TaskSetConfig {
            n_tasks: 3,
            input_dim: 16,
            n_classes: 4,
            noise: 0.35,
            similarity: 0.3,
            seed: 0,
            train_per_task: 512,
            cal_per_task: 64,
            eval_per_task: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticTaskSet {
    pub config: TaskSetConfig,
    /// Orthogonal rotation per task (d×d).
    pub rotations: Vec<Tensor>,
    /// Shared pre-rotation class means (K×d), pairwise distance ≥ 2σ.
    pub class_means: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Tensor,
    /// Empty for the label-free calibration split.
    pub labels: Vec<usize>,
    pub task_id: usize,
}

#[derive(Debug, Clone)]
pub struct TaskData {
    pub train: Dataset,
    pub cal: Dataset,
    pub eval: Dataset,
}

/// Deterministic task generator: same (seed, similarity, sizes) → identical
/// datasets bytewise. Eval splits are exactly class-balanced.
pub fn gen_tasks(cfg: &TaskSetConfig) -> Result<(SyntheticTaskSet, Vec<TaskData>)> {
    if !(0.0..=1.0).contains(&cfg.similarity) {
        return Err(Error::validation(format!(
            "similarity {} outside [0, 1]",
            cfg.similarity
        )));
    }
    let d = cfg.input_dim;
    let class_means = draw_class_means(cfg)?;
    let mut rotations = Vec::new();
    for t in 0..cfg.n_tasks {
        rotations.push(random_rotation(
            stream_seed(cfg.seed, t as u64, "task-rotation"),
            d,
            1.0 - cfg.similarity,
        )?);
    }
    let ts = SyntheticTaskSet {
        config: *cfg,
        rotations,
        class_means,
    };

    let mut data = Vec::new();
    for t in 0..cfg.n_tasks {
        let train = sample_split(&ts, t, cfg.train_per_task, "train", true)?;
        let cal = sample_split(&ts, t, cfg.cal_per_task, "cal", false)?;
        let eval = sample_split(&ts, t, cfg.eval_per_task, "eval", true)?;
        data.push(TaskData { train, cal, eval });
    }
    Ok((ts, data))
}

fn draw_class_means(cfg: &TaskSetConfig) -> Result<Tensor> {
    let d = cfg.input_dim;
    let k = cfg.n_classes;
    let mut rng = SplitMix64::new(stream_seed(cfg.seed, 0, "class-means"));
    let min_dist = 2.0 * cfg.noise;
    for _attempt in 0..1000 {
        let mut means = vec![0.0f64; k * d];
        for c in 0..k {
            let row: Vec<f64> = (0..d).map(|_| rng.gaussian()).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            for (slot, v) in means[c * d..(c + 1) * d].iter_mut().zip(row) {
                *slot = 1.5 * v / norm;
            }
        }
        let mut ok = true;
        'pairs: for a in 0..k {
            for b in (a + 1)..k {
                let dist: f64 = (0..d)
                    .map(|j| {
                        let diff = means[a * d + j] - means[b * d + j];
                        diff * diff
                    })
                    .sum::<f64>()
                    .sqrt();
                if dist < min_dist {
                    ok = false;
                    break 'pairs;
                }
            }
        }
        if ok {
            return Tensor::from_f64(vec![k, d], &means);
        }
    }
    Err(Error::validation(
        "could not place class means at the required separation",
    ))
}

/// Product of Givens rotations over every coordinate pair, with angles drawn
/// uniformly in (−π, π] and scaled by `spread`. spread = 0 gives the
/// identity; spread = 1 gives a well-dispersed random rotation.
fn random_rotation(seed: u64, d: usize, spread: f64) -> Result<Tensor> {
    let mut rng = SplitMix64::new(seed);
    let mut r = vec![0.0f64; d * d];
    for i in 0..d {
        r[i * d + i] = 1.0;
    }
    for i in 0..d {
        for j in (i + 1)..d {
            let angle = spread * (rng.uniform() * 2.0 - 1.0) * std::f64::consts::PI;
            let (sin, cos) = angle.sin_cos();
            for row in 0..d {
                let xi = r[row * d + i];
                let xj = r[row * d + j];
                r[row * d + i] = cos * xi - sin * xj;
                r[row * d + j] = sin * xi + cos * xj;
            }
        }
    }
    Tensor::from_f64(vec![d, d], &r)
}

fn sample_split(
    ts: &SyntheticTaskSet,
    task: usize,
    n: usize,
    split: &str,
    labelled: bool,
) -> Result<Dataset> {
    let cfg = &ts.config;
    let d = cfg.input_dim;
    let k = cfg.n_classes;
    if !n.is_multiple_of(k) {
        return Err(Error::validation(format!(
            "split size {n} is not divisible by {k} classes"
        )));
    }
    let mut rng = SplitMix64::new(stream_seed(
        cfg.seed,
        task as u64,
        &format!("sample:{split}"),
    ));
    let rot = &ts.rotations[task];
    let mut inputs = vec![0.0f32; n * d];
    let mut labels = Vec::with_capacity(n);
    for s in 0..n {
        let c = s % k;
        // x = R_t·μ_c + σ·ε
        let mut x = vec![0.0f64; d];
        for row in 0..d {
            let mut acc = 0.0f64;
            for col in 0..d {
                acc += rot.at(row, col) as f64 * ts.class_means.at(c, col) as f64;
            }
            x[row] = acc + cfg.noise * rng.gaussian();
        }
        for (slot, v) in inputs[s * d..(s + 1) * d].iter_mut().zip(x) {
            *slot = v as f32;
        }
        labels.push(c);
    }
    Ok(Dataset {
        inputs: Tensor::new(vec![n, d], inputs)?,
        labels: if labelled { labels } else { Vec::new() },
        task_id: task,
    })
}

/// Mean pairwise principal angle (radians) between the class-mean row spaces
/// of different tasks; the testbed's task-heterogeneity diagnostic.
pub fn task_dispersion(ts: &SyntheticTaskSet, k: usize) -> Result<f64> {
    let cfg = &ts.config;
    let rotated: Vec<Tensor> = (0..cfg.n_tasks)
        .map(|t| crate::tensor::matmul_nt(&ts.class_means, &ts.rotations[t]))
        .collect::<Result<_>>()?;
    let mut total = 0.0f64;
    let mut count = 0usize;
    for a in 0..cfg.n_tasks {
        for b in (a + 1)..cfg.n_tasks {
            for angle in crate::taskvec::subspace_angles(&rotated[a], &rotated[b], k)? {
                total += angle;
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::validation(
            "task_dispersion needs at least two tasks",
        ));
    }
    Ok(total / count as f64)
}

// ── Dataset containers ─────────────────────────────────────────────────────

fn dataset_manifest(n: usize, d: usize, labelled: bool) -> Manifest {
    let mut entries = vec![ManifestEntry {
        name: "inputs".to_string(),
        shape: vec![n, d],
        role: Role::Inputs,
        depth: 1,
    }];
    if labelled {
        entries.push(ManifestEntry {
            name: "labels".to_string(),
            shape: vec![n],
            role: Role::Labels,
            depth: 1,
        });
    }
    Manifest {
        layer_count: 1,
        entries,
    }
}

/// Writes a dataset as an MRGF container (kind "dataset"); labels, when
/// present, are stored as f32 class indices.
pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    let n = ds.inputs.shape()[0];
    let d = ds.inputs.shape()[1];
    let labelled = !ds.labels.is_empty();
    if labelled && ds.labels.len() != n {
        return Err(Error::validation(format!(
            "{} labels for {n} inputs",
            ds.labels.len()
        )));
    }
    let manifest = dataset_manifest(n, d, labelled);
    manifest.validate_dataset()?;
    let mut tensors = BTreeMap::new();
    tensors.insert("inputs".to_string(), ds.inputs.clone());
    if labelled {
        tensors.insert(
            "labels".to_string(),
            Tensor::new(vec![n], ds.labels.iter().map(|&l| l as f32).collect())?,
        );
    }
    write_container(
        &Container {
            manifest,
            kind: "dataset".to_string(),
            source_tag: format!("task{}", ds.task_id),
            tensors,
        },
        path,
    )
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let c = read_container(path)?;
    if c.kind != "dataset" {
        return Err(Error::validation(format!(
            "'{}' is a {} container, not a dataset",
            path.display(),
            c.kind
        )));
    }
    c.manifest.validate_dataset()?;
    let inputs = c
        .tensors
        .get("inputs")
        .ok_or_else(|| Error::validation("dataset without inputs"))?
        .clone();
    inputs.require_matrix()?;
    let labels = match c.tensors.get("labels") {
        None => Vec::new(),
        Some(t) => t
            .data()
            .iter()
            .map(|&v| {
                if v < 0.0 || v.fract() != 0.0 {
                    Err(Error::validation(format!("label {v} is not a class index")))
                } else {
                    Ok(v as usize)
                }
            })
            .collect::<Result<_>>()?,
    };
    let task_id = c
        .source_tag
        .strip_prefix("task")
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| {
            Error::validation(format!("dataset tag '{}' names no task", c.source_tag))
        })?;
    Ok(Dataset {
        inputs,
        labels,
        task_id,
    })
}

// ── Training ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Full,
    Lowrank { rank: usize },
}

#[derive(Debug, Clone, Copy)]
pub struct TrainOptions {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub mode: TrainMode,
    pub seed: u64,
    /// Ablation switch: walk the dataset in storage order instead of
    /// shuffling. For the joint baseline this means strictly sequential
    /// task blocks, the order-sensitivity scenario.
    pub ordered: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            steps: 500,
            lr: 0.05,
            batch: 32,
            mode: TrainMode::Full,
            seed: 0,
            ordered: false,
        }
    }
}

/// He-initialized base network pre-trained for 100 steps on an equal mixture
/// of all tasks, so merging starts from a non-trivial shared ancestor.
pub fn init_base(seed: u64, arch: &MlpArch, train_sets: &[Dataset]) -> Result<Checkpoint> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for idx in 0..arch.depth_count() {
        let (out, inp) = arch.layer_dims(idx);
        let scale = (2.0 / inp as f64).sqrt();
        let mut rng = SplitMix64::new(stream_seed(seed, idx as u64, "base-init"));
        weights.push((0..out * inp).map(|_| scale * rng.gaussian()).collect());
        biases.push(vec![0.0f64; out]);
    }
    let params = MlpParams {
        arch: *arch,
        weights,
        biases,
    };
    let init = params.to_checkpoint(CheckpointKind::Base, &format!("base.seed{seed}"))?;
    let mixture = concat_datasets(train_sets)?;
    let opts = TrainOptions {
        steps: 100,
        lr: 0.05,
        batch: 32,
        mode: TrainMode::Full,
        seed: stream_seed(seed, 0, "base-pretrain"),
        ordered: false,
    };
    let mut trained = train(&init, &mixture, &opts)?;
    trained.kind = CheckpointKind::Base;
    trained.source_tag = format!("base.seed{seed}");
    Ok(trained)
}

fn concat_datasets(sets: &[Dataset]) -> Result<Dataset> {
    if sets.is_empty() {
        return Err(Error::validation("no datasets to combine"));
    }
    let d = sets[0].inputs.shape()[1];
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for s in sets {
        if s.inputs.shape()[1] != d {
            return Err(Error::shape("datasets disagree on input dim"));
        }
        if s.labels.is_empty() {
            return Err(Error::validation("cannot train on a label-free dataset"));
        }
        rows.extend_from_slice(s.inputs.data());
        labels.extend_from_slice(&s.labels);
    }
    let n = labels.len();
    Ok(Dataset {
        inputs: Tensor::new(vec![n, d], rows)?,
        labels,
        task_id: usize::MAX,
    })
}

struct BatchIter {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SplitMix64,
    ordered: bool,
}

impl BatchIter {
    fn new(n: usize, batch: usize, seed: u64, ordered: bool) -> BatchIter {
        let mut it = BatchIter {
            order: (0..n).collect(),
            pos: 0,
            batch,
            rng: SplitMix64::new(seed),
            ordered,
        };
        it.reshuffle();
        it
    }

    fn reshuffle(&mut self) {
        if !self.ordered {
            let mut order = std::mem::take(&mut self.order);
            self.rng.shuffle(&mut order);
            self.order = order;
        }
        self.pos = 0;
    }

    fn next_batch(&mut self) -> Vec<usize> {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let slice = self.order[self.pos..self.pos + self.batch].to_vec();
        self.pos += self.batch;
        slice
    }
}

/// Mini-batch SGD on softmax cross-entropy with analytic gradients.
///
/// Full mode updates every dense parameter. Lowrank mode freezes the dense
/// parameters (weights and biases) and trains factor pairs b·a per weight,
/// b zero-initialized so the initial update is exactly zero; the returned
/// checkpoint keeps the frozen dense tensors bit-identical and stores the
/// factors under lowrank_a/lowrank_b roles.
pub fn train(model: &Checkpoint, data: &Dataset, opts: &TrainOptions) -> Result<Checkpoint> {
    if data.labels.is_empty() {
        return Err(Error::validation("cannot train on a label-free dataset"));
    }
    let n = data.inputs.shape()[0];
    let d = data.inputs.shape()[1];
    if opts.batch == 0 || opts.batch > n {
        return Err(Error::validation(format!(
            "batch size {} outside 1..={n}",
            opts.batch
        )));
    }
    let mut params = MlpParams::from_checkpoint(model)?;
    let arch = params.arch;
    if d != arch.input_dim {
        return Err(Error::shape(format!(
            "dataset dim {d} does not match model input dim {}",
            arch.input_dim
        )));
    }
    let k = arch.n_classes;
    if data.labels.iter().any(|&l| l >= k) {
        return Err(Error::validation("label out of class range"));
    }
    let mut batches = BatchIter::new(n, opts.batch, opts.seed, opts.ordered);
    let tag = if data.task_id == usize::MAX {
        "joint".to_string()
    } else {
        format!("task{}", data.task_id)
    };

    match opts.mode {
        TrainMode::Full => {
            for step in 0..opts.steps {
                let idx = batches.next_batch();
                let (x, y) = gather(&data.inputs, &data.labels, &idx);
                let fwd = mlp::forward(&params, &x, idx.len());
                let loss = mlp::cross_entropy(&fwd.probs, &y, k);
                if !loss.is_finite() {
                    return Err(Error::Divergence { step });
                }
                let grads = mlp::backward(&params, &fwd, &mlp::ce_logit_grad(&fwd.probs, &y, k));
                for l in 0..arch.depth_count() {
                    for (p, g) in params.weights[l].iter_mut().zip(&grads.weights[l]) {
                        *p -= opts.lr * g;
                    }
                    for (p, g) in params.biases[l].iter_mut().zip(&grads.biases[l]) {
                        *p -= opts.lr * g;
                    }
                }
            }
            params.to_checkpoint(CheckpointKind::Expert, &tag)
        }
        TrainMode::Lowrank { rank } => {
            if rank == 0 {
                return Err(Error::validation("lowrank training needs rank >= 1"));
            }
            let depth = arch.depth_count();
            let scale = LORA_ALPHA / rank as f64;
            let mut factors_a: Vec<Vec<f64>> = Vec::new();
            let mut factors_b: Vec<Vec<f64>> = Vec::new();
            for idx in 0..depth {
                let (out, inp) = arch.layer_dims(idx);
                if rank > inp.min(out) {
                    return Err(Error::validation(format!(
                        "rank {rank} exceeds layer {idx} dims {out}×{inp}"
                    )));
                }
                let mut rng = SplitMix64::new(stream_seed(opts.seed, idx as u64, "lora-init"));
                let a_scale = 1.0 / (inp as f64).sqrt();
                factors_a.push((0..rank * inp).map(|_| a_scale * rng.gaussian()).collect());
                factors_b.push(vec![0.0f64; out * rank]);
            }

            for step in 0..opts.steps {
                let idx = batches.next_batch();
                let (x, y) = gather(&data.inputs, &data.labels, &idx);
                let mut eff = params.clone();
                for l in 0..depth {
                    let (out, inp) = arch.layer_dims(l);
                    add_factor_product(
                        &mut eff.weights[l],
                        &factors_b[l],
                        &factors_a[l],
                        out,
                        inp,
                        rank,
                        scale,
                    );
                }
                let fwd = mlp::forward(&eff, &x, idx.len());
                let loss = mlp::cross_entropy(&fwd.probs, &y, k);
                if !loss.is_finite() {
                    return Err(Error::Divergence { step });
                }
                let grads = mlp::backward(&eff, &fwd, &mlp::ce_logit_grad(&fwd.probs, &y, k));
                for l in 0..depth {
                    let (out, inp) = arch.layer_dims(l);
                    let dw = &grads.weights[l];
                    // Simultaneous step: both factor gradients read the
                    // values from before this step's updates.
                    let a_now = factors_a[l].clone();
                    let b_now = factors_b[l].clone();
                    for r in 0..rank {
                        for j in 0..inp {
                            let mut acc = 0.0f64;
                            for o in 0..out {
                                acc += b_now[o * rank + r] * dw[o * inp + j];
                            }
                            factors_a[l][r * inp + j] -= opts.lr * scale * acc;
                        }
                    }
                    for o in 0..out {
                        for r in 0..rank {
                            let mut acc = 0.0f64;
                            for j in 0..inp {
                                acc += dw[o * inp + j] * a_now[r * inp + j];
                            }
                            factors_b[l][o * rank + r] -= opts.lr * scale * acc;
                        }
                    }
                }
            }

            // Frozen dense tensors keep the input model's exact bits.
            let manifest = arch.lowrank_manifest(rank);
            let mut tensors = BTreeMap::new();
            for e in model.manifest.dense_entries() {
                tensors.insert(e.name.clone(), model.tensor(&e.name)?.clone());
            }
            for idx in 0..depth {
                let (out, inp) = arch.layer_dims(idx);
                let prefix = arch.layer_prefix(idx);
                tensors.insert(
                    format!("{prefix}.lora_a"),
                    Tensor::from_f64(vec![rank, inp], &factors_a[idx])?,
                );
                tensors.insert(
                    format!("{prefix}.lora_b"),
                    Tensor::from_f64(vec![out, rank], &factors_b[idx])?,
                );
            }
            Ok(Checkpoint {
                manifest,
                tensors,
                kind: CheckpointKind::Expert,
                source_tag: tag,
            })
        }
    }
}

fn add_factor_product(
    w: &mut [f64],
    b: &[f64],
    a: &[f64],
    out: usize,
    inp: usize,
    rank: usize,
    scale: f64,
) {
    for o in 0..out {
        for r in 0..rank {
            let bv = b[o * rank + r];
            if bv == 0.0 {
                continue;
            }
            let coeff = scale * bv;
            for j in 0..inp {
                w[o * inp + j] += coeff * a[r * inp + j];
            }
        }
    }
}

fn gather(inputs: &Tensor, labels: &[usize], idx: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let d = inputs.shape()[1];
    let mut x = Vec::with_capacity(idx.len() * d);
    let mut y = Vec::with_capacity(idx.len());
    for &s in idx {
        x.extend(inputs.data()[s * d..(s + 1) * d].iter().map(|&v| v as f64));
        y.push(labels[s]);
    }
    (x, y)
}

/// Joint training on the shuffled union of all task datasets.
pub fn train_joint(
    base: &Checkpoint,
    datasets: &[Dataset],
    opts: &TrainOptions,
) -> Result<Checkpoint> {
    let union = concat_datasets(datasets)?;
    let mut ck = train(base, &union, opts)?;
    ck.kind = CheckpointKind::Joint;
    ck.source_tag = "joint".to_string();
    Ok(ck)
}

// ── Evaluation ─────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model_tag: String,
    pub task_id: usize,
    pub accuracy: f64,
    /// accuracy / expert accuracy on the same task, when a baseline is given
    /// and the expert accuracy is positive.
    pub retention: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_accuracy: f64,
}

/// Argmax accuracy per task. `expert_baseline` supplies the per-task
/// denominators for retention ratios.
pub fn evaluate(
    model: &Checkpoint,
    evals: &[Dataset],
    expert_baseline: Option<&EvalReport>,
) -> Result<EvalReport> {
    let params = MlpParams::from_checkpoint(model)?;
    let k = params.arch.n_classes;
    let mut rows = Vec::new();
    let mut total = 0.0f64;
    for ds in evals {
        if ds.labels.is_empty() {
            return Err(Error::validation("cannot evaluate on a label-free dataset"));
        }
        let n = ds.inputs.shape()[0];
        let x: Vec<f64> = ds.inputs.data().iter().map(|&v| v as f64).collect();
        let fwd = mlp::forward(&params, &x, n);
        let preds = mlp::predict(&fwd.probs, n, k);
        let correct = preds.iter().zip(&ds.labels).filter(|(p, y)| p == y).count();
        let accuracy = correct as f64 / n as f64;
        let retention = expert_baseline.and_then(|b| {
            b.rows
                .iter()
                .find(|r| r.task_id == ds.task_id && r.accuracy > 0.0)
                .map(|r| accuracy / r.accuracy)
        });
        rows.push(EvalRow {
            model_tag: model.source_tag.clone(),
            task_id: ds.task_id,
            accuracy,
            retention,
        });
        total += accuracy;
    }
    let mean_accuracy = total / evals.len().max(1) as f64;
    Ok(EvalReport {
        rows,
        mean_accuracy,
    })
}

/// Eval-report CSV: `model,task,accuracy,retention` with one row per
/// (model, task); retention is empty when undefined.
pub fn report_to_csv(report: &EvalReport) -> String {
    let mut out = String::from("model,task,accuracy,retention\n");
    for r in &report.rows {
        let ret = r.retention.map(|v| format!("{v:.6}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.6},{}\n",
            r.model_tag, r.task_id, r.accuracy, ret
        ));
    }
    out
}

// ── Suite ──────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SuiteConfig {
    pub seed: u64,
    pub similarity: f64,
    pub recipes: Vec<MergeRecipe>,
    /// Merge low-rank experts instead of fully fine-tuned ones.
    pub lowrank: bool,
    pub lowrank_rank: usize,
    /// Worker threads for independent merges; output is identical to
    /// sequential execution.
    pub threads: usize,
    pub tasks: TaskSetConfig,
    pub train: TrainOptions,
}

impl SuiteConfig {
    pub fn new(seed: u64, similarity: f64, recipes: Vec<MergeRecipe>) -> SuiteConfig {
        SuiteConfig {
            seed,
            similarity,
            recipes,
            lowrank: false,
            lowrank_rank: 2,
            threads: 1,
            tasks: TaskSetConfig {
                seed,
                similarity,
                ..TaskSetConfig::default()
            },
            train: TrainOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub model: String,
    pub kind: String,
    pub accuracy: Vec<f64>,
    pub retention: Vec<Option<f64>>,
    pub mean_accuracy: f64,
    /// Tasks on which this model strictly beats the task's own expert.
    pub wins: usize,
}

#[derive(Debug)]
pub struct SuiteResult {
    pub rows: Vec<SuiteRow>,
    pub merged: Vec<(String, MergedModel)>,
    pub base: Checkpoint,
    pub experts: Vec<Checkpoint>,
    pub joint: Checkpoint,
    pub data: Vec<TaskData>,
}

/// Trains base, experts, and the joint baseline, applies every recipe, and
/// evaluates everything on every task. Row order: experts, joint, then
/// recipes in input order.
pub fn run_suite(cfg: &SuiteConfig) -> Result<SuiteResult> {
    let mut task_cfg = cfg.tasks;
    task_cfg.seed = cfg.seed;
    task_cfg.similarity = cfg.similarity;
    let (_ts, data) = gen_tasks(&task_cfg)?;
    let arch = MlpArch {
        input_dim: task_cfg.input_dim,
        n_classes: task_cfg.n_classes,
        ..MlpArch::default()
    };

    let train_sets: Vec<Dataset> = data.iter().map(|t| t.train.clone()).collect();
    let base = init_base(cfg.seed, &arch, &train_sets)?;

    let mut experts = Vec::new();
    for (t, td) in data.iter().enumerate() {
        let opts = TrainOptions {
            seed: stream_seed(cfg.seed, t as u64, "expert-full"),
            ..cfg.train
        };
        experts.push(train(&base, &td.train, &opts)?);
    }
    let merge_experts: Vec<Checkpoint> = if cfg.lowrank {
        let mut lr_experts = Vec::new();
        for (t, td) in data.iter().enumerate() {
            let opts = TrainOptions {
                seed: stream_seed(cfg.seed, t as u64, "expert-lowrank"),
                mode: TrainMode::Lowrank {
                    rank: cfg.lowrank_rank,
                },
                ..cfg.train
            };
            lr_experts.push(train(&base, &td.train, &opts)?);
        }
        lr_experts
    } else {
        experts.clone()
    };

    let joint_opts = TrainOptions {
        seed: stream_seed(cfg.seed, 0, "joint"),
        ..cfg.train
    };
    let joint = train_joint(&base, &train_sets, &joint_opts)?;

    let evals: Vec<Dataset> = data.iter().map(|t| t.eval.clone()).collect();
    // Expert baseline: expert t's accuracy on task t.
    let mut baseline_rows = Vec::new();
    let mut expert_reports = Vec::new();
    for (t, e) in merge_experts.iter().enumerate() {
        let rep = evaluate(e, &evals, None)?;
        baseline_rows.push(EvalRow {
            model_tag: e.source_tag.clone(),
            task_id: t,
            accuracy: rep.rows[t].accuracy,
            retention: None,
        });
        expert_reports.push(rep);
    }
    let baseline = EvalReport {
        rows: baseline_rows,
        mean_accuracy: expert_reports
            .iter()
            .enumerate()
            .map(|(t, r)| r.rows[t].accuracy)
            .sum::<f64>()
            / merge_experts.len() as f64,
    };

    let per_expert_cals: Vec<CalibrationSet> = data
        .iter()
        .map(|td| {
            CalibrationSet::new(
                td.cal.inputs.clone(),
                &format!("task{}", td.cal.task_id),
                cfg.seed,
            )
        })
        .collect::<Result<_>>()?;
    let pooled64 = pooled_calibration(&data, cfg.seed, 64)?;

    let expert_refs: Vec<&Checkpoint> = merge_experts.iter().collect();
    let merged = run_recipes(
        &cfg.recipes,
        &base,
        &expert_refs,
        &per_expert_cals,
        &pooled64,
        cfg.threads.max(1),
    )?;

    let mut rows = Vec::new();
    for (t, rep) in expert_reports.iter().enumerate() {
        rows.push(make_row(
            format!("expert.task{t}"),
            "expert",
            rep,
            &baseline,
        ));
    }
    let joint_rep = evaluate(&joint, &evals, Some(&baseline))?;
    rows.push(make_row(
        "joint".to_string(),
        "joint",
        &joint_rep,
        &baseline,
    ));
    for (label, mm) in &merged {
        let rep = evaluate(&mm.checkpoint, &evals, Some(&baseline))?;
        rows.push(make_row(label.clone(), "merged", &rep, &baseline));
    }

    Ok(SuiteResult {
        rows,
        merged,
        base,
        experts,
        joint,
        data,
    })
}

/// The suite's AdaMerging calibration: a seeded 64-row subsample of the
/// pooled per-task calibration splits.
pub fn pooled_calibration(data: &[TaskData], seed: u64, take: usize) -> Result<CalibrationSet> {
    let d = data[0].cal.inputs.shape()[1];
    let mut rows: Vec<&[f32]> = Vec::new();
    for td in data {
        let n = td.cal.inputs.shape()[0];
        for s in 0..n {
            rows.push(&td.cal.inputs.data()[s * d..(s + 1) * d]);
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = SplitMix64::new(stream_seed(seed, 0, "adamerging-cal"));
    rng.shuffle(&mut order);
    let take = take.min(order.len());
    let mut flat = Vec::with_capacity(take * d);
    for &i in order.iter().take(take) {
        flat.extend_from_slice(rows[i]);
    }
    CalibrationSet::new(Tensor::new(vec![take, d], flat)?, "pooled-cal", seed)
}

fn run_recipes(
    recipes: &[MergeRecipe],
    base: &Checkpoint,
    experts: &[&Checkpoint],
    per_expert_cals: &[CalibrationSet],
    pooled: &CalibrationSet,
    threads: usize,
) -> Result<Vec<(String, MergedModel)>> {
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Mutex;

    let run_one = |recipe: &MergeRecipe| -> Result<MergedModel> {
        if recipe.method.needs_calibration() {
            let cals: Vec<CalibrationSet> = if recipe.method == crate::merge::Method::AdaMerging {
                vec![pooled.clone()]
            } else {
                per_expert_cals.to_vec()
            };
            execute_recipe(recipe, base, experts, Some(&cals))
        } else {
            execute_recipe(recipe, base, experts, None)
        }
    };

    let labels: Vec<String> = recipes
        .iter()
        .enumerate()
        .map(|(i, r)| format!("merge{i:02}.{}", r.method_id))
        .collect();

    // Failures name the suite row that produced them.
    let tag = |label: &str, e: Error| -> Error {
        match e {
            Error::Recipe { detail } => Error::recipe(format!("{label}: {detail}")),
            Error::Validation { detail } => Error::validation(format!("{label}: {detail}")),
            Error::Shape { detail } => Error::shape(format!("{label}: {detail}")),
            Error::Data { detail } => Error::data(format!("{label}: {detail}")),
            Error::Rank { detail } => Error::rank(format!("{label}: {detail}")),
            Error::DegenerateGeometry { detail } => Error::DegenerateGeometry {
                detail: format!("{label}: {detail}"),
            },
            other => other,
        }
    };

    if threads <= 1 || recipes.len() <= 1 {
        let mut out = Vec::new();
        for (label, recipe) in labels.iter().zip(recipes) {
            out.push((label.clone(), run_one(recipe).map_err(|e| tag(label, e))?));
        }
        return Ok(out);
    }

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MergedModel>>>> =
        Mutex::new((0..recipes.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..threads.min(recipes.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= recipes.len() {
                    break;
                }
                let r = run_one(&recipes[i]);
                results.lock().unwrap()[i] = Some(r);
            });
        }
    });
    let collected = results.into_inner().unwrap();
    let mut out = Vec::new();
    for (label, slot) in labels.into_iter().zip(collected) {
        let merged = slot
            .expect("worker completed every slot")
            .map_err(|e| tag(&label, e))?;
        out.push((label, merged));
    }
    Ok(out)
}

fn make_row(model: String, kind: &str, rep: &EvalReport, baseline: &EvalReport) -> SuiteRow {
    let accuracy: Vec<f64> = rep.rows.iter().map(|r| r.accuracy).collect();
    let retention: Vec<Option<f64>> = rep.rows.iter().map(|r| r.retention).collect();
    let wins = rep
        .rows
        .iter()
        .filter(|r| {
            baseline
                .rows
                .iter()
                .find(|b| b.task_id == r.task_id)
                .is_some_and(|b| r.accuracy > b.accuracy)
        })
        .count();
    SuiteRow {
        model,
        kind: kind.to_string(),
        accuracy,
        retention,
        mean_accuracy: rep.mean_accuracy,
        wins,
    }
}

/// Suite CSV: one row per model with per-task accuracy and retention.
pub fn suite_to_csv(rows: &[SuiteRow]) -> String {
    let n_tasks = rows.first().map(|r| r.accuracy.len()).unwrap_or(0);
    let mut out = String::from("model,kind");
    for t in 0..n_tasks {
        out.push_str(&format!(",acc_task{t},ret_task{t}"));
    }
    out.push_str(",mean_accuracy,wins\n");
    for r in rows {
        out.push_str(&format!("{},{}", r.model, r.kind));
        for t in 0..n_tasks {
            let ret = r.retention[t]
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(",{:.6},{}", r.accuracy[t], ret));
        }
        out.push_str(&format!(",{:.6},{}\n", r.mean_accuracy, r.wins));
    }
    out
}

/// Suite results as a Markdown table.
pub fn suite_to_markdown(rows: &[SuiteRow]) -> String {
    let n_tasks = rows.first().map(|r| r.accuracy.len()).unwrap_or(0);
    let mut out = String::from("| model | kind |");
    for t in 0..n_tasks {
        out.push_str(&format!(" task{t} acc | task{t} ret |"));
    }
    out.push_str(" mean | wins |\n|---|---|");
    for _ in 0..n_tasks {
        out.push_str("---|---|");
    }
    out.push_str("---|---|\n");
    for r in rows {
        out.push_str(&format!("| {} | {} |", r.model, r.kind));
        for t in 0..n_tasks {
            let ret = r.retention[t]
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "-".into());
            out.push_str(&format!(" {:.3} | {} |", r.accuracy[t], ret));
        }
        out.push_str(&format!(" {:.3} | {} |\n", r.mean_accuracy, r.wins));
    }
    out
}
