//! Acceptance gate: seven criteria, each printed as its own pass line with
//! the measured wall time. A static mutex serializes the criteria so the
//! stated runtime budgets are measured without cross-test contention.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Instant;

use consolidate::calibrate::{adamerging_optimize, CalibrationSet};
use consolidate::checkpoint::{Checkpoint, CheckpointKind, Manifest, ManifestEntry, Role};
use consolidate::merge::subspace::wudi_matrix;
use consolidate::merge::{
    apply_recipe, execute_recipe, Granularity, MergeRecipe, Method, ALL_METHODS,
};
use consolidate::mlp::{self, MlpArch, MlpParams};
use consolidate::taskvec::{compute_task_vector, normalize_task_vectors, NormLevel};
use consolidate::tensor::{frobenius_norm, gaussian, norm_of_slice, svd, SplitMix64, Tensor};
use consolidate::testbed::{
    gen_tasks, init_base, pooled_calibration, run_suite, suite_to_csv, train, SuiteConfig,
    TaskSetConfig, TrainMode, TrainOptions,
};

static GATE: Mutex<()> = Mutex::new(());

fn criterion<T>(n: usize, name: &str, budget_s: f64, body: impl FnOnce() -> T) -> T {
    let _lock = GATE.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let out = body();
    let elapsed = start.elapsed().as_secs_f64();
    println!("ACCEPTANCE {n} ({name}): PASS in {elapsed:.2} s (budget {budget_s} s)");
    assert!(
        elapsed < budget_s,
        "criterion {n} exceeded its runtime budget: {elapsed:.2} s >= {budget_s} s"
    );
    out
}

// ── Shared fixtures ────────────────────────────────────────────────────────

fn small_mlp(seed: u64, kind: CheckpointKind, tag: &str) -> Checkpoint {
    let arch = MlpArch {
        input_dim: 6,
        hidden_layers: 2,
        hidden_width: 8,
        n_classes: 3,
    };
    let mut rng = SplitMix64::new(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for idx in 0..arch.depth_count() {
        let (out, inp) = arch.layer_dims(idx);
        weights.push((0..out * inp).map(|_| 0.5 * rng.gaussian()).collect());
        biases.push((0..out).map(|_| 0.1 * rng.gaussian()).collect());
    }
    MlpParams {
        arch,
        weights,
        biases,
    }
    .to_checkpoint(kind, tag)
    .unwrap()
}

fn vector_manifest(len: usize) -> Manifest {
    Manifest {
        layer_count: 1,
        entries: vec![
            ManifestEntry {
                name: "layers.1.weight".into(),
                shape: vec![1, len],
                role: Role::Weight,
                depth: 1,
            },
            ManifestEntry {
                name: "layers.1.bias".into(),
                shape: vec![1],
                role: Role::Bias,
                depth: 1,
            },
        ],
    }
}

fn planted(manifest: &Manifest, weight: Vec<f32>, kind: CheckpointKind, tag: &str) -> Checkpoint {
    let mut tensors = BTreeMap::new();
    tensors.insert(
        "layers.1.weight".into(),
        Tensor::new(manifest.entries[0].shape.clone(), weight).unwrap(),
    );
    tensors.insert(
        "layers.1.bias".into(),
        Tensor::zeros(manifest.entries[1].shape.clone()),
    );
    Checkpoint {
        manifest: manifest.clone(),
        tensors,
        kind,
        source_tag: tag.into(),
    }
}

fn planted_merge(
    len: usize,
    experts: Vec<Vec<f32>>,
    method: Method,
    params: &[(&str, f64)],
    weights: Option<Vec<f64>>,
) -> Vec<f32> {
    let manifest = vector_manifest(len);
    let base = planted(&manifest, vec![0.0; len], CheckpointKind::Base, "base");
    let experts: Vec<Checkpoint> = experts
        .into_iter()
        .enumerate()
        .map(|(i, w)| planted(&manifest, w, CheckpointKind::Expert, &format!("task{i}")))
        .collect();
    let refs: Vec<&Checkpoint> = experts.iter().collect();
    let mut pmap = BTreeMap::new();
    for (k, v) in params {
        pmap.insert((*k).to_string(), *v);
    }
    let recipe = MergeRecipe::new(
        method,
        method.default_granularity(),
        weights,
        1.0,
        pmap,
        false,
        17,
    )
    .unwrap();
    apply_recipe(&recipe, &base, &refs)
        .unwrap()
        .checkpoint
        .tensor("layers.1.weight")
        .unwrap()
        .data()
        .to_vec()
}

// ── Criterion 1: operator identity suite ──────────────────────────────────

#[test]
fn criterion_1_operator_identity() {
    criterion(1, "operator identity", 10.0, || {
        let base = small_mlp(1, CheckpointKind::Base, "base");
        let same = [base.clone(), base.clone(), base.clone()];
        let refs: Vec<&Checkpoint> = same.iter().collect();
        let cal = CalibrationSet::new(gaussian(5, &[8, 6]), "cal", 5).unwrap();

        let mut delta_methods = 0;
        for method in ALL_METHODS {
            if method.interpolates_raw() {
                continue;
            }
            delta_methods += 1;
            let recipe = MergeRecipe::with_defaults(method, 7);
            let merged = if method.needs_calibration() {
                execute_recipe(&recipe, &base, &refs, Some(std::slice::from_ref(&cal)))
            } else {
                execute_recipe(&recipe, &base, &refs, None)
            }
            .unwrap_or_else(|e| panic!("{} failed: {e}", method.id()));
            for (name, t) in &merged.checkpoint.tensors {
                assert_eq!(
                    t.data(),
                    base.tensor(name).unwrap().data(),
                    "{}: tensor {name} not bit-identical",
                    method.id()
                );
            }
        }
        assert_eq!(delta_methods, 18, "expected all 18 delta-based operators");

        // Average with equal weights on identical experts → expert exactly.
        let recipe = MergeRecipe::new(
            Method::Average,
            Granularity::Model,
            Some(vec![1.0 / 3.0; 3]),
            1.0,
            BTreeMap::new(),
            false,
            7,
        )
        .unwrap();
        let merged = apply_recipe(&recipe, &base, &refs).unwrap();
        for (name, t) in &merged.checkpoint.tensors {
            assert_eq!(
                t.data(),
                base.tensor(name).unwrap().data(),
                "average: {name}"
            );
        }
    });
}

// ── Criterion 2: hand-trace oracle suite ──────────────────────────────────

#[test]
fn criterion_2_hand_traces() {
    criterion(2, "hand-trace oracles", 5.0, || {
        let tol = 1e-5;

        // TIES: (+2, +1, −3) at k = 1 elects + and averages to 1.5.
        let out = planted_merge(
            1,
            vec![vec![2.0], vec![1.0], vec![-3.0]],
            Method::Ties,
            &[("k", 1.0)],
            None,
        );
        assert!((out[0] as f64 - 1.5).abs() < tol);

        // SCE: c = (5/7, 2/7) → element 0 = 12/7, element 1 erased.
        let out = planted_merge(
            2,
            vec![vec![2.0, -1.0], vec![1.0, 1.0]],
            Method::Sce,
            &[("p", 1.0)],
            None,
        );
        assert!((out[0] as f64 - 12.0 / 7.0).abs() < tol);
        assert_eq!(out[1], 0.0);

        // CABS: disjoint claims, rescale to each expert's norm.
        let out = planted_merge(
            4,
            vec![vec![3.0, 1.0, -2.0, 0.5], vec![2.5, 4.0, 0.1, -1.0]],
            Method::Cabs,
            &[("n", 1.0), ("m", 4.0)],
            None,
        );
        assert!((out[0] as f64 - 14.25f64.sqrt()).abs() < tol);
        assert!((out[1] as f64 - 23.26f64.sqrt()).abs() < tol);
        assert_eq!((out[2], out[3]), (0.0, 0.0));

        // CAT: projecting [[1,2],[3,4]] off span(e1) leaves [[0,2],[0,4]].
        let basis = Tensor::eye(2);
        let cat = consolidate::calibrate::project_off(&[1.0, 2.0, 3.0, 4.0], 2, 2, &basis, 1);
        for (got, want) in cat.iter().zip([0.0, 2.0, 0.0, 4.0]) {
            assert!((got - want).abs() < tol);
        }

        // SLERP midpoint of orthogonal unit vectors: (√2/2)(e1+e2), norm 1.
        let manifest = vector_manifest(2);
        let base = planted(&manifest, vec![0.0, 0.0], CheckpointKind::Base, "base");
        let mut e1 = planted(&manifest, vec![1.0, 0.0], CheckpointKind::Expert, "task0");
        let mut e2 = planted(&manifest, vec![0.0, 1.0], CheckpointKind::Expert, "task1");
        for e in [&mut e1, &mut e2] {
            e.tensors.insert(
                "layers.1.bias".into(),
                Tensor::new(vec![1], vec![1.0]).unwrap(),
            );
        }
        let recipe = MergeRecipe::new(
            Method::Slerp,
            Granularity::Matrix,
            None,
            1.0,
            BTreeMap::from([("t".to_string(), 0.5)]),
            false,
            0,
        )
        .unwrap();
        let refs = vec![&e1, &e2];
        let merged = apply_recipe(&recipe, &base, &refs).unwrap();
        let w = merged.checkpoint.tensor("layers.1.weight").unwrap();
        let want = 2f64.sqrt() / 2.0;
        assert!((w.data()[0] as f64 - want).abs() < tol);
        assert!((w.data()[1] as f64 - want).abs() < tol);
        assert!((norm_of_slice(w.data()) - 1.0).abs() < tol);

        // IMPART: σ = (3, 1), τ = 0.9 keeps exactly the first component.
        let manifest = Manifest {
            layer_count: 1,
            entries: vec![
                ManifestEntry {
                    name: "layers.1.weight".into(),
                    shape: vec![2, 2],
                    role: Role::Weight,
                    depth: 1,
                },
                ManifestEntry {
                    name: "layers.1.bias".into(),
                    shape: vec![2],
                    role: Role::Bias,
                    depth: 1,
                },
            ],
        };
        let base = planted(&manifest, vec![0.0; 4], CheckpointKind::Base, "base");
        let e = planted(
            &manifest,
            vec![3.0, 0.0, 0.0, 1.0],
            CheckpointKind::Expert,
            "task0",
        );
        let recipe = MergeRecipe::with_defaults(Method::Impart, 0);
        let refs = vec![&e];
        let merged = apply_recipe(&recipe, &base, &refs).unwrap();
        let w = merged.checkpoint.tensor("layers.1.weight").unwrap();
        for (got, want) in w.data().iter().zip([3.0f32, 0.0, 0.0, 0.0]) {
            assert!((got - want).abs() < tol as f32, "{:?}", w.data());
        }

        // TADrop: keep 3 of 4, rescale by √(12/11).
        let out = planted_merge(
            4,
            vec![vec![3.0, 1.0, 1.0, 1.0]],
            Method::TaDrop,
            &[("rho", 0.9)],
            None,
        );
        let rescale = (12.0f64 / 11.0).sqrt();
        assert!((out[0] as f64 - 3.0 * rescale).abs() < tol);
        assert!((out[1] as f64 - rescale).abs() < tol);
        assert_eq!(out[3], 0.0);

        // Consensus TA: selfish weights eliminated.
        let out = planted_merge(
            2,
            vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            Method::ConsensusTa,
            &[("lambda_mask", 0.4), ("min_support", 2.0)],
            None,
        );
        assert_eq!(out, vec![0.0, 0.0]);

        // MetaGPT: squared-norm ratio coefficients 0.25 / 0.75.
        let manifest = vector_manifest(1);
        let base = planted(&manifest, vec![0.0], CheckpointKind::Base, "base");
        let e1 = planted(&manifest, vec![1.0], CheckpointKind::Expert, "task0");
        let e2 = planted(
            &manifest,
            vec![3f32.sqrt()],
            CheckpointKind::Expert,
            "task1",
        );
        let recipe = MergeRecipe::with_defaults(Method::MetaGpt, 0);
        let refs = vec![&e1, &e2];
        let merged = apply_recipe(&recipe, &base, &refs).unwrap();
        let lambdas = &merged.per_tensor_coefficients.unwrap()["model"];
        assert!((lambdas[0] - 0.25).abs() < tol);
        assert!((lambdas[1] - 0.75).abs() < tol);
    });
}

// ── Criterion 3: numerical oracles ─────────────────────────────────────────

#[test]
fn criterion_3_numerical_oracles() {
    criterion(3, "numerical oracles", 60.0, || {
        // SVD reconstruction over 200 random matrices up to 32×32.
        let mut shape_rng = SplitMix64::new(0xC3);
        for case in 0..200u64 {
            let m = 1 + shape_rng.below(32);
            let n = 1 + shape_rng.below(32);
            let a = gaussian(1000 + case, &[m, n]);
            let r = svd(&a).unwrap();
            let mut recon = vec![0.0f64; m * n];
            for i in 0..m {
                for j in 0..n {
                    for c in 0..r.s.len() {
                        recon[i * n + j] +=
                            r.u.at(i, c) as f64 * r.s.data()[c] as f64 * r.v.at(j, c) as f64;
                    }
                }
            }
            let diff: Vec<f32> = a
                .data()
                .iter()
                .zip(&recon)
                .map(|(&x, &y)| x - y as f32)
                .collect();
            let rel = norm_of_slice(&diff) / frobenius_norm(&a).max(1e-30);
            assert!(rel <= 1e-6, "case {case} ({m}×{n}): {rel}");
        }

        // RegMean (ρ = 1, one layer) against dense normal equations.
        regmean_vs_normal_equations();

        // Backprop against central finite differences, full and low-rank.
        gradcheck_full();
        gradcheck_lowrank();

        // DARE and DELLA Monte-Carlo expectations within binomial bounds.
        let n = 10_000usize;
        let out = planted_merge(n, vec![vec![1.0; n]], Method::Dare, &[("p", 0.5)], None);
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        assert!((4800..=5200).contains(&kept), "dare kept {kept}");
        let mean: f64 = out.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
        assert!((0.96..=1.04).contains(&mean), "dare mean {mean}");

        let out = planted_merge(
            n,
            vec![vec![1.0; n]],
            Method::Della,
            &[("p_min", 0.5), ("p_max", 0.5)],
            None,
        );
        let kept = out.iter().filter(|&&v| v != 0.0).count();
        assert!((4800..=5200).contains(&kept), "della kept {kept}");
        let mean_kept: f64 = out
            .iter()
            .filter(|&&v| v != 0.0)
            .map(|&v| v as f64)
            .sum::<f64>()
            / kept as f64;
        assert!(
            (1.96..=2.04).contains(&mean_kept),
            "della survivor mean {mean_kept}"
        );
    });
}

fn regmean_vs_normal_equations() {
    let arch = MlpArch {
        input_dim: 3,
        hidden_layers: 0,
        hidden_width: 3,
        n_classes: 2,
    };
    let mk = |seed: u64, tag: &str, kind: CheckpointKind| {
        let weights = vec![gaussian(seed, &[2, 3])
            .data()
            .iter()
            .map(|&v| v as f64)
            .collect()];
        MlpParams {
            arch,
            weights,
            biases: vec![vec![0.0; 2]],
        }
        .to_checkpoint(kind, tag)
        .unwrap()
    };
    let base = mk(71, "base", CheckpointKind::Base);
    let e1 = mk(72, "task0", CheckpointKind::Expert);
    let e2 = mk(73, "task1", CheckpointKind::Expert);
    let x1 = gaussian(74, &[8, 3]);
    let x2 = gaussian(75, &[8, 3]);
    let recipe = MergeRecipe::new(
        Method::RegMean,
        Granularity::Matrix,
        None,
        1.0,
        BTreeMap::from([("rho".to_string(), 1.0)]),
        false,
        0,
    )
    .unwrap();
    let refs = vec![&e1, &e2];
    let cals = [
        CalibrationSet::new(x1.clone(), "c1", 0).unwrap(),
        CalibrationSet::new(x2.clone(), "c2", 0).unwrap(),
    ];
    let merged = execute_recipe(&recipe, &base, &refs, Some(&cals)).unwrap();
    let got = merged.checkpoint.tensor("head.weight").unwrap();

    // Oracle: accumulate normal equations and eliminate in place.
    let gram = |x: &Tensor| {
        let mut g = vec![0.0f64; 9];
        for s in 0..8 {
            for i in 0..3 {
                for j in 0..3 {
                    g[i * 3 + j] += x.at(s, i) as f64 * x.at(s, j) as f64;
                }
            }
        }
        g
    };
    let g1 = gram(&x1);
    let g2 = gram(&x2);
    let mut aug = [0.0f64; 3 * 5];
    for i in 0..3 {
        for j in 0..3 {
            aug[i * 5 + j] = g1[i * 3 + j] + g2[i * 3 + j];
        }
        for o in 0..2 {
            let mut acc = 0.0;
            for j in 0..3 {
                acc += g1[i * 3 + j] * e1.tensor("head.weight").unwrap().at(o, j) as f64
                    + g2[i * 3 + j] * e2.tensor("head.weight").unwrap().at(o, j) as f64;
            }
            aug[i * 5 + 3 + o] = acc;
        }
    }
    for col in 0..3 {
        let mut pivot = col;
        for row in (col + 1)..3 {
            if aug[row * 5 + col].abs() > aug[pivot * 5 + col].abs() {
                pivot = row;
            }
        }
        for j in 0..5 {
            aug.swap(col * 5 + j, pivot * 5 + j);
        }
        let d = aug[col * 5 + col];
        for j in 0..5 {
            aug[col * 5 + j] /= d;
        }
        for row in 0..3 {
            if row != col {
                let f = aug[row * 5 + col];
                for j in 0..5 {
                    aug[row * 5 + j] -= f * aug[col * 5 + j];
                }
            }
        }
    }
    for o in 0..2 {
        for j in 0..3 {
            let want = aug[j * 5 + 3 + o];
            assert!(
                (got.at(o, j) as f64 - want).abs() < 1e-4,
                "regmean[{o},{j}] {} vs {want}",
                got.at(o, j)
            );
        }
    }
}

fn gradcheck_full() {
    let arch = MlpArch {
        input_dim: 5,
        hidden_layers: 2,
        hidden_width: 8,
        n_classes: 3,
    };
    let mut rng = SplitMix64::new(0x6F);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for idx in 0..arch.depth_count() {
        let (out, inp) = arch.layer_dims(idx);
        weights.push((0..out * inp).map(|_| 0.5 * rng.gaussian()).collect());
        biases.push((0..out).map(|_| 0.1 * rng.gaussian()).collect());
    }
    let params = MlpParams {
        arch,
        weights,
        biases,
    };
    let x: Vec<f64> = (0..6 * 5).map(|_| rng.gaussian()).collect();
    let y: Vec<usize> = (0..6).map(|_| rng.below(3)).collect();

    let fwd = mlp::forward(&params, &x, 6);
    let grads = mlp::backward(&params, &fwd, &mlp::ce_logit_grad(&fwd.probs, &y, 3));
    let gmax = grads
        .weights
        .iter()
        .chain(grads.biases.iter())
        .flatten()
        .fold(0.0f64, |m, &g| m.max(g.abs()));
    let h = 1e-4;
    let loss = |p: &MlpParams| {
        let f = mlp::forward(p, &x, 6);
        mlp::cross_entropy(&f.probs, &y, 3)
    };
    for idx in 0..params.arch.depth_count() {
        for slot in 0..params.weights[idx].len() {
            let mut plus = params.clone();
            plus.weights[idx][slot] += h;
            let mut minus = params.clone();
            minus.weights[idx][slot] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (fd - grads.weights[idx][slot]).abs() <= 1e-4 * gmax.max(1e-8),
                "full-mode weight[{idx}][{slot}]"
            );
        }
        for slot in 0..params.biases[idx].len() {
            let mut plus = params.clone();
            plus.biases[idx][slot] += h;
            let mut minus = params.clone();
            minus.biases[idx][slot] -= h;
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            assert!(
                (fd - grads.biases[idx][slot]).abs() <= 1e-4 * gmax.max(1e-8),
                "full-mode bias[{idx}][{slot}]"
            );
        }
    }
}

/// Low-rank gradients: one SGD step from b = 0 must move the b factors by
/// −lr·dL/db, with dL/db checked against central finite differences of the
/// loss through the effective weights W + scale·b·a. The check runs on a
/// random toy model: finite differences only measure the gradient where the
/// ReLU pre-activations stay clear of their kinks, which a freshly random
/// network guarantees and a pre-trained one does not.
fn gradcheck_lowrank() {
    let arch = MlpArch {
        input_dim: 6,
        hidden_layers: 2,
        hidden_width: 8,
        n_classes: 3,
    };
    let mut rng = SplitMix64::new(0x17);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for idx in 0..arch.depth_count() {
        let (out, inp) = arch.layer_dims(idx);
        weights.push((0..out * inp).map(|_| 0.5 * rng.gaussian()).collect());
        biases.push((0..out).map(|_| 0.1 * rng.gaussian()).collect());
    }
    let base = MlpParams {
        arch,
        weights,
        biases,
    }
    .to_checkpoint(CheckpointKind::Base, "toy")
    .unwrap();
    let n = 16usize;
    let inputs = gaussian(0x23, &[n, 6]);
    let labels: Vec<usize> = (0..n).map(|_| rng.below(3)).collect();
    let dataset = consolidate::testbed::Dataset {
        inputs: inputs.clone(),
        labels: labels.clone(),
        task_id: 0,
    };

    let rank = 2usize;
    let lr = 1e-3;
    let opts = TrainOptions {
        steps: 1,
        lr,
        batch: n, // full dataset: the one batch is the whole split
        mode: TrainMode::Lowrank { rank },
        seed: 0x29,
        ordered: false,
    };
    let expert = train(&base, &dataset, &opts).unwrap();

    // After one step a is untouched (b started at 0) and b ≈ −lr·dL/db.
    let scale = consolidate::taskvec::LORA_ALPHA / rank as f64;
    let params = MlpParams::from_checkpoint(&base).unwrap();
    let x: Vec<f64> = inputs.data().iter().map(|&v| v as f64).collect();
    let y = &labels;
    let loss_with_b = |idx: usize, b: &[f64], a: &Tensor| -> f64 {
        let mut p = params.clone();
        let (out, inp) = p.arch.layer_dims(idx);
        for o in 0..out {
            for r in 0..rank {
                let bv = b[o * rank + r];
                if bv == 0.0 {
                    continue;
                }
                for j in 0..inp {
                    p.weights[idx][o * inp + j] += scale * bv * a.at(r, j) as f64;
                }
            }
        }
        let f = mlp::forward(&p, &x, n);
        mlp::cross_entropy(&f.probs, y, p.arch.n_classes)
    };

    for idx in 0..arch.depth_count() {
        let prefix = arch.layer_prefix(idx);
        let a = expert.tensor(&format!("{prefix}.lora_a")).unwrap();
        let b = expert.tensor(&format!("{prefix}.lora_b")).unwrap();
        let (out, _) = arch.layer_dims(idx);
        let h = 1e-4;
        let zero_b = vec![0.0f64; out * rank];
        let analytic: Vec<f64> = b.data().iter().map(|&v| -(v as f64) / lr).collect();
        let gmax = analytic.iter().fold(0.0f64, |m, &g| m.max(g.abs()));
        for slot in 0..out * rank {
            let mut plus = zero_b.clone();
            plus[slot] = h;
            let mut minus = zero_b.clone();
            minus[slot] = -h;
            let fd = (loss_with_b(idx, &plus, a) - loss_with_b(idx, &minus, a)) / (2.0 * h);
            assert!(
                (fd - analytic[slot]).abs() <= 1e-4 * gmax.max(1e-6),
                "lowrank depth {idx} b[{slot}]: fd {fd} vs {}",
                analytic[slot]
            );
        }
    }
}

// ── Criterion 4: monotonicity contracts ────────────────────────────────────

#[test]
fn criterion_4_monotonicity() {
    criterion(4, "monotone optimizer traces", 30.0, || {
        // WUDI objective trace never increases.
        let mats = vec![
            gaussian(91, &[16, 16]),
            gaussian(92, &[16, 16]),
            gaussian(93, &[16, 16]),
        ];
        let (_, trace) = wudi_matrix(&mats, 16, 16, 300, 0.01).unwrap();
        for w in trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-15,
                "wudi trace rose: {} -> {}",
                w[0],
                w[1]
            );
        }
        assert!(*trace.last().unwrap() <= trace[0]);

        // AdaMerging on the seed-42 testbed: final mean entropy ≤ initial.
        let cfg = TaskSetConfig {
            seed: 42,
            similarity: 0.3,
            ..TaskSetConfig::default()
        };
        let (_, data) = gen_tasks(&cfg).unwrap();
        let arch = MlpArch::default();
        let sets: Vec<_> = data.iter().map(|t| t.train.clone()).collect();
        let base = init_base(42, &arch, &sets).unwrap();
        let experts: Vec<Checkpoint> = (0..3)
            .map(|t| {
                let opts = TrainOptions {
                    seed: consolidate::tensor::stream_seed(42, t as u64, "expert-full"),
                    ..TrainOptions::default()
                };
                train(&base, &data[t].train, &opts).unwrap()
            })
            .collect();
        let tvs: Vec<_> = experts
            .iter()
            .map(|e| compute_task_vector(&base, e).unwrap())
            .collect();
        let cal = pooled_calibration(&data, 42, 64).unwrap();
        assert_eq!(cal.n_samples(), 64);
        let outcome = adamerging_optimize(&base, &tvs, &cal, 200, 0.05, 0.3).unwrap();
        for w in outcome.trace.windows(2) {
            assert!(
                w[1] <= w[0] + 1e-15,
                "entropy trace rose: {} -> {}",
                w[0],
                w[1]
            );
        }
        let initial = outcome.trace[0];
        let fin = *outcome.trace.last().unwrap();
        assert!(fin <= initial, "final {fin} > initial {initial}");
        // λ stays in [0, 1].
        for lambdas in outcome.coefficients.as_ref().unwrap().values() {
            for &l in lambdas {
                assert!((0.0..=1.0).contains(&l));
            }
        }
        let frozen_final = 0.104678121565;
        assert!(
            (fin - frozen_final).abs() < 1e-9,
            "adamerging entropy drifted: {fin:.12}"
        );
    });
}

// ── Criterion 5: determinism ───────────────────────────────────────────────

#[test]
fn criterion_5_suite_determinism() {
    criterion(5, "suite determinism", 600.0, || {
        let recipes: Vec<MergeRecipe> = ALL_METHODS
            .into_iter()
            .map(|m| MergeRecipe::with_defaults(m, 42))
            .collect();
        let run = |threads: usize| {
            let mut cfg = SuiteConfig::new(42, 0.3, recipes.clone());
            cfg.threads = threads;
            let result = run_suite(&cfg).unwrap();
            let csv = suite_to_csv(&result.rows);
            let mut blobs = Vec::new();
            let dir = tempfile::tempdir().unwrap();
            for (label, mm) in &result.merged {
                let path = dir.path().join(format!("{label}.mrgf"));
                consolidate::checkpoint::write_checkpoint(&mm.checkpoint, &path).unwrap();
                blobs.push((label.clone(), std::fs::read(&path).unwrap()));
            }
            (csv, blobs)
        };
        let (csv1, blobs1) = run(1);
        let (csv2, blobs2) = run(1);
        assert_eq!(csv1, csv2, "sequential reruns diverged");
        assert_eq!(blobs1.len(), 20);
        for ((l1, b1), (l2, b2)) in blobs1.iter().zip(&blobs2) {
            assert_eq!(l1, l2);
            assert_eq!(b1, b2, "merged bytes differ for {l1}");
        }
        let (csv4, blobs4) = run(4);
        assert_eq!(csv1, csv4, "parallel output diverged from sequential");
        for ((l1, b1), (l4, b4)) in blobs1.iter().zip(&blobs4) {
            assert_eq!(l1, l4);
            assert_eq!(b1, b4, "parallel merged bytes differ for {l1}");
        }
        assert_eq!(csv1.lines().count(), 1 + 24);
    });
}

// ── Criterion 6: directional findings over five seeds ─────────────────────

#[test]
fn criterion_6_directional_findings() {
    criterion(6, "directional findings (5 seeds)", 600.0, || {
        let seeds = [0u64, 1, 2, 3, 4];
        let mut joint_mean = 0.0f64;
        let mut average_mean = 0.0f64;
        let mut tsv_full_mean = 0.0f64;
        let mut tsv_lowrank_mean = 0.0f64;
        let mut pair_retention = 0.0f64;
        let mut triple_retention = 0.0f64;

        for &seed in &seeds {
            // Shared run at similarity 0.3: joint, Average, TSV (full).
            let recipes = vec![
                MergeRecipe::with_defaults(Method::Average, seed),
                MergeRecipe::with_defaults(Method::Tsv, seed),
            ];
            let cfg = SuiteConfig::new(seed, 0.3, recipes.clone());
            let res = run_suite(&cfg).unwrap();
            let row = |name: &str| {
                res.rows
                    .iter()
                    .find(|r| r.model == name)
                    .unwrap_or_else(|| panic!("row {name}"))
                    .clone()
            };
            joint_mean += row("joint").mean_accuracy;
            average_mean += row("merge00.average").mean_accuracy;
            tsv_full_mean += row("merge01.tsv").mean_accuracy;

            // TSV over low-rank experts.
            let mut cfg = SuiteConfig::new(
                seed,
                0.3,
                vec![MergeRecipe::with_defaults(Method::Tsv, seed)],
            );
            cfg.lowrank = true;
            let res = run_suite(&cfg).unwrap();
            tsv_lowrank_mean += res
                .rows
                .iter()
                .find(|r| r.model == "merge00.tsv")
                .unwrap()
                .mean_accuracy;

            // Average on a high-similarity pair vs a similarity-0 triple.
            let mut cfg = SuiteConfig::new(
                seed,
                0.9,
                vec![MergeRecipe::with_defaults(Method::Average, seed)],
            );
            cfg.tasks.n_tasks = 2;
            let res = run_suite(&cfg).unwrap();
            let avg = res
                .rows
                .iter()
                .find(|r| r.model == "merge00.average")
                .unwrap();
            pair_retention += avg
                .retention
                .iter()
                .map(|r| r.expect("expert accuracy positive"))
                .sum::<f64>()
                / avg.retention.len() as f64;

            let cfg = SuiteConfig::new(
                seed,
                0.0,
                vec![MergeRecipe::with_defaults(Method::Average, seed)],
            );
            let res = run_suite(&cfg).unwrap();
            let avg = res
                .rows
                .iter()
                .find(|r| r.model == "merge00.average")
                .unwrap();
            triple_retention += avg
                .retention
                .iter()
                .map(|r| r.expect("expert accuracy positive"))
                .sum::<f64>()
                / avg.retention.len() as f64;
        }
        let n = seeds.len() as f64;
        joint_mean /= n;
        average_mean /= n;
        tsv_full_mean /= n;
        tsv_lowrank_mean /= n;
        pair_retention /= n;
        triple_retention /= n;

        // (a) Data mixing stays at or above simple averaging.
        assert!(
            joint_mean >= average_mean,
            "(a) joint {joint_mean:.4} < average {average_mean:.4}"
        );
        // (b) High-similarity pair retains ≥ 0.9; heterogeneous triple less.
        assert!(
            pair_retention >= 0.9,
            "(b) pair retention {pair_retention:.4}"
        );
        assert!(
            triple_retention < pair_retention,
            "(b) triple {triple_retention:.4} !< pair {pair_retention:.4}"
        );
        // (c) Subspace merging over low-rank experts does not beat full.
        assert!(
            tsv_lowrank_mean <= tsv_full_mean,
            "(c) lowrank tsv {tsv_lowrank_mean:.4} > full {tsv_full_mean:.4}"
        );

        let frozen: [f64; 6] = [
            0.947395833333, // joint mean accuracy
            0.860937500000, // average-merge mean accuracy
            0.820833333333, // tsv over full experts
            0.758072916667, // tsv over low-rank experts
            0.987300692604, // average retention, similarity-0.9 pair
            0.860654654597, // average retention, similarity-0 triple
        ];
        let got = [
            joint_mean,
            average_mean,
            tsv_full_mean,
            tsv_lowrank_mean,
            pair_retention,
            triple_retention,
        ];
        for (g, f) in got.iter().zip(frozen) {
            assert!(
                (g - f).abs() < 1e-9,
                "directional mean drifted: {g:.12} vs {f:.12}"
            );
        }
    });
}

// ── Criterion 7: norm-imbalance premise and normalization ─────────────────

#[test]
fn criterion_7_norm_profile_and_normalization() {
    criterion(7, "profile and normalization", 60.0, || {
        let cfg = TaskSetConfig {
            seed: 7,
            similarity: 0.3,
            train_per_task: 128,
            cal_per_task: 16,
            eval_per_task: 64,
            ..TaskSetConfig::default()
        };
        let (_, data) = gen_tasks(&cfg).unwrap();
        let arch = MlpArch::default();
        let sets: Vec<_> = data.iter().map(|t| t.train.clone()).collect();
        let base = init_base(7, &arch, &sets).unwrap();
        let slow = train(
            &base,
            &data[0].train,
            &TrainOptions {
                steps: 120,
                lr: 0.05,
                seed: 13,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let fast = train(
            &base,
            &data[0].train,
            &TrainOptions {
                steps: 120,
                lr: 0.1,
                seed: 13,
                ..TrainOptions::default()
            },
        )
        .unwrap();
        let tv_slow = compute_task_vector(&base, &slow).unwrap();
        let tv_fast = compute_task_vector(&base, &fast).unwrap();
        assert!(
            tv_fast.model_norm() > tv_slow.model_norm(),
            "larger lr did not produce the larger update: {} vs {}",
            tv_fast.model_norm(),
            tv_slow.model_norm()
        );

        // The per-depth profile exists for every depth and carries mass.
        let rows = consolidate::taskvec::layer_norm_profile(&[tv_slow.clone(), tv_fast.clone()]);
        assert_eq!(rows.len(), 2 * arch.depth_count());
        assert!(rows.iter().all(|r| r.norm > 0.0));

        // After normalization the model-level norms agree within 1e-5.
        let normalized = normalize_task_vectors(&[tv_slow, tv_fast], NormLevel::Model).unwrap();
        let n0 = normalized[0].model_norm();
        let n1 = normalized[1].model_norm();
        assert!(
            (n0 - n1).abs() <= 1e-5 * n0.max(1.0),
            "norms disagree after normalization: {n0} vs {n1}"
        );
    });
}
