//! Task vectors: per-tensor deltas T = θ_expert − θ_base.
//!
//! Includes the two diagnostics the merging study leans on: per-depth update
//! norms (which expose norm imbalance across experts) and principal angles
//! between update subspaces (which expose how much two experts' weight
//! updates overlap).

use std::collections::BTreeMap;

use crate::checkpoint::{validate_compatible, Checkpoint, Manifest, Role};
use crate::error::{Error, Result};
use crate::tensor::{matmul, norm_of_slice, numerical_rank, svd, Tensor};

/// Scale applied when materializing a low-rank delta: scale = LORA_ALPHA / r.
/// The factors themselves are stored unscaled so their geometry survives.
pub const LORA_ALPHA: f64 = 2.0;

/// Per-tensor parameter deltas of one expert against the shared base.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskVector {
    pub manifest: Manifest,
    pub deltas: BTreeMap<String, Tensor>,
    pub expert_tag: String,
}

impl TaskVector {
    pub fn delta(&self, name: &str) -> Result<&Tensor> {
        self.deltas
            .get(name)
            .ok_or_else(|| Error::validation(format!("missing delta '{name}'")))
    }

    /// Norm over all deltas concatenated (model level), in 64-bit.
    pub fn model_norm(&self) -> f64 {
        self.deltas
            .values()
            .map(|t| {
                let n = norm_of_slice(t.data());
                n * n
            })
            .sum::<f64>()
            .sqrt()
    }

    /// All-zero task vector on the given dense manifest.
    pub fn zeros(manifest: &Manifest, expert_tag: &str) -> TaskVector {
        let manifest = dense_manifest(manifest);
        let deltas = manifest
            .entries
            .iter()
            .map(|e| (e.name.clone(), Tensor::zeros(e.shape.clone())))
            .collect();
        TaskVector {
            manifest,
            deltas,
            expert_tag: expert_tag.to_string(),
        }
    }

    pub fn scale_in_place(&mut self, factor: f64) {
        for t in self.deltas.values_mut() {
            for v in t.data_mut() {
                *v = (*v as f64 * factor) as f32;
            }
        }
    }
}

fn dense_manifest(m: &Manifest) -> Manifest {
    Manifest {
        layer_count: m.layer_count,
        entries: m.dense_entries().cloned().collect(),
    }
}

/// Elementwise expert − base per dense tensor. For experts carrying low-rank
/// factor pairs, the factor product (scaled by LORA_ALPHA / r) is added into
/// the parent weight's delta.
pub fn compute_task_vector(base: &Checkpoint, expert: &Checkpoint) -> Result<TaskVector> {
    validate_compatible(base, &[expert])?;
    let manifest = dense_manifest(&base.manifest);
    let mut deltas = BTreeMap::new();
    for e in &manifest.entries {
        let b = base.tensor(&e.name)?;
        let x = expert.tensor(&e.name)?;
        let data: Vec<f32> = x
            .data()
            .iter()
            .zip(b.data())
            .map(|(xe, be)| xe - be)
            .collect();
        deltas.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }

    // Fold low-rank factors into their parent weight deltas.
    for e in &expert.manifest.entries {
        if e.role != Role::LowrankA {
            continue;
        }
        let prefix = e.name.strip_suffix(".lora_a").ok_or_else(|| {
            Error::validation(format!(
                "lowrank_a tensor '{}' must be named '<parent>.lora_a'",
                e.name
            ))
        })?;
        let b_name = format!("{prefix}.lora_b");
        let parent = format!("{prefix}.weight");
        let a = expert.tensor(&e.name)?;
        let bf = expert.tensor(&b_name)?;
        let w = deltas
            .get(&parent)
            .ok_or_else(|| {
                Error::validation(format!("no parent weight '{parent}' for '{}'", e.name))
            })?
            .clone();
        let r = a.rows()?;
        if bf.cols()? != r || bf.rows()? != w.rows()? || a.cols()? != w.cols()? {
            return Err(Error::validation(format!(
                "factor shapes {:?}·{:?} do not match weight {:?} for '{prefix}'",
                bf.shape(),
                a.shape(),
                w.shape()
            )));
        }
        let scale = LORA_ALPHA / r as f64;
        let prod = matmul(bf, a)?;
        let data: Vec<f32> = w
            .data()
            .iter()
            .zip(prod.data())
            .map(|(dw, p)| (*dw as f64 + scale * *p as f64) as f32)
            .collect();
        deltas.insert(parent, Tensor::new(w.shape().to_vec(), data)?);
    }

    Ok(TaskVector {
        manifest,
        deltas,
        expert_tag: expert.source_tag.clone(),
    })
}

/// Adds a task vector back onto a base, producing the parameter map
/// `base + scale·delta`. Elements with an exactly-zero delta keep the base's
/// bits untouched.
pub fn apply_task_vector(
    base: &Checkpoint,
    tv: &TaskVector,
    scale: f64,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in tv.manifest.entries.iter() {
        let b = base.tensor(&e.name)?;
        let d = tv.delta(&e.name)?;
        let data: Vec<f32> = b
            .data()
            .iter()
            .zip(d.data())
            .map(|(&bv, &dv)| {
                if dv == 0.0 {
                    bv
                } else {
                    (bv as f64 + scale * dv as f64) as f32
                }
            })
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.to_vec(), data)?);
    }
    Ok(out)
}

/// Which unit the normalization statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormLevel {
    Model,
    Matrix,
}

/// Rescales each task vector so its norm (at the chosen level) matches the
/// median norm across experts. Zero norms participate in the median but a
/// zero-norm task vector itself is left untouched.
pub fn normalize_task_vectors(tvs: &[TaskVector], level: NormLevel) -> Result<Vec<TaskVector>> {
    if tvs.is_empty() {
        return Err(Error::validation(
            "normalize_task_vectors needs at least one task vector",
        ));
    }
    let mut out = tvs.to_vec();
    match level {
        NormLevel::Model => {
            let norms: Vec<f64> = tvs.iter().map(|tv| tv.model_norm()).collect();
            let target = median(&norms);
            for (tv, &n) in out.iter_mut().zip(&norms) {
                if n > 0.0 {
                    tv.scale_in_place(target / n);
                }
            }
        }
        NormLevel::Matrix => {
            let names: Vec<String> = tvs[0]
                .manifest
                .entries
                .iter()
                .map(|e| e.name.clone())
                .collect();
            for name in &names {
                let norms: Vec<f64> = tvs
                    .iter()
                    .map(|tv| tv.delta(name).map(|t| norm_of_slice(t.data())))
                    .collect::<Result<_>>()?;
                let target = median(&norms);
                for (tv, &n) in out.iter_mut().zip(&norms) {
                    if n > 0.0 {
                        let factor = target / n;
                        let t = tv.deltas.get_mut(name).unwrap();
                        for v in t.data_mut() {
                            *v = (*v as f64 * factor) as f32;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// One row of the per-depth norm profile.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRow {
    pub expert: String,
    pub depth: usize,
    pub norm: f64,
}

/// Per-depth update norms: for each expert and each depth, the norm of the
/// concatenation of every delta tensor at that depth (biases included).
/// Rows are ordered by expert tag, then depth.
pub fn layer_norm_profile(tvs: &[TaskVector]) -> Vec<ProfileRow> {
    let mut rows = Vec::new();
    for tv in tvs {
        for depth in 1..=tv.manifest.layer_count {
            let sq: f64 = tv
                .manifest
                .entries
                .iter()
                .filter(|e| e.depth == depth)
                .filter_map(|e| tv.deltas.get(&e.name))
                .map(|t| {
                    let n = norm_of_slice(t.data());
                    n * n
                })
                .sum();
            rows.push(ProfileRow {
                expert: tv.expert_tag.clone(),
                depth,
                norm: sq.sqrt(),
            });
        }
    }
    rows.sort_by(|a, b| a.expert.cmp(&b.expert).then(a.depth.cmp(&b.depth)));
    rows
}

/// CSV rendering of the profile: header `expert,depth,norm`, six significant
/// digits, LF line endings.
pub fn profile_to_csv(rows: &[ProfileRow]) -> String {
    let mut out = String::from("expert,depth,norm\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.5e}\n", r.expert, r.depth, r.norm));
    }
    out
}

/// Principal angles (radians, ascending) between the top-k right-singular
/// subspaces of two matrix deltas: the arccos of the singular values of
/// V₁ᵀV₂, clamped into [0, 1].
pub fn subspace_angles(t1: &Tensor, t2: &Tensor, k: usize) -> Result<Vec<f64>> {
    t1.require_matrix()?;
    t2.require_matrix()?;
    if t1.shape() != t2.shape() {
        return Err(Error::shape(format!(
            "subspace_angles needs equal shapes, got {:?} vs {:?}",
            t1.shape(),
            t2.shape()
        )));
    }
    let s1 = svd(t1)?;
    let s2 = svd(t2)?;
    for (label, s) in [("first", &s1), ("second", &s2)] {
        let rank = numerical_rank(s.s.data());
        if k > rank {
            return Err(Error::rank(format!(
                "k = {k} exceeds the numerical rank {rank} of the {label} delta"
            )));
        }
    }
    let v1k = leading_columns(&s1.v, k)?;
    let v2k = leading_columns(&s2.v, k)?;
    let m = crate::tensor::matmul_tn(&v1k, &v2k)?;
    let cos = svd(&m)?;
    Ok(cos
        .s
        .data()
        .iter()
        .map(|&c| (c as f64).clamp(0.0, 1.0).acos())
        .collect())
}

fn leading_columns(m: &Tensor, k: usize) -> Result<Tensor> {
    let (rows, cols) = (m.rows()?, m.cols()?);
    let mut data = vec![0.0f32; rows * k];
    for i in 0..rows {
        for j in 0..k.min(cols) {
            data[i * k + j] = m.at(i, j);
        }
    }
    Tensor::new(vec![rows, k], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::{Checkpoint, CheckpointKind, ManifestEntry};
    use crate::tensor::gaussian;
    use std::f64::consts::FRAC_PI_2;

    fn single_tensor_checkpoint(name: &str, data: Vec<f32>, depth_count: usize) -> Checkpoint {
        let manifest = Manifest {
            layer_count: depth_count,
            entries: vec![
                ManifestEntry {
                    name: name.into(),
                    shape: vec![1, data.len()],
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
        };
        let mut tensors = BTreeMap::new();
        let len = data.len();
        tensors.insert(name.to_string(), Tensor::new(vec![1, len], data).unwrap());
        tensors.insert("layers.1.bias".to_string(), Tensor::zeros(vec![1]));
        Checkpoint {
            manifest,
            tensors,
            kind: CheckpointKind::Base,
            source_tag: "t".into(),
        }
    }

    #[test]
    fn identical_models_give_zero_deltas() {
        let base = single_tensor_checkpoint("layers.1.weight", vec![1.0, 2.0], 1);
        let tv = compute_task_vector(&base, &base).unwrap();
        assert!(tv
            .deltas
            .values()
            .all(|t| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn zero_base_gives_expert_parameters() {
        let base = single_tensor_checkpoint("layers.1.weight", vec![0.0, 0.0], 1);
        let mut expert = base.clone();
        expert.tensors.insert(
            "layers.1.weight".into(),
            Tensor::new(vec![1, 2], vec![0.5, -0.25]).unwrap(),
        );
        let tv = compute_task_vector(&base, &expert).unwrap();
        assert_eq!(tv.delta("layers.1.weight").unwrap().data(), &[0.5, -0.25]);
    }

    #[test]
    fn hand_subtraction_example() {
        let base = single_tensor_checkpoint("layers.1.weight", vec![1.0, 2.0], 1);
        let mut expert = base.clone();
        expert.tensors.insert(
            "layers.1.weight".into(),
            Tensor::new(vec![1, 2], vec![3.0, 1.0]).unwrap(),
        );
        let tv = compute_task_vector(&base, &expert).unwrap();
        assert_eq!(tv.delta("layers.1.weight").unwrap().data(), &[2.0, -1.0]);
    }

    #[test]
    fn lowrank_factors_materialize_into_the_weight_delta() {
        let base = single_tensor_checkpoint("layers.1.weight", vec![1.0, 1.0], 1);
        let mut expert = base.clone();
        // r = 1 factors: b = [[2]], a = [[3, 4]]; scale = LORA_ALPHA / 1 = 2.
        expert.manifest.entries.push(ManifestEntry {
            name: "layers.1.lora_a".into(),
            shape: vec![1, 2],
            role: Role::LowrankA,
            depth: 1,
        });
        expert.manifest.entries.push(ManifestEntry {
            name: "layers.1.lora_b".into(),
            shape: vec![1, 1],
            role: Role::LowrankB,
            depth: 1,
        });
        expert.tensors.insert(
            "layers.1.lora_a".into(),
            Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap(),
        );
        expert.tensors.insert(
            "layers.1.lora_b".into(),
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
        );
        let tv = compute_task_vector(&base, &expert).unwrap();
        assert_eq!(tv.delta("layers.1.weight").unwrap().data(), &[12.0, 16.0]);
        assert!(!tv.deltas.contains_key("layers.1.lora_a"));
    }

    fn tv_with_norm(tag: &str, value: f32) -> TaskVector {
        let manifest = Manifest {
            layer_count: 1,
            entries: vec![
                ManifestEntry {
                    name: "layers.1.weight".into(),
                    shape: vec![1, 1],
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
        };
        let mut deltas = BTreeMap::new();
        deltas.insert(
            "layers.1.weight".into(),
            Tensor::new(vec![1, 1], vec![value]).unwrap(),
        );
        deltas.insert("layers.1.bias".into(), Tensor::zeros(vec![1]));
        TaskVector {
            manifest,
            deltas,
            expert_tag: tag.into(),
        }
    }

    #[test]
    fn equal_norms_stay_unchanged() {
        let tvs = vec![tv_with_norm("a", 2.0), tv_with_norm("b", -2.0)];
        let out = normalize_task_vectors(&tvs, NormLevel::Model).unwrap();
        assert_eq!(out, tvs);
    }

    #[test]
    fn model_level_norms_scale_to_the_median() {
        let tvs = vec![
            tv_with_norm("a", 1.0),
            tv_with_norm("b", 2.0),
            tv_with_norm("c", 4.0),
        ];
        let out = normalize_task_vectors(&tvs, NormLevel::Model).unwrap();
        let norms: Vec<f64> = out.iter().map(|tv| tv.model_norm()).collect();
        for n in norms {
            assert!((n - 2.0).abs() < 1e-6, "norm {n}");
        }
        // Scales were (2, 1, 0.5).
        assert_eq!(out[0].delta("layers.1.weight").unwrap().data(), &[2.0]);
        assert_eq!(out[2].delta("layers.1.weight").unwrap().data(), &[2.0]);
    }

    #[test]
    fn zero_norm_vector_participates_in_median_but_stays_untouched() {
        let tvs = vec![
            tv_with_norm("a", 0.0),
            tv_with_norm("b", 1.0),
            tv_with_norm("c", 2.0),
        ];
        let out = normalize_task_vectors(&tvs, NormLevel::Model).unwrap();
        // Median over (0, 1, 2) is 1.
        assert_eq!(out[0].delta("layers.1.weight").unwrap().data(), &[0.0]);
        assert_eq!(out[1].delta("layers.1.weight").unwrap().data(), &[1.0]);
        assert_eq!(out[2].delta("layers.1.weight").unwrap().data(), &[1.0]);
    }

    #[test]
    fn normalize_is_idempotent() {
        let tvs = vec![
            tv_with_norm("a", 0.7),
            tv_with_norm("b", 3.0),
            tv_with_norm("c", 11.0),
        ];
        let once = normalize_task_vectors(&tvs, NormLevel::Model).unwrap();
        let twice = normalize_task_vectors(&once, NormLevel::Model).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            let na = a.model_norm();
            let nb = b.model_norm();
            assert!((na - nb).abs() <= 1e-6 * na.max(1.0));
        }
    }

    #[test]
    fn profile_zero_and_pythagorean_cases() {
        let zero = tv_with_norm("z", 0.0);
        let rows = layer_norm_profile(&[zero]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].norm, 0.0);

        let mut tv = tv_with_norm("p", 0.0);
        tv.deltas.insert(
            "layers.1.weight".into(),
            Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
        );
        tv.deltas.insert(
            "layers.1.bias".into(),
            Tensor::new(vec![1], vec![4.0]).unwrap(),
        );
        let rows = layer_norm_profile(&[tv]);
        assert!((rows[0].norm - 5.0).abs() < 1e-9);
    }

    #[test]
    fn profile_orders_rows_and_serializes() {
        let a = tv_with_norm("a", 1.0);
        let b = tv_with_norm("b", 2.0);
        let rows = layer_norm_profile(&[b, a]);
        assert_eq!(rows[0].expert, "a");
        assert!((rows[0].norm - 1.0).abs() < 1e-9);
        assert!((rows[1].norm - 2.0).abs() < 1e-9);
        let csv = profile_to_csv(&rows);
        assert!(csv.starts_with("expert,depth,norm\n"));
        assert!(csv.ends_with('\n'));
        assert!(!csv.contains('\r'));
    }

    #[test]
    fn identical_subspaces_have_zero_angle() {
        let t = gaussian(3, &[4, 4]);
        let angles = subspace_angles(&t, &t, 1).unwrap();
        assert!(angles[0].abs() < 1e-6);
    }

    #[test]
    fn orthogonal_row_spaces_meet_at_right_angle() {
        // Row spaces span(e1) vs span(e2).
        let t1 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let t2 = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let angles = subspace_angles(&t1, &t2, 1).unwrap();
        assert!((angles[0] - FRAC_PI_2).abs() < 1e-6);
    }

    #[test]
    fn angles_are_symmetric() {
        let t1 = gaussian(10, &[8, 8]);
        let t2 = gaussian(11, &[8, 8]);
        let a = subspace_angles(&t1, &t2, 3).unwrap();
        let b = subspace_angles(&t2, &t1, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn rank_errors_when_k_exceeds_numerical_rank() {
        // Rank-1 matrix cannot support k = 2.
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        assert!(matches!(
            subspace_angles(&t, &t, 2),
            Err(Error::Rank { .. })
        ));
    }

    #[test]
    fn random_lowrank_deltas_are_nearly_orthogonal() {
        // Mean principal angle between independent rank-2 16×16 deltas,
        // 50 seed pairs, k = 2. The mean is deterministic; its value is
        // frozen below as a regression alongside the directional bound.
        let mut total = 0.0f64;
        let mut count = 0usize;
        for pair in 0..50u64 {
            let d1 = rank2_delta(1000 + 2 * pair);
            let d2 = rank2_delta(1001 + 2 * pair);
            for angle in subspace_angles(&d1, &d2, 2).unwrap() {
                total += angle;
                count += 1;
            }
        }
        let mean = total / count as f64;
        assert!(mean >= 1.2, "mean angle {mean}");
        let frozen = 1.278_063_517_087_222;
        assert!((mean - frozen).abs() < 1e-9, "mean angle drifted: {mean}");
    }

    fn rank2_delta(seed: u64) -> Tensor {
        let b = gaussian(seed.wrapping_mul(31), &[16, 2]);
        let a = gaussian(seed.wrapping_mul(31).wrapping_add(7), &[2, 16]);
        matmul(&b, &a).unwrap()
    }
}
