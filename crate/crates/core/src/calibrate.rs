//! Calibration-dependent merging: AdaMerging, RegMean++, CAT.
//!
//! These three methods consume a small unlabeled input sample. Activations
//! are captured by running the testbed network forward and recording every
//! linear layer's input matrix; RegMean++ additionally re-propagates each
//! expert's calibration inputs through the already-merged prefix so deeper
//! layers see the distribution they will actually receive.

use std::collections::BTreeMap;

use crate::checkpoint::{Checkpoint, CheckpointKind, Manifest};
use crate::error::{Error, Result};
use crate::merge::{MergeRecipe, MergedModel, Method};
use crate::mlp::{self, MlpParams};
use crate::taskvec::{compute_task_vector, normalize_task_vectors, NormLevel, TaskVector};
use crate::tensor::{solve_spd_f64, svd, Tensor};

/// Minimum calibration sample size.
pub const MIN_CALIBRATION: usize = 8;

/// Unlabeled inputs used to compute activation statistics or optimize
/// merging coefficients.
#[derive(Debug, Clone)]
pub struct CalibrationSet {
    pub inputs: Tensor,
    /// Carried for provenance only; none of the calibrated methods read
    /// labels.
    pub labels: Option<Vec<usize>>,
    pub source_tag: String,
    pub seed: u64,
}

impl CalibrationSet {
    pub fn new(inputs: Tensor, source_tag: &str, seed: u64) -> Result<CalibrationSet> {
        CalibrationSet::with_labels(inputs, None, source_tag, seed)
    }

    pub fn with_labels(
        inputs: Tensor,
        labels: Option<Vec<usize>>,
        source_tag: &str,
        seed: u64,
    ) -> Result<CalibrationSet> {
        inputs.require_matrix()?;
        if let Some(l) = &labels {
            if l.len() != inputs.shape()[0] {
                return Err(Error::validation(format!(
                    "{} labels for {} calibration rows",
                    l.len(),
                    inputs.shape()[0]
                )));
            }
        }
        if inputs.shape()[0] < MIN_CALIBRATION {
            return Err(Error::recipe(format!(
                "calibration set '{source_tag}' has {} samples; at least {MIN_CALIBRATION} required",
                inputs.shape()[0]
            )));
        }
        Ok(CalibrationSet {
            inputs,
            labels,
            source_tag: source_tag.to_string(),
            seed,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.inputs.shape()[0]
    }
}

/// Per-depth activation statistics of one model on one calibration set.
#[derive(Debug, Clone)]
pub struct LayerStats {
    /// XᵀX of the layer's input features (in×in, symmetric PSD).
    pub gram: Tensor,
    /// Top-r orthonormal principal input directions (in×r).
    pub basis: Tensor,
    pub count: usize,
}

#[derive(Debug, Clone)]
pub struct ActivationStats {
    /// Indexed by depth − 1.
    pub layers: Vec<LayerStats>,
}

/// Forward pass recording each linear layer's input matrix X_l, its Gram
/// matrix X_lᵀX_l, and the top-r right singular directions of X_l.
pub fn capture_activations(
    model: &Checkpoint,
    cal: &CalibrationSet,
    r: usize,
) -> Result<ActivationStats> {
    let params = MlpParams::from_checkpoint(model)?;
    if cal.inputs.shape()[1] != params.arch.input_dim {
        return Err(Error::shape(format!(
            "calibration inputs have dim {} but the model expects {}",
            cal.inputs.shape()[1],
            params.arch.input_dim
        )));
    }
    let n = cal.n_samples();
    let x: Vec<f64> = cal.inputs.data().iter().map(|&v| v as f64).collect();
    let fwd = mlp::forward(&params, &x, n);
    let mut layers = Vec::new();
    for idx in 0..params.arch.depth_count() {
        let (_, in_dim) = params.arch.layer_dims(idx);
        if r > in_dim {
            return Err(Error::rank(format!(
                "basis rank {r} exceeds the layer input dim {in_dim}"
            )));
        }
        let xl = &fwd.layer_inputs[idx];
        let gram = gram_of(xl, n, in_dim)?;
        let xt = Tensor::from_f64(vec![n, in_dim], xl)?;
        let dec = svd(&xt)?;
        let mut basis = vec![0.0f32; in_dim * r];
        for i in 0..in_dim {
            for j in 0..r {
                basis[i * r + j] = dec.v.at(i, j);
            }
        }
        layers.push(LayerStats {
            gram,
            basis: Tensor::new(vec![in_dim, r], basis)?,
            count: n,
        });
    }
    Ok(ActivationStats { layers })
}

fn gram_of(x: &[f64], n: usize, d: usize) -> Result<Tensor> {
    let mut g = vec![0.0f64; d * d];
    for s in 0..n {
        let row = &x[s * d..(s + 1) * d];
        for i in 0..d {
            let xi = row[i];
            if xi == 0.0 {
                continue;
            }
            for j in 0..d {
                g[i * d + j] += xi * row[j];
            }
        }
    }
    Tensor::from_f64(vec![d, d], &g)
}

/// Shannon entropy −∑ pᵢ ln pᵢ with 0·ln 0 = 0. The argument must be a
/// probability vector within 1e-6.
pub fn entropy(p: &[f64]) -> Result<f64> {
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::data(
            "entropy argument has negative or non-finite entries",
        ));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-6 {
        return Err(Error::data(format!(
            "entropy argument sums to {sum}, not 1"
        )));
    }
    Ok(p.iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum())
}

/// Result of one calibrated merge before assembly: merged deltas in f64,
/// optional coefficients per group label, warnings, and the optimizer's
/// objective trace when the method has one.
pub struct CalibratedOutcome {
    pub delta: BTreeMap<String, Vec<f64>>,
    pub coefficients: Option<BTreeMap<String, Vec<f64>>>,
    pub warnings: Vec<String>,
    pub trace: Vec<f64>,
}

// ── Recipe routing ─────────────────────────────────────────────────────────

/// Applies one of the calibration-dependent methods.
///
/// `cals` holds either one set (shared by every expert) or one per expert.
/// AdaMerging pools all provided sets into a single unlabeled sample.
pub fn apply_calibrated_recipe(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    experts: &[&Checkpoint],
    cals: &[CalibrationSet],
) -> Result<MergedModel> {
    if experts.is_empty() {
        return Err(Error::recipe("at least one expert is required"));
    }
    crate::checkpoint::validate_compatible(base, experts)?;
    let n = experts.len();
    let alpha = recipe.resolved_weights(n)?;
    let mut tvs: Vec<TaskVector> = experts
        .iter()
        .map(|e| compute_task_vector(base, e))
        .collect::<Result<_>>()?;
    if recipe.normalize {
        tvs = normalize_task_vectors(&tvs, NormLevel::Model)?;
    }

    let outcome = match recipe.method {
        Method::AdaMerging => {
            let pooled = pool_calibration(cals)?;
            adamerging_optimize(
                base,
                &tvs,
                &pooled,
                recipe.param("iters") as usize,
                recipe.param("step"),
                recipe.param("init"),
            )?
        }
        Method::RegMean => {
            let per_expert = spread_cals(cals, n)?;
            regmean_merge(base, &tvs, &per_expert, &alpha, recipe.param("rho"))?
        }
        Method::Cat => {
            let per_expert = spread_cals(cals, n)?;
            let r = recipe.param("r") as usize;
            let stats: Vec<ActivationStats> = experts
                .iter()
                .zip(&per_expert)
                .map(|(e, c)| capture_activations(e, c, r))
                .collect::<Result<_>>()?;
            cat_merge(base, &tvs, &stats, r, &alpha)?
        }
        other => {
            return Err(Error::recipe(format!(
                "method '{}' is not calibration-dependent",
                other.id()
            )))
        }
    };

    let echo = recipe.echo(n)?;
    let tensors = assemble(base, &outcome.delta, recipe.lambda)?;
    let manifest = Manifest {
        layer_count: base.manifest.layer_count,
        entries: base.manifest.dense_entries().cloned().collect(),
    };
    let checkpoint = Checkpoint {
        manifest,
        tensors,
        kind: CheckpointKind::Merged,
        source_tag: echo.clone(),
    };
    checkpoint.validate()?;
    Ok(MergedModel {
        checkpoint,
        recipe_echo: echo,
        per_tensor_coefficients: outcome.coefficients,
        warnings: outcome.warnings,
    })
}

fn pool_calibration(cals: &[CalibrationSet]) -> Result<CalibrationSet> {
    if cals.is_empty() {
        return Err(Error::recipe("a calibration set is required"));
    }
    if cals.len() == 1 {
        return Ok(cals[0].clone());
    }
    let d = cals[0].inputs.shape()[1];
    let mut rows = Vec::new();
    for c in cals {
        if c.inputs.shape()[1] != d {
            return Err(Error::shape("calibration sets disagree on input dim"));
        }
        rows.extend_from_slice(c.inputs.data());
    }
    let n = rows.len() / d;
    CalibrationSet::new(Tensor::new(vec![n, d], rows)?, "pooled", cals[0].seed)
}

fn spread_cals(cals: &[CalibrationSet], n: usize) -> Result<Vec<&CalibrationSet>> {
    match cals.len() {
        1 => Ok(vec![&cals[0]; n]),
        len if len == n => Ok(cals.iter().collect()),
        len => Err(Error::recipe(format!(
            "{len} calibration sets supplied for {n} experts; pass 1 or {n}"
        ))),
    }
}

/// base + λ·delta per tensor; exact-zero delta elements keep the base bits.
fn assemble(
    base: &Checkpoint,
    delta: &BTreeMap<String, Vec<f64>>,
    lambda: f64,
) -> Result<BTreeMap<String, Tensor>> {
    let mut out = BTreeMap::new();
    for e in base.manifest.dense_entries() {
        let b = base.tensor(&e.name)?;
        let d = delta
            .get(&e.name)
            .ok_or_else(|| Error::validation(format!("missing merged delta '{}'", e.name)))?;
        let data: Vec<f32> = b
            .data()
            .iter()
            .zip(d)
            .map(|(&bv, &dv)| {
                if dv == 0.0 {
                    bv
                } else {
                    (bv as f64 + lambda * dv) as f32
                }
            })
            .collect();
        out.insert(e.name.clone(), Tensor::new(e.shape.clone(), data)?);
    }
    Ok(out)
}

// ── AdaMerging ─────────────────────────────────────────────────────────────

/// Learns layer-wise coefficients λ_{i,l} in \[0, 1\] by minimizing the mean
/// output entropy on the calibration inputs with clamped gradient descent;
/// a step that would raise the objective is rejected and the step size
/// halves, so the recorded trace never increases.
pub fn adamerging_optimize(
    base: &Checkpoint,
    tvs: &[TaskVector],
    cal: &CalibrationSet,
    iters: usize,
    step: f64,
    init: f64,
) -> Result<CalibratedOutcome> {
    let base_params = MlpParams::from_checkpoint(base)?;
    let arch = base_params.arch;
    let depth = arch.depth_count();
    let n = tvs.len();
    let x: Vec<f64> = cal.inputs.data().iter().map(|&v| v as f64).collect();
    let samples = cal.n_samples();

    let tv_params: Vec<MlpParams> = tvs
        .iter()
        .map(|tv| tv_as_params(&arch, tv))
        .collect::<Result<_>>()?;

    let assemble_params = |lambda: &[Vec<f64>]| -> MlpParams {
        let mut p = base_params.clone();
        for idx in 0..depth {
            for (i, tvp) in tv_params.iter().enumerate() {
                let c = lambda[i][idx];
                if c == 0.0 {
                    continue;
                }
                for (slot, &d) in p.weights[idx].iter_mut().zip(&tvp.weights[idx]) {
                    *slot += c * d;
                }
                for (slot, &d) in p.biases[idx].iter_mut().zip(&tvp.biases[idx]) {
                    *slot += c * d;
                }
            }
        }
        p
    };
    let objective = |lambda: &[Vec<f64>]| -> f64 {
        let p = assemble_params(lambda);
        let fwd = mlp::forward(&p, &x, samples);
        mlp::mean_entropy(&fwd.probs, samples, arch.n_classes)
    };

    let mut lambda = vec![vec![init; depth]; n];
    let mut j_cur = objective(&lambda);
    let mut trace = vec![j_cur];
    let mut step = step;
    let mut halvings = 0usize;
    for _ in 0..iters {
        let grads = lambda_gradient(&assemble_params(&lambda), &tv_params, &x, samples);
        let mut candidate = lambda.clone();
        for i in 0..n {
            for l in 0..depth {
                candidate[i][l] = (candidate[i][l] - step * grads[i][l]).clamp(0.0, 1.0);
            }
        }
        let j_new = objective(&candidate);
        if j_new > j_cur {
            halvings += 1;
            if halvings > 10 {
                break;
            }
            step *= 0.5;
            trace.push(j_cur);
        } else {
            lambda = candidate;
            j_cur = j_new;
            trace.push(j_cur);
        }
    }

    // Merged delta per tensor at layer granularity.
    let mut delta: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for e in tvs[0].manifest.entries.iter() {
        let mut acc = vec![0.0f64; e.shape.iter().product()];
        for (i, tv) in tvs.iter().enumerate() {
            let c = lambda[i][e.depth - 1];
            if c == 0.0 {
                continue;
            }
            for (slot, &v) in acc.iter_mut().zip(tv.delta(&e.name)?.data()) {
                *slot += c * v as f64;
            }
        }
        delta.insert(e.name.clone(), acc);
    }
    let mut coefficients = BTreeMap::new();
    for l in 0..depth {
        coefficients.insert(
            format!("depth.{}", l + 1),
            (0..n).map(|i| lambda[i][l]).collect::<Vec<f64>>(),
        );
    }
    Ok(CalibratedOutcome {
        delta,
        coefficients: Some(coefficients),
        warnings: Vec::new(),
        trace,
    })
}

/// dMeanEntropy/dλ_{i,l} = ⟨dJ/dθ_l, T_{i,l}⟩ via one backward pass.
pub fn lambda_gradient(
    params: &MlpParams,
    tv_params: &[MlpParams],
    x: &[f64],
    samples: usize,
) -> Vec<Vec<f64>> {
    let arch = params.arch;
    let fwd = mlp::forward(params, x, samples);
    let lg = mlp::entropy_logit_grad(&fwd.probs, samples, arch.n_classes);
    let pg = mlp::backward(params, &fwd, &lg);
    tv_params
        .iter()
        .map(|tvp| {
            (0..arch.depth_count())
                .map(|idx| {
                    let mut acc = 0.0f64;
                    for (g, d) in pg.weights[idx].iter().zip(&tvp.weights[idx]) {
                        acc += g * d;
                    }
                    for (g, d) in pg.biases[idx].iter().zip(&tvp.biases[idx]) {
                        acc += g * d;
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn tv_as_params(arch: &crate::mlp::MlpArch, tv: &TaskVector) -> Result<MlpParams> {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for idx in 0..arch.depth_count() {
        let w = tv.delta(&arch.weight_name(idx))?;
        let b = tv.delta(&arch.bias_name(idx))?;
        weights.push(w.data().iter().map(|&v| v as f64).collect());
        biases.push(b.data().iter().map(|&v| v as f64).collect());
    }
    Ok(MlpParams {
        arch: *arch,
        weights,
        biases,
    })
}

// ── RegMean++ ──────────────────────────────────────────────────────────────

/// Closed-form regression merging, depth by depth. For depth l, each
/// expert's calibration inputs are propagated through the already-merged
/// layers 1..l−1; the solved weight minimizes the summed feature-space
/// discrepancy with Gram matrices regularized toward their diagonal by ρ.
/// Biases combine with the expert weights α. Singular systems fall back to
/// linear averaging for that layer with a recorded warning.
///
/// The solve runs in delta space: W = W_base + (∑Ĝᵢ)⁻¹∑Ĝᵢ(Wᵢ − W_base),
/// which is algebraically the published closed form and keeps the
/// zero-update identity exact.
pub fn regmean_merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    cals: &[&CalibrationSet],
    alpha: &[f64],
    rho: f64,
) -> Result<CalibratedOutcome> {
    let base_params = MlpParams::from_checkpoint(base)?;
    let arch = base_params.arch;
    let mut merged = base_params.clone();
    let mut delta: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut warnings = Vec::new();

    for idx in 0..arch.depth_count() {
        let (out_dim, in_dim) = arch.layer_dims(idx);
        let mut gram_sum = vec![0.0f64; in_dim * in_dim];
        let mut rhs = vec![0.0f64; in_dim * out_dim];
        for (i, cal) in cals.iter().enumerate() {
            let n = cal.n_samples();
            let x: Vec<f64> = cal.inputs.data().iter().map(|&v| v as f64).collect();
            let fwd = mlp::forward(&merged, &x, n);
            let xl = &fwd.layer_inputs[idx];
            let gram = gram_of(xl, n, in_dim)?;
            // Ĝ = D + ρ(G − D).
            let mut regularized = vec![0.0f64; in_dim * in_dim];
            for r in 0..in_dim {
                for c in 0..in_dim {
                    let g = gram.at(r, c) as f64;
                    regularized[r * in_dim + c] = if r == c { g } else { rho * g };
                }
            }
            let dw = tv_weight(&tvs[i], &arch, idx)?;
            for r in 0..in_dim {
                for c in 0..in_dim {
                    let g = regularized[r * in_dim + c];
                    if g == 0.0 {
                        continue;
                    }
                    for o in 0..out_dim {
                        rhs[r * out_dim + o] += g * dw[o * in_dim + c];
                    }
                }
            }
            for (acc, v) in gram_sum.iter_mut().zip(regularized) {
                *acc += v;
            }
        }

        let weight_name = arch.weight_name(idx);
        let gram_t = Tensor::from_f64(vec![in_dim, in_dim], &gram_sum)?;
        let rhs_t = Tensor::from_f64(vec![in_dim, out_dim], &rhs)?;
        let dw_merged: Vec<f64> = match solve_spd_f64(&gram_t, &rhs_t, &weight_name) {
            Ok(x) => {
                // x is ΔWᵀ (in×out); transpose back to out×in.
                let mut dw = vec![0.0f64; out_dim * in_dim];
                for r in 0..in_dim {
                    for o in 0..out_dim {
                        dw[o * in_dim + r] = x[r * out_dim + o];
                    }
                }
                dw
            }
            Err(Error::Singular { tensor }) => {
                warnings.push(format!(
                    "regmean: singular system for '{tensor}'; fell back to linear averaging"
                ));
                let mut dw = vec![0.0f64; out_dim * in_dim];
                for (i, tv) in tvs.iter().enumerate() {
                    let d = tv_weight(tv, &arch, idx)?;
                    for (slot, &v) in dw.iter_mut().zip(&d) {
                        *slot += alpha[i] * v;
                    }
                }
                dw
            }
            Err(other) => return Err(other),
        };

        let bias_name = arch.bias_name(idx);
        let mut db = vec![0.0f64; out_dim];
        for (i, tv) in tvs.iter().enumerate() {
            for (slot, &v) in db.iter_mut().zip(tv.delta(&bias_name)?.data()) {
                *slot += alpha[i] * v as f64;
            }
        }

        for (slot, &d) in merged.weights[idx].iter_mut().zip(&dw_merged) {
            *slot += d;
        }
        for (slot, &d) in merged.biases[idx].iter_mut().zip(&db) {
            *slot += d;
        }
        delta.insert(weight_name, dw_merged);
        delta.insert(bias_name, db);
    }

    Ok(CalibratedOutcome {
        delta,
        coefficients: None,
        warnings,
        trace: Vec::new(),
    })
}

fn tv_weight(tv: &TaskVector, arch: &crate::mlp::MlpArch, idx: usize) -> Result<Vec<f64>> {
    Ok(tv
        .delta(&arch.weight_name(idx))?
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect())
}

// ── CAT merging ────────────────────────────────────────────────────────────

/// Projects each expert's weight updates off the other experts' principal
/// input directions: T̂_k = T_k − T_k·B_k·B_kᵀ where B_k holds the top-r
/// eigendirections of the pooled other-expert Gram matrices. Biases pass
/// through unprojected; merged = ∑ αᵢ T̂ᵢ. A single expert has no conflict
/// pool, so its updates pass through unchanged.
pub fn cat_merge(
    base: &Checkpoint,
    tvs: &[TaskVector],
    stats: &[ActivationStats],
    r: usize,
    alpha: &[f64],
) -> Result<CalibratedOutcome> {
    let base_params = MlpParams::from_checkpoint(base)?;
    let arch = base_params.arch;
    let n = tvs.len();
    let mut delta: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    for idx in 0..arch.depth_count() {
        let (out_dim, in_dim) = arch.layer_dims(idx);
        if r >= in_dim {
            return Err(Error::rank(format!(
                "removal basis rank {r} must be below the layer input dim {in_dim}"
            )));
        }
        let weight_name = arch.weight_name(idx);
        let bias_name = arch.bias_name(idx);
        let mut w_acc = vec![0.0f64; out_dim * in_dim];
        let mut b_acc = vec![0.0f64; out_dim];
        for (k, tv) in tvs.iter().enumerate() {
            let t = tv.delta(&weight_name)?;
            let projected = if n == 1 {
                t.data().iter().map(|&v| v as f64).collect::<Vec<f64>>()
            } else {
                let mut pooled = vec![0.0f64; in_dim * in_dim];
                for (j, st) in stats.iter().enumerate() {
                    if j == k {
                        continue;
                    }
                    for (acc, &v) in pooled.iter_mut().zip(st.layers[idx].gram.data()) {
                        *acc += v as f64;
                    }
                }
                let dec = svd(&Tensor::from_f64(vec![in_dim, in_dim], &pooled)?)?;
                project_off(t.data(), out_dim, in_dim, &dec.u, r)
            };
            for (slot, v) in w_acc.iter_mut().zip(projected) {
                *slot += alpha[k] * v;
            }
            for (slot, &v) in b_acc.iter_mut().zip(tv.delta(&bias_name)?.data()) {
                *slot += alpha[k] * v as f64;
            }
        }
        delta.insert(weight_name, w_acc);
        delta.insert(bias_name, b_acc);
    }
    Ok(CalibratedOutcome {
        delta,
        coefficients: None,
        warnings: Vec::new(),
        trace: Vec::new(),
    })
}

/// T − T·B·Bᵀ where B spans the first r columns of `basis_cols`.
///
/// The basis is re-orthonormalized in f64 (modified Gram-Schmidt) so the
/// annihilation identity T̂·B = 0 holds to full working precision instead of
/// the f32 storage precision of the stored columns; the spanned subspace is
/// unchanged.
pub fn project_off(
    t: &[f32],
    out_dim: usize,
    in_dim: usize,
    basis_cols: &Tensor,
    r: usize,
) -> Vec<f64> {
    let mut basis: Vec<Vec<f64>> = (0..r)
        .map(|c| (0..in_dim).map(|j| basis_cols.at(j, c) as f64).collect())
        .collect();
    for c in 0..r {
        for prev in 0..c {
            let dot: f64 = basis[c].iter().zip(&basis[prev]).map(|(a, b)| a * b).sum();
            for j in 0..in_dim {
                basis[c][j] -= dot * basis[prev][j];
            }
        }
        let norm: f64 = basis[c].iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            for v in basis[c].iter_mut() {
                *v /= norm;
            }
        }
    }

    let mut out: Vec<f64> = t.iter().map(|&v| v as f64).collect();
    for col in &basis {
        for o in 0..out_dim {
            let row = &mut out[o * in_dim..(o + 1) * in_dim];
            let coeff: f64 = row.iter().zip(col).map(|(a, b)| a * b).sum();
            if coeff == 0.0 {
                continue;
            }
            for (slot, b) in row.iter_mut().zip(col) {
                *slot -= coeff * b;
            }
        }
    }
    out
}
