//! Merging operators and the recipe machinery that drives them.
//!
//! A recipe names one of twenty methods, a granularity, expert weights, a
//! global scale, and method parameters. The dispatcher splits tensors into
//! granularity groups (whole model, per depth, or per matrix), hands each
//! group to the operator, and reassembles the merged checkpoint as
//! `θ_base + λ·delta` — except Average and SLERP, which interpolate raw
//! parameters directly.
//!
//! Every stochastic mask draws from a stream keyed by (expert, tensor), so
//! adding an expert never perturbs another's mask and identical recipes
//! reproduce identical bytes.

pub mod basic;
pub mod sign;
pub mod sparsify;
pub mod subspace;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::calibrate::{self, CalibrationSet};
use crate::checkpoint::{validate_compatible, Checkpoint, CheckpointKind, Manifest};
use crate::error::{Error, Result};
use crate::taskvec::{compute_task_vector, normalize_task_vectors, NormLevel, TaskVector};
use crate::tensor::Tensor;

// ── Methods ────────────────────────────────────────────────────────────────

/// The twenty merging methods, in catalog order: basic interpolation,
/// then interference-resolving transforms, then the calibrated family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Average,
    Slerp,
    MetaGpt,
    Lines,
    Dare,
    Breadcrumbs,
    Ties,
    ConsensusTa,
    Tsv,
    IsoCts,
    Impart,
    TaDrop,
    Cabs,
    Pcb,
    Della,
    Sce,
    Wudi,
    AdaMerging,
    RegMean,
    Cat,
}

pub const ALL_METHODS: [Method; 20] = [
    Method::Average,
    Method::Slerp,
    Method::MetaGpt,
    Method::Lines,
    Method::Dare,
    Method::Breadcrumbs,
    Method::Ties,
    Method::ConsensusTa,
    Method::Tsv,
    Method::IsoCts,
    Method::Impart,
    Method::TaDrop,
    Method::Cabs,
    Method::Pcb,
    Method::Della,
    Method::Sce,
    Method::Wudi,
    Method::AdaMerging,
    Method::RegMean,
    Method::Cat,
];

impl Method {
    pub fn id(self) -> &'static str {
        match self {
            Method::Average => "average",
            Method::Slerp => "slerp",
            Method::MetaGpt => "metagpt",
            Method::Lines => "lines",
            Method::Dare => "dare",
            Method::Breadcrumbs => "breadcrumbs",
            Method::Ties => "ties",
            Method::ConsensusTa => "consensus_ta",
            Method::Tsv => "tsv",
            Method::IsoCts => "iso_cts",
            Method::Impart => "impart",
            Method::TaDrop => "tadrop",
            Method::Cabs => "cabs",
            Method::Pcb => "pcb",
            Method::Della => "della",
            Method::Sce => "sce",
            Method::Wudi => "wudi",
            Method::AdaMerging => "adamerging",
            Method::RegMean => "regmean",
            Method::Cat => "cat",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        ALL_METHODS
            .into_iter()
            .find(|m| m.id() == s)
            .ok_or_else(|| Error::recipe(format!("unknown method '{s}'")))
    }

    /// The granularity each method natively operates at.
    pub fn default_granularity(self) -> Granularity {
        match self {
            Method::Average | Method::Slerp | Method::MetaGpt => Granularity::Model,
            Method::Dare | Method::Breadcrumbs => Granularity::Model,
            Method::Lines | Method::AdaMerging => Granularity::Layer,
            _ => Granularity::Matrix,
        }
    }

    /// Methods whose consensus statistic needs calibration inputs.
    pub fn needs_calibration(self) -> bool {
        matches!(self, Method::AdaMerging | Method::RegMean | Method::Cat)
    }

    /// Average and SLERP interpolate raw parameters; everything else
    /// transforms task vectors.
    pub fn interpolates_raw(self) -> bool {
        matches!(self, Method::Average | Method::Slerp)
    }

    /// (key, default) pairs of the method's tunable parameters.
    pub fn param_spec(self) -> &'static [(&'static str, f64)] {
        match self {
            Method::Average | Method::MetaGpt => &[],
            Method::Slerp => &[("t", 0.5)],
            Method::Lines => &[("alpha0", 0.5), ("beta0", 0.5)],
            Method::Dare => &[("p", 0.9)],
            Method::Breadcrumbs => &[("beta", 0.85), ("gamma", 0.99)],
            Method::Ties => &[("k", 0.2)],
            Method::ConsensusTa => &[("lambda_mask", 0.4), ("min_support", 2.0)],
            Method::Tsv => &[("rank_per_task", 0.0)],
            Method::IsoCts => &[("k", 0.0)],
            Method::Impart => &[("tau", 0.9)],
            Method::TaDrop => &[("rho", 0.9)],
            Method::Cabs => &[("n", 1.0), ("m", 4.0)],
            Method::Pcb => &[("keep_ratio", 0.2)],
            Method::Della => &[("p_min", 0.2), ("p_max", 0.8)],
            Method::Sce => &[("p", 0.1)],
            Method::Wudi => &[("iters", 300.0), ("step", 0.01)],
            Method::AdaMerging => &[("iters", 200.0), ("step", 0.05), ("init", 0.3)],
            Method::RegMean => &[("rho", 0.9)],
            Method::Cat => &[("r", 2.0)],
        }
    }
}

/// The unit a merging statistic is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Model,
    Layer,
    Matrix,
}

impl Granularity {
    pub fn id(self) -> &'static str {
        match self {
            Granularity::Model => "model",
            Granularity::Layer => "layer",
            Granularity::Matrix => "matrix",
        }
    }

    pub fn parse(s: &str) -> Result<Granularity> {
        match s {
            "model" => Ok(Granularity::Model),
            "layer" => Ok(Granularity::Layer),
            "matrix" => Ok(Granularity::Matrix),
            _ => Err(Error::recipe(format!("unknown granularity '{s}'"))),
        }
    }
}

// ── Recipes ────────────────────────────────────────────────────────────────

/// Recipe file schema. Unknown fields are rejected.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecipeFile {
    pub method: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granularity: Option<String>,
    pub base: String,
    pub experts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalize: Option<bool>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub calibration: Option<Vec<String>>,
}

impl RecipeFile {
    pub fn from_json(text: &str) -> Result<RecipeFile> {
        serde_json::from_str(text).map_err(|e| Error::recipe(format!("invalid recipe JSON: {e}")))
    }

    pub fn load(path: &Path) -> Result<RecipeFile> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), &e))?;
        RecipeFile::from_json(&text)
    }

    /// Resolves method, granularity, and parameter defaults.
    pub fn to_recipe(&self) -> Result<MergeRecipe> {
        let method = Method::parse(&self.method)?;
        let granularity = match &self.granularity {
            Some(g) => Granularity::parse(g)?,
            None => method.default_granularity(),
        };
        MergeRecipe::new(
            method,
            granularity,
            self.weights.clone(),
            self.lambda.unwrap_or(1.0),
            self.params.clone().unwrap_or_default(),
            self.normalize.unwrap_or(false),
            self.seed,
        )
    }
}

/// A fully resolved merge description: every default is materialized so the
/// echoed form reproduces the run exactly.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MergeRecipe {
    pub method_id: String,
    pub granularity_id: String,
    /// None means uniform 1/n once the expert count is known.
    pub weights: Option<Vec<f64>>,
    pub lambda: f64,
    pub params: BTreeMap<String, f64>,
    pub normalize: bool,
    pub seed: u64,
    #[serde(skip)]
    pub method: Method,
    #[serde(skip)]
    pub granularity: Granularity,
}

impl MergeRecipe {
    pub fn new(
        method: Method,
        granularity: Granularity,
        weights: Option<Vec<f64>>,
        lambda: f64,
        params: BTreeMap<String, f64>,
        normalize: bool,
        seed: u64,
    ) -> Result<MergeRecipe> {
        let spec = method.param_spec();
        for key in params.keys() {
            if !spec.iter().any(|(k, _)| k == key) {
                return Err(Error::recipe(format!(
                    "method '{}' does not accept parameter '{key}'",
                    method.id()
                )));
            }
        }
        let mut resolved = BTreeMap::new();
        for (key, default) in spec {
            resolved.insert((*key).to_string(), *params.get(*key).unwrap_or(default));
        }
        if !lambda.is_finite() {
            return Err(Error::recipe("lambda must be finite"));
        }
        if normalize && method.interpolates_raw() {
            return Err(Error::recipe(format!(
                "normalize applies to task vectors; '{}' interpolates raw parameters",
                method.id()
            )));
        }
        let recipe = MergeRecipe {
            method_id: method.id().to_string(),
            granularity_id: granularity.id().to_string(),
            weights,
            lambda,
            params: resolved,
            normalize,
            seed,
            method,
            granularity,
        };
        recipe.validate_params()?;
        Ok(recipe)
    }

    /// Convenience constructor with all defaults.
    pub fn with_defaults(method: Method, seed: u64) -> MergeRecipe {
        MergeRecipe::new(
            method,
            method.default_granularity(),
            None,
            1.0,
            BTreeMap::new(),
            false,
            seed,
        )
        .expect("defaults are always valid")
    }

    pub fn param(&self, key: &str) -> f64 {
        self.params[key]
    }

    fn param_usize(&self, key: &str) -> Result<usize> {
        let v = self.param(key);
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::recipe(format!(
                "parameter '{key}' must be a non-negative integer, got {v}"
            )));
        }
        Ok(v as usize)
    }

    fn validate_params(&self) -> Result<()> {
        for (k, v) in &self.params {
            if !v.is_finite() {
                return Err(Error::recipe(format!("parameter '{k}' must be finite")));
            }
        }
        let in_range = |key: &str, lo: f64, lo_open: bool, hi: f64, hi_open: bool| -> Result<()> {
            let v = self.param(key);
            let ok_lo = if lo_open { v > lo } else { v >= lo };
            let ok_hi = if hi_open { v < hi } else { v <= hi };
            if ok_lo && ok_hi {
                Ok(())
            } else {
                Err(Error::recipe(format!(
                    "parameter '{key}' = {v} is outside its documented range"
                )))
            }
        };
        match self.method {
            Method::Slerp => in_range("t", 0.0, false, 1.0, false)?,
            Method::Lines => {
                in_range("alpha0", 0.0, false, f64::INFINITY, true)?;
                in_range("beta0", 0.0, false, f64::INFINITY, true)?;
            }
            Method::Dare => in_range("p", 0.0, false, 1.0, true)?,
            Method::Breadcrumbs => {
                in_range("beta", 0.0, false, 1.0, true)?;
                in_range("gamma", 0.0, true, 1.0, false)?;
                if self.param("beta") >= self.param("gamma") {
                    return Err(Error::recipe("breadcrumbs needs beta < gamma"));
                }
            }
            Method::Ties => in_range("k", 0.0, true, 1.0, false)?,
            Method::ConsensusTa => {
                in_range("lambda_mask", 0.0, true, f64::INFINITY, true)?;
                let support = self.param_usize("min_support")?;
                if support == 0 {
                    return Err(Error::recipe("min_support must be at least 1"));
                }
            }
            Method::Tsv => {
                self.param_usize("rank_per_task")?;
            }
            Method::IsoCts => {
                self.param_usize("k")?;
            }
            Method::Impart => in_range("tau", 0.0, true, 1.0, false)?,
            Method::TaDrop => in_range("rho", 0.0, true, 1.0, false)?,
            Method::Cabs => {
                let n = self.param_usize("n")?;
                let m = self.param_usize("m")?;
                if n == 0 || n >= m {
                    return Err(Error::recipe("cabs needs 1 <= n < m"));
                }
            }
            Method::Pcb => in_range("keep_ratio", 0.0, true, 1.0, false)?,
            Method::Della => {
                in_range("p_min", 0.0, true, 1.0, false)?;
                in_range("p_max", 0.0, true, 1.0, false)?;
                if self.param("p_min") > self.param("p_max") {
                    return Err(Error::recipe("della needs p_min <= p_max"));
                }
            }
            Method::Sce => in_range("p", 0.0, true, 1.0, false)?,
            Method::Wudi => {
                if self.param_usize("iters")? == 0 {
                    return Err(Error::recipe("wudi needs at least one iteration"));
                }
                in_range("step", 0.0, true, f64::INFINITY, true)?;
            }
            Method::AdaMerging => {
                self.param_usize("iters")?;
                in_range("step", 0.0, true, f64::INFINITY, true)?;
                in_range("init", 0.0, false, 1.0, false)?;
            }
            Method::RegMean => in_range("rho", 0.0, false, 1.0, false)?,
            Method::Cat => {
                if self.param_usize("r")? == 0 {
                    return Err(Error::recipe("cat needs r >= 1"));
                }
            }
            Method::Average | Method::MetaGpt => {}
        }
        Ok(())
    }

    /// Expert weights resolved against the expert count: uniform when absent.
    pub fn resolved_weights(&self, n: usize) -> Result<Vec<f64>> {
        let alpha = match &self.weights {
            Some(w) => w.clone(),
            None => vec![1.0 / n as f64; n],
        };
        if alpha.len() != n {
            return Err(Error::recipe(format!(
                "{} weights supplied for {n} experts",
                alpha.len()
            )));
        }
        if alpha.iter().any(|&a| !a.is_finite() || a < 0.0) {
            return Err(Error::recipe(
                "expert weights must be finite and non-negative",
            ));
        }
        if self.method == Method::Average {
            let sum: f64 = alpha.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::recipe(format!(
                    "average needs convex weights summing to 1, got {sum}"
                )));
            }
        }
        Ok(alpha)
    }

    /// Canonical JSON of the resolved recipe with materialized weights;
    /// stored in the merged checkpoint's source tag.
    pub fn echo(&self, n_experts: usize) -> Result<String> {
        #[derive(Serialize)]
        struct Echo<'a> {
            method: &'a str,
            granularity: &'a str,
            weights: Vec<f64>,
            lambda: f64,
            params: &'a BTreeMap<String, f64>,
            normalize: bool,
            seed: u64,
        }
        let echo = Echo {
            method: &self.method_id,
            granularity: &self.granularity_id,
            weights: self.resolved_weights(n_experts)?,
            lambda: self.lambda,
            params: &self.params,
            normalize: self.normalize,
            seed: self.seed,
        };
        serde_json::to_string(&echo).map_err(|e| Error::recipe(format!("echo failed: {e}")))
    }
}

/// A merged checkpoint plus everything needed to reproduce and audit it.
#[derive(Debug, Clone)]
pub struct MergedModel {
    pub checkpoint: Checkpoint,
    pub recipe_echo: String,
    /// Adaptive coefficients per group label, when the method produces them.
    pub per_tensor_coefficients: Option<BTreeMap<String, Vec<f64>>>,
    pub warnings: Vec<String>,
}

// ── Granularity groups ─────────────────────────────────────────────────────

/// One tensor's slice of a flattened group buffer.
#[derive(Debug, Clone)]
pub(crate) struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub depth: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Group {
    pub label: String,
    pub segments: Vec<Segment>,
    pub len: usize,
}

pub(crate) fn build_groups(manifest: &Manifest, granularity: Granularity) -> Vec<Group> {
    let dense: Vec<_> = manifest.dense_entries().collect();
    let make = |label: String, entries: &[&crate::checkpoint::ManifestEntry]| {
        let mut segments = Vec::new();
        let mut offset = 0usize;
        for e in entries {
            let len: usize = e.shape.iter().product();
            segments.push(Segment {
                name: e.name.clone(),
                shape: e.shape.clone(),
                offset,
                len,
                depth: e.depth,
            });
            offset += len;
        }
        Group {
            label,
            segments,
            len: offset,
        }
    };
    match granularity {
        Granularity::Model => vec![make("model".to_string(), &dense)],
        Granularity::Layer => (1..=manifest.layer_count)
            .map(|depth| {
                let entries: Vec<_> = dense.iter().copied().filter(|e| e.depth == depth).collect();
                make(format!("depth.{depth}"), &entries)
            })
            .collect(),
        Granularity::Matrix => dense
            .iter()
            .map(|e| make(e.name.clone(), std::slice::from_ref(e)))
            .collect(),
    }
}

fn flatten_group(group: &Group, lookup: impl Fn(&str) -> Result<Tensor>) -> Result<Vec<f32>> {
    let mut flat = vec![0.0f32; group.len];
    for seg in &group.segments {
        let t = lookup(&seg.name)?;
        flat[seg.offset..seg.offset + seg.len].copy_from_slice(t.data());
    }
    Ok(flat)
}

// ── Shared helpers for the operator files ──────────────────────────────────

/// Indices of the `count` largest values by (value desc, index asc).
pub(crate) fn top_indices_by(values: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(count.min(values.len()));
    idx
}

/// ceil(frac · n), the count kept by every top-fraction rule.
pub(crate) fn keep_count(frac: f64, n: usize) -> usize {
    ((frac * n as f64).ceil() as usize).min(n)
}

pub(crate) fn sign_of(v: f64) -> i32 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

// ── Dispatch ───────────────────────────────────────────────────────────────

/// Applies a data-free recipe. Calibration-dependent methods are routed by
/// [`execute_recipe`]; calling them here is a recipe error.
pub fn apply_recipe(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    experts: &[&Checkpoint],
) -> Result<MergedModel> {
    if recipe.method.needs_calibration() {
        return Err(Error::recipe(format!(
            "method '{}' needs a calibration set",
            recipe.method_id
        )));
    }
    if experts.is_empty() {
        return Err(Error::recipe("at least one expert is required"));
    }
    validate_compatible(base, experts)?;
    let n = experts.len();
    let alpha = recipe.resolved_weights(n)?;
    let mut warnings = Vec::new();
    let mut coefficients: BTreeMap<String, Vec<f64>> = BTreeMap::new();

    let groups = build_groups(&base.manifest, recipe.granularity);
    let mut merged_tensors: BTreeMap<String, Tensor> = BTreeMap::new();

    if recipe.method.interpolates_raw() {
        for group in &groups {
            let expert_flats: Vec<Vec<f32>> = experts
                .iter()
                .map(|e| flatten_group(group, |name| e.tensor(name).cloned()))
                .collect::<Result<_>>()?;
            let merged = match recipe.method {
                Method::Average => basic::linear_average(&expert_flats, &alpha),
                Method::Slerp => {
                    basic::slerp_chain(&expert_flats, recipe.param("t"), &group.label)?
                }
                _ => unreachable!(),
            };
            scatter_raw(group, &merged, &mut merged_tensors)?;
        }
    } else {
        let mut tvs: Vec<TaskVector> = experts
            .iter()
            .map(|e| compute_task_vector(base, e))
            .collect::<Result<_>>()?;
        if recipe.normalize {
            tvs = normalize_task_vectors(&tvs, NormLevel::Model)?;
        }
        // CABS claims indices in descending model-norm order, globally.
        let cabs_order: Vec<usize> = {
            let norms: Vec<f64> = tvs.iter().map(|tv| tv.model_norm()).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| norms[b].partial_cmp(&norms[a]).unwrap().then(a.cmp(&b)));
            order
        };

        for group in &groups {
            let deltas: Vec<Vec<f32>> = tvs
                .iter()
                .map(|tv| flatten_group(group, |name| tv.delta(name).cloned()))
                .collect::<Result<_>>()?;
            let out = merge_group(
                recipe,
                group,
                &deltas,
                &alpha,
                &cabs_order,
                base.manifest.layer_count,
            )?;
            if let Some(coeffs) = out.coefficients {
                coefficients.insert(group.label.clone(), coeffs);
            }
            warnings.extend(out.warnings);
            scatter_delta(group, &out.merged, recipe.lambda, base, &mut merged_tensors)?;
        }
    }

    let echo = recipe.echo(n)?;
    let manifest = Manifest {
        layer_count: base.manifest.layer_count,
        entries: base.manifest.dense_entries().cloned().collect(),
    };
    let checkpoint = Checkpoint {
        manifest,
        tensors: merged_tensors,
        kind: CheckpointKind::Merged,
        source_tag: echo.clone(),
    };
    checkpoint.validate()?;
    Ok(MergedModel {
        checkpoint,
        recipe_echo: echo,
        per_tensor_coefficients: if coefficients.is_empty() {
            None
        } else {
            Some(coefficients)
        },
        warnings,
    })
}

/// Routes a recipe to the data-free dispatcher or the calibration module.
pub fn execute_recipe(
    recipe: &MergeRecipe,
    base: &Checkpoint,
    experts: &[&Checkpoint],
    calibration: Option<&[CalibrationSet]>,
) -> Result<MergedModel> {
    if recipe.method.needs_calibration() {
        let cals = calibration.ok_or_else(|| {
            Error::recipe(format!(
                "method '{}' needs a calibration set",
                recipe.method_id
            ))
        })?;
        calibrate::apply_calibrated_recipe(recipe, base, experts, cals)
    } else {
        if calibration.is_some() {
            return Err(Error::recipe(format!(
                "method '{}' is data-free and does not accept calibration",
                recipe.method_id
            )));
        }
        apply_recipe(recipe, base, experts)
    }
}

pub(crate) struct GroupOutput {
    pub merged: Vec<f32>,
    pub coefficients: Option<Vec<f64>>,
    pub warnings: Vec<String>,
}

impl GroupOutput {
    fn plain(merged: Vec<f32>) -> GroupOutput {
        GroupOutput {
            merged,
            coefficients: None,
            warnings: Vec::new(),
        }
    }
}

fn merge_group(
    recipe: &MergeRecipe,
    group: &Group,
    deltas: &[Vec<f32>],
    alpha: &[f64],
    cabs_order: &[usize],
    layer_count: usize,
) -> Result<GroupOutput> {
    match recipe.method {
        Method::MetaGpt => {
            let (merged, lambdas, all_zero) = basic::metagpt(deltas);
            let mut out = GroupOutput::plain(merged);
            out.coefficients = Some(lambdas);
            if all_zero {
                out.warnings.push(format!(
                    "metagpt: all task vectors are zero in group '{}'; using uniform coefficients",
                    group.label
                ));
            }
            Ok(out)
        }
        Method::Lines => Ok(GroupOutput::plain(basic::lines(
            deltas,
            alpha,
            &group.segments,
            layer_count,
            recipe.param("alpha0"),
            recipe.param("beta0"),
        ))),
        Method::Dare => Ok(GroupOutput::plain(sparsify::dare(
            deltas,
            alpha,
            recipe.param("p"),
            recipe.seed,
            &group.segments,
        ))),
        Method::Breadcrumbs => Ok(GroupOutput::plain(sparsify::breadcrumbs(
            deltas,
            alpha,
            recipe.param("beta"),
            recipe.param("gamma"),
        ))),
        Method::Ties => Ok(GroupOutput::plain(sign::ties(deltas, recipe.param("k")))),
        Method::ConsensusTa => {
            let support = recipe.param("min_support") as usize;
            if support > deltas.len() {
                return Err(Error::recipe(format!(
                    "min_support = {support} exceeds the {} experts",
                    deltas.len()
                )));
            }
            Ok(GroupOutput::plain(sign::consensus_ta(
                deltas,
                alpha,
                recipe.param("lambda_mask"),
                support,
            )))
        }
        Method::Tsv => {
            let k = recipe.param("rank_per_task") as usize;
            Ok(GroupOutput::plain(subspace::tsv(
                deltas,
                &group.segments,
                alpha,
                if k == 0 { None } else { Some(k) },
            )?))
        }
        Method::IsoCts => {
            let k = recipe.param("k") as usize;
            Ok(GroupOutput::plain(subspace::iso_cts(
                deltas,
                &group.segments,
                alpha,
                if k == 0 { None } else { Some(k) },
            )?))
        }
        Method::Impart => Ok(GroupOutput::plain(subspace::impart(
            deltas,
            &group.segments,
            alpha,
            recipe.param("tau"),
        )?)),
        Method::TaDrop => Ok(GroupOutput::plain(sparsify::tadrop(
            deltas,
            alpha,
            recipe.param("rho"),
        ))),
        Method::Cabs => {
            let n_pat = recipe.param("n") as usize;
            let m_pat = recipe.param("m") as usize;
            if n_pat * deltas.len() > m_pat {
                return Err(Error::recipe(format!(
                    "cabs {n_pat}:{m_pat} pattern cannot host {} experts",
                    deltas.len()
                )));
            }
            Ok(GroupOutput::plain(sparsify::cabs(
                deltas, cabs_order, n_pat, m_pat,
            )))
        }
        Method::Pcb => Ok(GroupOutput::plain(sign::pcb(
            deltas,
            recipe.param("keep_ratio"),
        ))),
        Method::Della => Ok(GroupOutput::plain(sparsify::della(
            deltas,
            recipe.seed,
            &group.segments,
            recipe.param("p_min"),
            recipe.param("p_max"),
        ))),
        Method::Sce => {
            let (merged, coeffs) = sign::sce(deltas, recipe.param("p"));
            let mut out = GroupOutput::plain(merged);
            out.coefficients = Some(coeffs);
            Ok(out)
        }
        Method::Wudi => {
            let (merged, _traces) = subspace::wudi(
                deltas,
                &group.segments,
                alpha,
                recipe.param("iters") as usize,
                recipe.param("step"),
            )?;
            Ok(GroupOutput::plain(merged))
        }
        Method::Average | Method::Slerp | Method::AdaMerging | Method::RegMean | Method::Cat => {
            unreachable!("routed elsewhere")
        }
    }
}

fn scatter_raw(group: &Group, merged: &[f32], out: &mut BTreeMap<String, Tensor>) -> Result<()> {
    for seg in &group.segments {
        let data = merged[seg.offset..seg.offset + seg.len].to_vec();
        out.insert(seg.name.clone(), Tensor::new(seg.shape.clone(), data)?);
    }
    Ok(())
}

/// Writes `base + λ·delta` per tensor. Elements with an exactly-zero delta
/// copy the base bits, which keeps the zero-task-vector identity bit-exact.
fn scatter_delta(
    group: &Group,
    delta: &[f32],
    lambda: f64,
    base: &Checkpoint,
    out: &mut BTreeMap<String, Tensor>,
) -> Result<()> {
    for seg in &group.segments {
        let b = base.tensor(&seg.name)?;
        let d = &delta[seg.offset..seg.offset + seg.len];
        let data: Vec<f32> = b
            .data()
            .iter()
            .zip(d)
            .map(|(&bv, &dv)| {
                if dv == 0.0 {
                    bv
                } else {
                    (bv as f64 + lambda * dv as f64) as f32
                }
            })
            .collect();
        out.insert(seg.name.clone(), Tensor::new(seg.shape.clone(), data)?);
    }
    Ok(())
}


#[cfg(test)]
mod tests {
    use super::*;
    use testutil::{base, experts};

    #[test]
    fn recipe_file_rejects_unknown_fields_and_methods() {
        let bad = r#"{"method":"average","base":"b","experts":["e"],"seed":1,"bogus":2}"#;
        assert!(matches!(
            RecipeFile::from_json(bad),
            Err(Error::Recipe { .. })
        ));
        let unknown = r#"{"method":"titanic","base":"b","experts":["e"],"seed":1}"#;
        let parsed = RecipeFile::from_json(unknown).unwrap();
        assert!(parsed.to_recipe().is_err());
    }

    #[test]
    fn unknown_params_are_rejected() {
        let mut params = BTreeMap::new();
        params.insert("nope".to_string(), 1.0);
        let r = MergeRecipe::new(
            Method::Dare,
            Granularity::Model,
            None,
            1.0,
            params,
            false,
            0,
        );
        assert!(matches!(r, Err(Error::Recipe { .. })));
    }

    #[test]
    fn out_of_range_params_are_rejected() {
        let mut params = BTreeMap::new();
        params.insert("p".to_string(), 1.0);
        assert!(MergeRecipe::new(
            Method::Dare,
            Granularity::Model,
            None,
            1.0,
            params,
            false,
            0
        )
        .is_err());
        let mut params = BTreeMap::new();
        params.insert("beta".to_string(), 0.9);
        params.insert("gamma".to_string(), 0.5);
        assert!(MergeRecipe::new(
            Method::Breadcrumbs,
            Granularity::Model,
            None,
            1.0,
            params,
            false,
            0
        )
        .is_err());
    }

    #[test]
    fn average_weight_constraint_enforced() {
        let b = base();
        let exps = experts(2);
        let refs: Vec<&Checkpoint> = exps.iter().collect();
        let mut r = MergeRecipe::with_defaults(Method::Average, 0);
        r.weights = Some(vec![0.7, 0.7]);
        assert!(matches!(
            apply_recipe(&r, &b, &refs),
            Err(Error::Recipe { .. })
        ));
        r.weights = Some(vec![0.5, 0.5]);
        assert!(apply_recipe(&r, &b, &refs).is_ok());
    }

    #[test]
    fn echo_is_canonical_and_complete() {
        let r = MergeRecipe::with_defaults(Method::Dare, 42);
        let echo = r.echo(3).unwrap();
        assert!(echo.contains("\"method\":\"dare\""));
        assert!(echo.contains("\"p\":0.9"));
        assert!(echo.contains("\"seed\":42"));
        assert_eq!(echo, r.echo(3).unwrap());
    }

    #[test]
    fn groups_cover_every_tensor_once() {
        let m = testutil::manifest();
        for g in [Granularity::Model, Granularity::Layer, Granularity::Matrix] {
            let groups = build_groups(&m, g);
            let total: usize = groups.iter().map(|gr| gr.segments.len()).sum();
            assert_eq!(total, 4, "granularity {g:?}");
            let len_total: usize = groups.iter().map(|gr| gr.len).sum();
            assert_eq!(len_total, 6 + 2 + 4 + 2);
        }
        assert_eq!(build_groups(&m, Granularity::Layer).len(), 2);
        assert_eq!(build_groups(&m, Granularity::Matrix).len(), 4);
    }

    #[test]
    fn zero_deltas_reproduce_base_bit_exactly_for_every_delta_method() {
        let b = base();
        let same = [b.clone(), b.clone(), b.clone()];
        let refs: Vec<&Checkpoint> = same.iter().collect();
        for method in ALL_METHODS {
            if method.interpolates_raw() || method.needs_calibration() {
                continue;
            }
            let recipe = MergeRecipe::with_defaults(method, 7);
            let merged = apply_recipe(&recipe, &b, &refs)
                .unwrap_or_else(|e| panic!("{} failed: {e}", method.id()));
            for (name, t) in &merged.checkpoint.tensors {
                assert_eq!(
                    t.data(),
                    b.tensor(name).unwrap().data(),
                    "method {} tensor {name}",
                    method.id()
                );
            }
        }
    }

    #[test]
    fn identical_recipes_merge_identical_bytes() {
        let b = base();
        let exps = experts(3);
        let refs: Vec<&Checkpoint> = exps.iter().collect();
        for method in ALL_METHODS {
            if method.needs_calibration() {
                continue;
            }
            let recipe = MergeRecipe::with_defaults(method, 99);
            let a = apply_recipe(&recipe, &b, &refs).unwrap();
            let c = apply_recipe(&recipe, &b, &refs).unwrap();
            for (name, t) in &a.checkpoint.tensors {
                assert_eq!(
                    t.data(),
                    c.checkpoint.tensors[name].data(),
                    "{}",
                    method.id()
                );
            }
        }
    }

    #[test]
    fn linear_methods_agree_across_granularities() {
        let b = base();
        let exps = experts(3);
        let refs: Vec<&Checkpoint> = exps.iter().collect();
        // Identical experts make metagpt's coefficients equal per group at
        // any granularity; lines with alpha0=1, beta0=0 is identity scaling.
        let same = [exps[0].clone(), exps[0].clone()];
        let same_refs: Vec<&Checkpoint> = same.iter().collect();
        let mut cases: Vec<(Method, BTreeMap<String, f64>, Vec<&Checkpoint>)> = Vec::new();
        cases.push((Method::Average, BTreeMap::new(), refs.clone()));
        cases.push((Method::MetaGpt, BTreeMap::new(), same_refs.clone()));
        let mut lines_params = BTreeMap::new();
        lines_params.insert("alpha0".to_string(), 1.0);
        lines_params.insert("beta0".to_string(), 0.0);
        cases.push((Method::Lines, lines_params, refs.clone()));
        for (method, params, exp_refs) in cases {
            let model = MergeRecipe::new(
                method,
                Granularity::Model,
                None,
                1.0,
                params.clone(),
                false,
                0,
            )
            .unwrap();
            let matrix =
                MergeRecipe::new(method, Granularity::Matrix, None, 1.0, params, false, 0).unwrap();
            let a = apply_recipe(&model, &b, &exp_refs).unwrap();
            let c = apply_recipe(&matrix, &b, &exp_refs).unwrap();
            for (name, t) in &a.checkpoint.tensors {
                for (x, y) in t.data().iter().zip(c.checkpoint.tensors[name].data()) {
                    assert!(
                        (x - y).abs() <= 1e-6,
                        "{} tensor {name}: {x} vs {y}",
                        method.id()
                    );
                }
            }
        }
    }
}
