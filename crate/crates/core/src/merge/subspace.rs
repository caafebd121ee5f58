//! Subspace operators: TSV, ISO-CTS, IMPART, WUDI.
//!
//! All four work matrix by matrix through the SVD. Rank-1 tensors (biases)
//! have no meaningful spectrum and fall back to α-weighted averaging.

use crate::error::{Error, Result};
use crate::merge::Segment;
use crate::tensor::{numerical_rank, svd, SvdResult, Tensor};

/// Rank-k truncation of each task vector, joint orthogonalization of the
/// stacked scaled bases, and summation of the projections in that frame.
/// Default k = floor(min(m,n)/n_tasks), at least 1.
pub(crate) fn tsv(
    deltas: &[Vec<f32>],
    segments: &[Segment],
    alpha: &[f64],
    k_opt: Option<usize>,
) -> Result<Vec<f32>> {
    per_matrix(deltas, segments, alpha, |mats, m, n| {
        let k = match k_opt {
            Some(k) => {
                if k > m.min(n) {
                    return Err(Error::rank(format!(
                        "rank_per_task = {k} exceeds min(m,n) = {}",
                        m.min(n)
                    )));
                }
                k
            }
            None => (m.min(n) / mats.len()).max(1),
        };
        let truncated: Vec<SvdResult> = mats.iter().map(svd).collect::<Result<_>>()?;

        // Horizontal concatenation of Ûᵢ·√Ŝᵢ and V̂ᵢ·√Ŝᵢ over the top-k
        // components of every task.
        let n_tasks = mats.len();
        let mut u_cat = vec![0.0f32; m * n_tasks * k];
        let mut v_cat = vec![0.0f32; n * n_tasks * k];
        for (i, r) in truncated.iter().enumerate() {
            for c in 0..k {
                let w = (r.s.data()[c] as f64).max(0.0).sqrt();
                for row in 0..m {
                    u_cat[row * n_tasks * k + i * k + c] = (r.u.at(row, c) as f64 * w) as f32;
                }
                for row in 0..n {
                    v_cat[row * n_tasks * k + i * k + c] = (r.v.at(row, c) as f64 * w) as f32;
                }
            }
        }
        let u_frame = orthonormal_frame(&Tensor::new(vec![m, n_tasks * k], u_cat)?)?;
        let v_frame = orthonormal_frame(&Tensor::new(vec![n, n_tasks * k], v_cat)?)?;
        let (u_frame, v_frame) = match (u_frame, v_frame) {
            (Some(u), Some(v)) => (u, v),
            _ => return Ok(vec![0.0f32; m * n]),
        };

        let mut merged = vec![0.0f64; m * n];
        for r in &truncated {
            let recon = reconstruct_rank(r, k, m, n);
            let projected = project_into_frame(&recon, m, n, &u_frame, &v_frame)?;
            for (acc, v) in merged.iter_mut().zip(projected) {
                *acc += v;
            }
        }
        Ok(merged.into_iter().map(|v| v as f32).collect())
    })
}

/// Columns of the left singular basis above the numerical-rank cutoff.
fn orthonormal_frame(cat: &Tensor) -> Result<Option<Tensor>> {
    let r = svd(cat)?;
    let rank = numerical_rank(r.s.data());
    if rank == 0 {
        return Ok(None);
    }
    let rows = r.u.shape()[0];
    let mut data = vec![0.0f32; rows * rank];
    for i in 0..rows {
        for j in 0..rank {
            data[i * rank + j] = r.u.at(i, j);
        }
    }
    Ok(Some(Tensor::new(vec![rows, rank], data)?))
}

fn reconstruct_rank(r: &SvdResult, k: usize, m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0f64; m * n];
    for c in 0..k.min(r.s.len()) {
        let s = r.s.data()[c] as f64;
        if s == 0.0 {
            continue;
        }
        for i in 0..m {
            let ui = r.u.at(i, c) as f64 * s;
            if ui == 0.0 {
                continue;
            }
            for j in 0..n {
                out[i * n + j] += ui * r.v.at(j, c) as f64;
            }
        }
    }
    out
}

/// U_f·U_fᵀ·T·V_f·V_fᵀ in f64.
fn project_into_frame(t: &[f64], m: usize, n: usize, u: &Tensor, v: &Tensor) -> Result<Vec<f64>> {
    let ru = u.shape()[1];
    let rv = v.shape()[1];
    // left = Uᵀ·T (ru×n)
    let mut left = vec![0.0f64; ru * n];
    for a in 0..ru {
        for i in 0..m {
            let w = u.at(i, a) as f64;
            if w == 0.0 {
                continue;
            }
            for j in 0..n {
                left[a * n + j] += w * t[i * n + j];
            }
        }
    }
    // mid = left·V (ru×rv)
    let mut mid = vec![0.0f64; ru * rv];
    for a in 0..ru {
        for j in 0..n {
            let lv = left[a * n + j];
            if lv == 0.0 {
                continue;
            }
            for b in 0..rv {
                mid[a * rv + b] += lv * v.at(j, b) as f64;
            }
        }
    }
    // out = U·mid·Vᵀ
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for a in 0..ru {
            let w = u.at(i, a) as f64;
            if w == 0.0 {
                continue;
            }
            for b in 0..rv {
                let c = w * mid[a * rv + b];
                if c == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += c * v.at(j, b) as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Flattens the spectrum of the summed task vector: the top-k nonzero
/// singular values are replaced by their mean and the tail is zeroed.
pub(crate) fn iso_cts(
    deltas: &[Vec<f32>],
    segments: &[Segment],
    alpha: &[f64],
    k_opt: Option<usize>,
) -> Result<Vec<f32>> {
    per_matrix(deltas, segments, alpha, |mats, m, n| {
        let mut sum = vec![0.0f64; m * n];
        for t in mats {
            for (acc, &v) in sum.iter_mut().zip(t.data()) {
                *acc += v as f64;
            }
        }
        let sum_t = Tensor::from_f64(vec![m, n], &sum)?;
        let r = svd(&sum_t)?;
        let rank = numerical_rank(r.s.data());
        if rank == 0 {
            return Ok(vec![0.0f32; m * n]);
        }
        let k = match k_opt {
            Some(k) => {
                if k > m.min(n) {
                    return Err(Error::rank(format!(
                        "k = {k} exceeds min(m,n) = {}",
                        m.min(n)
                    )));
                }
                k.min(rank)
            }
            None => rank,
        };
        let mean: f64 = r.s.data()[..k].iter().map(|&s| s as f64).sum::<f64>() / k as f64;
        let mut flat = SvdResult {
            u: r.u.clone(),
            s: Tensor::zeros(vec![r.s.len()]),
            v: r.v.clone(),
        };
        let mut s_data = vec![0.0f32; r.s.len()];
        for slot in s_data.iter_mut().take(k) {
            *slot = mean as f32;
        }
        flat.s = Tensor::new(vec![r.s.len()], s_data)?;
        let recon = reconstruct_rank(&flat, k, m, n);
        Ok(recon.into_iter().map(|v| v as f32).collect())
    })
}

/// Importance-aware spectral truncation per task: keep the shortest prefix
/// of components holding at least τ of the σ² energy, reconstruct, and
/// combine with the expert weights.
pub(crate) fn impart(
    deltas: &[Vec<f32>],
    segments: &[Segment],
    alpha: &[f64],
    tau: f64,
) -> Result<Vec<f32>> {
    per_matrix(deltas, segments, alpha, |mats, m, n| {
        let mut merged = vec![0.0f64; m * n];
        for (i, t) in mats.iter().enumerate() {
            let r = svd(t)?;
            let energies: Vec<f64> =
                r.s.data()
                    .iter()
                    .map(|&s| (s as f64) * (s as f64))
                    .collect();
            let total: f64 = energies.iter().sum();
            if total == 0.0 {
                continue;
            }
            let mut cum = 0.0f64;
            let mut keep = 0usize;
            for &e in &energies {
                keep += 1;
                cum += e;
                if cum >= tau * total {
                    break;
                }
            }
            let recon = reconstruct_rank(&r, keep, m, n);
            for (acc, v) in merged.iter_mut().zip(recon) {
                *acc += alpha[i] * v;
            }
        }
        Ok(merged.into_iter().map(|v| v as f32).collect())
    })
}

/// Minimizes the row-space interference objective
/// J(T) = ∑ᵢ ‖(T − Tᵢ)·Pᵢ‖²/‖Tᵢ‖² by gradient descent from T = ∑Tᵢ, where
/// Pᵢ projects onto the row space of Tᵢ. The recorded objective trace is
/// non-increasing: a step that would raise J is rejected and the step size
/// halves, at most five times.
pub(crate) fn wudi(
    deltas: &[Vec<f32>],
    segments: &[Segment],
    alpha: &[f64],
    iters: usize,
    step: f64,
) -> Result<(Vec<f32>, Vec<Vec<f64>>)> {
    let mut traces = Vec::new();
    let merged = per_matrix(deltas, segments, alpha, |mats, m, n| {
        let (out, trace) = wudi_matrix(mats, m, n, iters, step)?;
        traces.push(trace);
        Ok(out)
    })?;
    Ok((merged, traces))
}

/// Single-matrix WUDI; exposed for the contract tests.
pub fn wudi_matrix(
    mats: &[Tensor],
    m: usize,
    n: usize,
    iters: usize,
    step: f64,
) -> Result<(Vec<f32>, Vec<f64>)> {
    struct Task {
        delta: Vec<f64>,
        projector: Vec<f64>,
        inv_sq_norm: f64,
    }
    let mut tasks = Vec::new();
    for t in mats {
        let sq: f64 = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        if sq == 0.0 {
            continue;
        }
        let r = svd(t)?;
        let rank = numerical_rank(r.s.data());
        let mut projector = vec![0.0f64; n * n];
        for c in 0..rank {
            for i in 0..n {
                let vi = r.v.at(i, c) as f64;
                if vi == 0.0 {
                    continue;
                }
                for j in 0..n {
                    projector[i * n + j] += vi * r.v.at(j, c) as f64;
                }
            }
        }
        tasks.push(Task {
            delta: t.data().iter().map(|&v| v as f64).collect(),
            projector,
            inv_sq_norm: 1.0 / sq,
        });
    }
    if tasks.is_empty() {
        return Ok((vec![0.0f32; m * n], vec![0.0]));
    }

    let mul_proj = |mat: &[f64], p: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0f64; m * n];
        for i in 0..m {
            for jj in 0..n {
                let v = mat[i * n + jj];
                if v == 0.0 {
                    continue;
                }
                let prow = &p[jj * n..(jj + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += v * prow[j];
                }
            }
        }
        out
    };
    let objective = |t: &[f64]| -> f64 {
        tasks
            .iter()
            .map(|task| {
                let diff: Vec<f64> = t.iter().zip(&task.delta).map(|(a, b)| a - b).collect();
                let proj = mul_proj(&diff, &task.projector);
                proj.iter().map(|v| v * v).sum::<f64>() * task.inv_sq_norm
            })
            .sum()
    };
    let gradient = |t: &[f64]| -> Vec<f64> {
        let mut g = vec![0.0f64; m * n];
        for task in &tasks {
            let diff: Vec<f64> = t.iter().zip(&task.delta).map(|(a, b)| a - b).collect();
            let proj = mul_proj(&diff, &task.projector);
            for (acc, v) in g.iter_mut().zip(proj) {
                *acc += 2.0 * v * task.inv_sq_norm;
            }
        }
        g
    };

    let mut current: Vec<f64> = {
        let mut init = vec![0.0f64; m * n];
        for task in &tasks {
            for (acc, &v) in init.iter_mut().zip(&task.delta) {
                *acc += v;
            }
        }
        init
    };
    let mut j_cur = objective(&current);
    let mut trace = vec![j_cur];
    let mut grad = gradient(&current);
    let mut step = step;
    let mut halvings = 0usize;
    for _ in 0..iters {
        let candidate: Vec<f64> = current
            .iter()
            .zip(&grad)
            .map(|(t, g)| t - step * g)
            .collect();
        let j_new = objective(&candidate);
        if j_new > j_cur {
            halvings += 1;
            if halvings > 5 {
                break;
            }
            step *= 0.5;
            trace.push(j_cur);
        } else {
            current = candidate;
            j_cur = j_new;
            grad = gradient(&current);
            trace.push(j_cur);
        }
    }
    debug_assert!(*trace.last().unwrap() <= trace[0]);
    Ok((current.into_iter().map(|v| v as f32).collect(), trace))
}

/// Runs `op` on each rank-2 segment; rank-1 segments combine as ∑ αᵢtᵢ.
fn per_matrix(
    deltas: &[Vec<f32>],
    segments: &[Segment],
    alpha: &[f64],
    mut op: impl FnMut(&[Tensor], usize, usize) -> Result<Vec<f32>>,
) -> Result<Vec<f32>> {
    let len = deltas[0].len();
    let mut out = vec![0.0f32; len];
    for seg in segments {
        let range = seg.offset..seg.offset + seg.len;
        if seg.shape.len() == 2 {
            let (m, n) = (seg.shape[0], seg.shape[1]);
            let mats: Vec<Tensor> = deltas
                .iter()
                .map(|d| Tensor::new(vec![m, n], d[range.clone()].to_vec()))
                .collect::<Result<_>>()?;
            let merged = op(&mats, m, n)?;
            out[range].copy_from_slice(&merged);
        } else {
            for (e, slot) in range.clone().zip(out[range.clone()].iter_mut()) {
                let acc: f64 = deltas
                    .iter()
                    .zip(alpha)
                    .map(|(d, &a)| a * d[e] as f64)
                    .sum();
                *slot = acc as f32;
            }
        }
    }
    Ok(out)
}
