//! Sparsifying operators: DARE, Breadcrumbs, TADrop, CABS, DELLA.
//!
//! Random masks draw from SplitMix64 streams keyed by (expert, tensor), in
//! flat element order within each tensor, so masks are reproducible and
//! independent of grouping or expert count.

use crate::merge::{sign_of, top_indices_by, Segment};
use crate::tensor::{norm_of_slice, stream_seed, SplitMix64};

fn tensor_stream(seed: u64, expert: usize, segment: &Segment, method: &str) -> SplitMix64 {
    SplitMix64::new(stream_seed(
        seed,
        expert as u64,
        &format!("{method}:{}", segment.name),
    ))
}

/// Drop-and-rescale: each element survives an independent Bernoulli(1−p)
/// draw and survivors scale by 1/(1−p), keeping the update unbiased.
/// Merged = ∑ αᵢ T̃ᵢ.
pub(crate) fn dare(
    deltas: &[Vec<f32>],
    alpha: &[f64],
    p: f64,
    seed: u64,
    segments: &[Segment],
) -> Vec<f32> {
    let len = deltas[0].len();
    let rescale = 1.0 / (1.0 - p);
    let mut out = vec![0.0f64; len];
    for (i, d) in deltas.iter().enumerate() {
        for seg in segments {
            let mut rng = tensor_stream(seed, i, seg, "dare");
            for e in seg.offset..seg.offset + seg.len {
                let u = rng.uniform();
                if u >= p {
                    out[e] += alpha[i] * d[e] as f64 * rescale;
                }
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Keeps only mid-magnitude entries: ascending-percentile rank in (β, γ],
/// dropping both tiny perturbations and outliers. No rescaling.
pub fn breadcrumbs(deltas: &[Vec<f32>], alpha: &[f64], beta: f64, gamma: f64) -> Vec<f32> {
    let len = deltas[0].len();
    let mut out = vec![0.0f64; len];
    for (d, &a) in deltas.iter().zip(alpha) {
        // Ascending order by (|value|, index); percentile of position j is
        // (j+1)/len.
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&x, &y| {
            let mx = (d[x] as f64).abs();
            let my = (d[y] as f64).abs();
            mx.partial_cmp(&my).unwrap().then(x.cmp(&y))
        });
        for (pos, &e) in order.iter().enumerate() {
            let pct = (pos + 1) as f64 / len as f64;
            if pct > beta && pct <= gamma {
                out[e] += a * d[e] as f64;
            }
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Distribution-aware sparsification: keep the smallest set of largest
/// entries whose squared mass reaches ρ·‖t‖², then rescale survivors so the
/// tensor norm is preserved. Heavy-tailed tensors get sparser masks.
pub fn tadrop(deltas: &[Vec<f32>], alpha: &[f64], rho: f64) -> Vec<f32> {
    let len = deltas[0].len();
    let mut out = vec![0.0f64; len];
    for (d, &a) in deltas.iter().zip(alpha) {
        let norm = norm_of_slice(d);
        if norm == 0.0 {
            continue;
        }
        let total = norm * norm;
        let mags: Vec<f64> = d
            .iter()
            .map(|&v| {
                let v = v as f64;
                v * v
            })
            .collect();
        let order = top_indices_by(&mags, len);
        let threshold = rho * total;
        let mut cum = 0.0f64;
        let mut kept = Vec::new();
        for &e in &order {
            kept.push(e);
            cum += mags[e];
            if cum >= threshold {
                break;
            }
        }
        let kept_norm = cum.sqrt();
        if kept_norm == 0.0 {
            continue;
        }
        let rescale = norm / kept_norm;
        for &e in &kept {
            out[e] += a * d[e] as f64 * rescale;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Conflict-aware balanced n:m sparsification. Experts claim indices in
/// descending model-norm order (`order` is precomputed globally): within
/// each contiguous block of m entries an expert keeps its n largest unclaimed
/// magnitudes, then rescales its kept tensor back to full norm. Masks of
/// distinct experts are disjoint by construction; merged = ∑ kept.
pub fn cabs(deltas: &[Vec<f32>], order: &[usize], n: usize, m: usize) -> Vec<f32> {
    let len = deltas[0].len();
    let mut claimed = vec![false; len];
    let mut out = vec![0.0f64; len];
    for &expert in order {
        let d = &deltas[expert];
        let mut kept: Vec<usize> = Vec::new();
        let mut start = 0usize;
        while start < len {
            let end = (start + m).min(len);
            let mut candidates: Vec<usize> = (start..end).filter(|&e| !claimed[e]).collect();
            candidates.sort_by(|&x, &y| {
                let mx = (d[x] as f64).abs();
                let my = (d[y] as f64).abs();
                my.partial_cmp(&mx).unwrap().then(x.cmp(&y))
            });
            for &e in candidates.iter().take(n) {
                claimed[e] = true;
                kept.push(e);
            }
            start = end;
        }
        let norm = norm_of_slice(d);
        let kept_sq: f64 = kept
            .iter()
            .map(|&e| {
                let v = d[e] as f64;
                v * v
            })
            .sum();
        let kept_norm = kept_sq.sqrt();
        if kept_norm == 0.0 {
            continue;
        }
        let rescale = norm / kept_norm;
        for &e in &kept {
            out[e] += d[e] as f64 * rescale;
        }
    }
    out.into_iter().map(|v| v as f32).collect()
}

/// Magnitude-graded random drop: ascending magnitude rank j of N maps to
/// keep-probability p_min + (p_max − p_min)·j/(N−1); survivors rescale by
/// 1/p_keep, then a TIES-style sign election averages consistent survivors.
pub(crate) fn della(
    deltas: &[Vec<f32>],
    seed: u64,
    segments: &[Segment],
    p_min: f64,
    p_max: f64,
) -> Vec<f32> {
    let len = deltas[0].len();
    let mut survivors: Vec<Vec<f64>> = Vec::with_capacity(deltas.len());
    for (i, d) in deltas.iter().enumerate() {
        // Keep-probability per element from the ascending magnitude rank.
        let mut order: Vec<usize> = (0..len).collect();
        order.sort_by(|&x, &y| {
            let mx = (d[x] as f64).abs();
            let my = (d[y] as f64).abs();
            mx.partial_cmp(&my).unwrap().then(x.cmp(&y))
        });
        let mut p_keep = vec![0.0f64; len];
        for (rank, &e) in order.iter().enumerate() {
            let frac = if len == 1 {
                1.0
            } else {
                rank as f64 / (len - 1) as f64
            };
            p_keep[e] = p_min + (p_max - p_min) * frac;
        }
        let mut kept = vec![0.0f64; len];
        for seg in segments {
            let mut rng = tensor_stream(seed, i, seg, "della");
            for e in seg.offset..seg.offset + seg.len {
                let u = rng.uniform();
                if u < p_keep[e] {
                    kept[e] = d[e] as f64 / p_keep[e];
                }
            }
        }
        survivors.push(kept);
    }

    let mut out = vec![0.0f32; len];
    for e in 0..len {
        let votes: i32 = survivors.iter().map(|s| sign_of(s[e])).sum();
        let s = votes.signum();
        if s == 0 {
            continue;
        }
        let mut acc = 0.0f64;
        let mut count = 0usize;
        for kept in &survivors {
            if sign_of(kept[e]) == s {
                acc += kept[e];
                count += 1;
            }
        }
        out[e] = (acc / count as f64) as f32;
    }
    out
}
