//! Sign-consensus operators: TIES, Consensus TA, PCB, SCE.
//!
//! These resolve conflicting updates element by element: electing a sign by
//! majority vote, masking "selfish" entries without cross-task support, or
//! weighting survivors by balanced importance scores.

use crate::merge::{keep_count, sign_of, top_indices_by};

/// Trim each expert to its top-k fraction by magnitude, elect a sign per
/// element as s = sign(∑ᵢ sign(t̂ᵢ)), and average the kept values whose sign
/// matches the election (zero when the vote ties).
pub fn ties(deltas: &[Vec<f32>], k: f64) -> Vec<f32> {
    let trimmed = trim_by_magnitude(deltas, k);
    elect_and_average(&trimmed)
}

pub(crate) fn trim_by_magnitude(deltas: &[Vec<f32>], k: f64) -> Vec<Vec<f64>> {
    let len = deltas[0].len();
    let count = keep_count(k, len);
    deltas
        .iter()
        .map(|d| {
            let mags: Vec<f64> = d.iter().map(|&v| (v as f64).abs()).collect();
            let keep = top_indices_by(&mags, count);
            let mut out = vec![0.0f64; len];
            for &i in &keep {
                out[i] = d[i] as f64;
            }
            out
        })
        .collect()
}

pub(crate) fn elect_and_average(values: &[Vec<f64>]) -> Vec<f32> {
    let len = values[0].len();
    let mut out = vec![0.0f32; len];
    for e in 0..len {
        let votes: i32 = values.iter().map(|v| sign_of(v[e])).sum();
        let s = votes.signum();
        if s == 0 {
            continue;
        }
        let mut acc = 0.0f64;
        let mut n = 0usize;
        for v in values {
            if sign_of(v[e]) == s {
                acc += v[e];
                n += 1;
            }
        }
        if n > 0 {
            out[e] = (acc / n as f64) as f32;
        }
    }
    out
}

/// Per-task masks keep entries whose magnitude stands up to the rest of the
/// tasks combined: mᵢ = 1[|tᵢ| ≥ λ·|∑ⱼtⱼ − tᵢ|]. Elements supported by fewer
/// than `min_support` tasks are erased; survivors merge as ∑ αᵢtᵢ.
pub fn consensus_ta(
    deltas: &[Vec<f32>],
    alpha: &[f64],
    lambda_mask: f64,
    min_support: usize,
) -> Vec<f32> {
    let len = deltas[0].len();
    let mut out = vec![0.0f32; len];
    for e in 0..len {
        let total: f64 = deltas.iter().map(|d| d[e] as f64).sum();
        let support = deltas
            .iter()
            .filter(|d| {
                let t = d[e] as f64;
                t.abs() >= lambda_mask * (total - t).abs()
            })
            .count();
        if support >= min_support {
            let acc: f64 = deltas
                .iter()
                .zip(alpha)
                .map(|(d, &a)| a * d[e] as f64)
                .sum();
            out[e] = acc as f32;
        }
    }
    out
}

/// Intra/inter-balanced importance scoring. Per expert i with t̄ = t/max|t|:
/// intra = softmax(n·t̄ᵢ²), inter = ∑ⱼ softmax(t̄ᵢ⊙t̄ⱼ), score = intra⊙inter.
/// Each expert keeps its top `keep_ratio` fraction by score; the merged
/// element is the score-weighted mean of kept values.
pub fn pcb(deltas: &[Vec<f32>], keep_ratio: f64) -> Vec<f32> {
    let n = deltas.len();
    let len = deltas[0].len();
    let normed: Vec<Vec<f64>> = deltas
        .iter()
        .map(|d| {
            let max = d.iter().fold(0.0f64, |m, &v| m.max((v as f64).abs()));
            if max == 0.0 {
                vec![0.0; len]
            } else {
                d.iter().map(|&v| v as f64 / max).collect()
            }
        })
        .collect();

    let scores: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let intra_in: Vec<f64> = normed[i].iter().map(|&v| n as f64 * v * v).collect();
            let intra = softmax(&intra_in);
            let mut inter = vec![0.0f64; len];
            for tj in &normed {
                let prod: Vec<f64> = normed[i].iter().zip(tj).map(|(a, b)| a * b).collect();
                for (acc, v) in inter.iter_mut().zip(softmax(&prod)) {
                    *acc += v;
                }
            }
            intra.iter().zip(&inter).map(|(a, b)| a * b).collect()
        })
        .collect();

    let count = keep_count(keep_ratio, len);
    let masks: Vec<Vec<bool>> = scores
        .iter()
        .map(|s| {
            let keep = top_indices_by(s, count);
            let mut mask = vec![false; len];
            for &i in &keep {
                mask[i] = true;
            }
            mask
        })
        .collect();

    let mut out = vec![0.0f32; len];
    for e in 0..len {
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for i in 0..n {
            if masks[i][e] {
                num += scores[i][e] * deltas[i][e] as f64;
                den += scores[i][e];
            }
        }
        if den > 0.0 {
            out[e] = (num / den) as f32;
        }
    }
    out
}

fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|&v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|v| v / z).collect()
}

/// Select / Calculate / Erase. Selects the top-p elements by cross-expert
/// variance (one mask shared by all experts), weights experts by the sum of
/// squares of their selected entries, erases sign conflicts against the
/// selected sum, and averages survivors by those weights.
pub fn sce(deltas: &[Vec<f32>], p: f64) -> (Vec<f32>, Vec<f64>) {
    let n = deltas.len();
    let len = deltas[0].len();

    let variance: Vec<f64> = (0..len)
        .map(|e| {
            let mean: f64 = deltas.iter().map(|d| d[e] as f64).sum::<f64>() / n as f64;
            deltas
                .iter()
                .map(|d| {
                    let diff = d[e] as f64 - mean;
                    diff * diff
                })
                .sum::<f64>()
                / n as f64
        })
        .collect();
    let count = keep_count(p, len);
    let selected = top_indices_by(&variance, count);
    let mut mask = vec![false; len];
    for &i in &selected {
        mask[i] = true;
    }

    let mut coeffs: Vec<f64> = deltas
        .iter()
        .map(|d| {
            (0..len)
                .filter(|&e| mask[e])
                .map(|e| {
                    let v = d[e] as f64;
                    v * v
                })
                .sum()
        })
        .collect();
    let total: f64 = coeffs.iter().sum();
    if total > 0.0 {
        for c in coeffs.iter_mut() {
            *c /= total;
        }
    } else {
        coeffs = vec![1.0 / n as f64; n];
    }

    let mut out = vec![0.0f32; len];
    for e in 0..len {
        if !mask[e] {
            continue;
        }
        let sum: f64 = deltas.iter().map(|d| d[e] as f64).sum();
        let s = sign_of(sum);
        if s == 0 {
            continue;
        }
        let mut num = 0.0f64;
        let mut den = 0.0f64;
        for (d, &c) in deltas.iter().zip(&coeffs) {
            if sign_of(d[e] as f64) == s {
                num += c * d[e] as f64;
                den += c;
            }
        }
        if den > 0.0 {
            out[e] = (num / den) as f32;
        }
    }
    (out, coeffs)
}
