//! Basic interpolation operators: Average, SLERP, MetaGPT, LiNeS.

use crate::error::{Error, Result};
use crate::merge::Segment;
use crate::tensor::{dot_of_slices, norm_of_slice};

/// Convex combination ∑ αᵢθᵢ, computed in anchored form θ₁ + ∑ αᵢ(θᵢ − θ₁)
/// so that identical experts reproduce their parameters bit-exactly.
pub fn linear_average(expert_raws: &[Vec<f32>], alpha: &[f64]) -> Vec<f32> {
    let len = expert_raws[0].len();
    let anchor = &expert_raws[0];
    let mut out = vec![0.0f32; len];
    for e in 0..len {
        let mut acc = 0.0f64;
        for (x, &a) in expert_raws.iter().zip(alpha) {
            acc += a * (x[e] as f64 - anchor[e] as f64);
        }
        out[e] = if acc == 0.0 {
            anchor[e]
        } else {
            (anchor[e] as f64 + acc) as f32
        };
    }
    out
}

/// Spherical interpolation along the arc between two parameter vectors:
/// sin((1−t)Ω)/sin(Ω)·θ₁ + sin(tΩ)/sin(Ω)·θ₂ with Ω the angle between them.
/// Near-parallel vectors (Ω < 1e-6) fall back to linear interpolation.
/// More than two experts fold left: slerp(slerp(θ₁, θ₂, t), θ₃, t).
pub fn slerp_chain(expert_raws: &[Vec<f32>], t: f64, label: &str) -> Result<Vec<f32>> {
    let mut cur = expert_raws[0].clone();
    for next in &expert_raws[1..] {
        cur = slerp_pair(&cur, next, t, label)?;
    }
    Ok(cur)
}

fn slerp_pair(a: &[f32], b: &[f32], t: f64, label: &str) -> Result<Vec<f32>> {
    let na = norm_of_slice(a);
    let nb = norm_of_slice(b);
    if na == 0.0 || nb == 0.0 {
        return Err(Error::DegenerateGeometry {
            detail: format!("zero-norm parameter group '{label}' has no spherical path"),
        });
    }
    if t == 0.0 {
        return Ok(a.to_vec());
    }
    if t == 1.0 {
        return Ok(b.to_vec());
    }
    let cos = (dot_of_slices(a, b) / (na * nb)).clamp(-1.0, 1.0);
    let omega = cos.acos();
    let (wa, wb) = if omega < 1e-6 {
        (1.0 - t, t)
    } else {
        let sin = omega.sin();
        (((1.0 - t) * omega).sin() / sin, (t * omega).sin() / sin)
    };
    Ok(a.iter()
        .zip(b)
        .map(|(&x, &y)| (wa * x as f64 + wb * y as f64) as f32)
        .collect())
}

/// Squared-norm-proportional scaling coefficients λᵢ = ‖Tᵢ‖²/∑ⱼ‖Tⱼ‖², then
/// merged = ∑ λᵢTᵢ. All-zero task vectors degrade to uniform coefficients;
/// the caller surfaces the warning.
pub fn metagpt(deltas: &[Vec<f32>]) -> (Vec<f32>, Vec<f64>, bool) {
    let n = deltas.len();
    let sq: Vec<f64> = deltas
        .iter()
        .map(|d| {
            let norm = norm_of_slice(d);
            norm * norm
        })
        .collect();
    let total: f64 = sq.iter().sum();
    let (lambdas, all_zero) = if total == 0.0 {
        (vec![1.0 / n as f64; n], true)
    } else {
        (sq.iter().map(|&s| s / total).collect(), false)
    };
    let len = deltas[0].len();
    let mut out = vec![0.0f32; len];
    for e in 0..len {
        let mut acc = 0.0f64;
        for (d, &l) in deltas.iter().zip(&lambdas) {
            acc += l * d[e] as f64;
        }
        out[e] = acc as f32;
    }
    (out, lambdas, all_zero)
}

/// Depth-dependent scaling of the α-weighted average update: tensors at
/// depth l scale by γ_l = α₀ + β₀·(l−1)/(L−1), ramping shallow layers toward
/// the base. A single-depth model uses γ = α₀ + β₀.
pub(crate) fn lines(
    deltas: &[Vec<f32>],
    alpha: &[f64],
    segments: &[Segment],
    layer_count: usize,
    alpha0: f64,
    beta0: f64,
) -> Vec<f32> {
    let len = deltas[0].len();
    let mut avg = vec![0.0f64; len];
    for (d, &a) in deltas.iter().zip(alpha) {
        for e in 0..len {
            avg[e] += a * d[e] as f64;
        }
    }
    let gamma = |depth: usize| -> f64 {
        if layer_count == 1 {
            alpha0 + beta0
        } else {
            alpha0 + beta0 * (depth as f64 - 1.0) / (layer_count as f64 - 1.0)
        }
    };
    let mut out = vec![0.0f32; len];
    for seg in segments {
        let g = gamma(seg.depth);
        for e in seg.offset..seg.offset + seg.len {
            out[e] = (g * avg[e]) as f32;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checkpoint::Role;
    use crate::merge::Segment;

    #[test]
    fn average_symmetry_and_degenerate_weight() {
        let a = vec![vec![1.0, 3.0], vec![3.0, 1.0]];
        assert_eq!(linear_average(&a, &[0.5, 0.5]), vec![2.0, 2.0]);

        let three = vec![vec![1.0, 3.0], vec![9.0, 9.0], vec![-4.0, 0.0]];
        assert_eq!(linear_average(&three, &[1.0, 0.0, 0.0]), three[0]);
    }

    #[test]
    fn average_hand_dot_product() {
        let thetas = vec![vec![2.0], vec![4.0], vec![6.0]];
        let out = linear_average(&thetas, &[0.2, 0.3, 0.5]);
        assert!((out[0] - 4.6).abs() < 1e-6);
    }

    #[test]
    fn slerp_endpoints_are_exact() {
        let a = vec![1.0f32, 2.0];
        let b = vec![-3.0f32, 0.5];
        assert_eq!(slerp_chain(&[a.clone(), b.clone()], 0.0, "g").unwrap(), a);
        assert_eq!(slerp_chain(&[a, b.clone()], 1.0, "g").unwrap(), b);
    }

    #[test]
    fn slerp_orthogonal_midpoint_lands_on_the_sphere() {
        let e1 = vec![1.0f32, 0.0];
        let e2 = vec![0.0f32, 1.0];
        let mid = slerp_chain(&[e1, e2], 0.5, "g").unwrap();
        let want = (2.0f64).sqrt() / 2.0;
        assert!((mid[0] as f64 - want).abs() < 1e-6);
        assert!((mid[1] as f64 - want).abs() < 1e-6);
        assert!((norm_of_slice(&mid) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn slerp_parallel_vectors_fall_back_to_linear() {
        let a = vec![1.0f32, 2.0, -0.5];
        let b: Vec<f32> = a.iter().map(|v| v * 1.0000001).collect();
        let out = slerp_chain(&[a.clone(), b], 0.5, "g").unwrap();
        for (x, y) in out.iter().zip(&a) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn slerp_zero_norm_group_is_degenerate() {
        let z = vec![0.0f32, 0.0];
        let b = vec![1.0f32, 0.0];
        assert!(matches!(
            slerp_chain(&[z, b], 0.5, "layers.1.weight"),
            Err(Error::DegenerateGeometry { .. })
        ));
    }

    #[test]
    fn metagpt_coefficients() {
        let (_, l, _) = metagpt(&[vec![1.0, 0.0]]);
        assert_eq!(l, vec![1.0]);

        let (_, l, _) = metagpt(&[vec![2.0], vec![-2.0]]);
        assert_eq!(l, vec![0.5, 0.5]);

        // ‖T₁‖² = 1, ‖T₂‖² = 3 → λ = (0.25, 0.75).
        let (_, l, _) = metagpt(&[vec![1.0], vec![3f32.sqrt()]]);
        assert!((l[0] - 0.25).abs() < 1e-6);
        assert!((l[1] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn metagpt_all_zero_warns_uniform() {
        let (merged, l, warned) = metagpt(&[vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert!(warned);
        assert_eq!(l, vec![0.5, 0.5]);
        assert_eq!(merged, vec![0.0, 0.0]);
    }

    fn seg(name: &str, offset: usize, len: usize, depth: usize) -> Segment {
        let _ = Role::Weight;
        Segment {
            name: name.into(),
            shape: vec![len],
            offset,
            len,
            depth,
        }
    }

    #[test]
    fn lines_default_ramp_over_four_depths() {
        let segments = vec![
            seg("a", 0, 1, 1),
            seg("b", 1, 1, 2),
            seg("c", 2, 1, 3),
            seg("d", 3, 1, 4),
        ];
        let deltas = vec![vec![1.0f32; 4]];
        let out = lines(&deltas, &[1.0], &segments, 4, 0.5, 0.5);
        let want = [0.5, 2.0 / 3.0, 5.0 / 6.0, 1.0];
        for (got, want) in out.iter().zip(want) {
            assert!((*got as f64 - want).abs() < 1e-6, "{got} vs {want}");
        }
    }

    #[test]
    fn lines_identity_and_single_depth() {
        let segments = vec![seg("a", 0, 2, 1)];
        let deltas = vec![vec![3.0f32, -1.0]];
        let identity = lines(&deltas, &[1.0], &segments, 4, 1.0, 0.0);
        assert_eq!(identity, deltas[0]);
        let single = lines(&deltas, &[1.0], &segments, 1, 0.5, 0.5);
        assert_eq!(single, deltas[0]);
    }
}
