//! Dense tensors and the numerical kernels every merging operator depends on.
//!
//! Storage is 32-bit row-major; every reduction (norms, inner products, matrix
//! products, SVD sweeps) accumulates in 64-bit. Merging operators only ever see
//! rank-1 tensors (biases) and rank-2 tensors (weight matrices).
//!
//! All kernels are pure functions on immutable inputs and safe to call from
//! many threads at once.

use crate::error::{Error, Result};

/// Relative cutoff under which a singular value counts as zero wherever a
/// rank decision is needed: s_i <= RANK_REL_TOL * s_0 is rank-deficient.
pub const RANK_REL_TOL: f64 = 1e-10;

/// Off-diagonal threshold at which Jacobi sweeps stop rotating a column pair.
const JACOBI_TOL: f64 = 1e-12;

/// Hard cap on Jacobi sweeps; desk-scale matrices converge in well under this.
const MAX_SWEEPS: usize = 64;

// ── Tensor ─────────────────────────────────────────────────────────────────

/// Dense row-major tensor of f32 values with an explicit shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    /// Builds a tensor, validating shape/length agreement and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::shape(format!("zero dimension in shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} implies {expected} elements, got {}",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::data(format!("non-finite value at flat index {pos}")));
        }
        Ok(Tensor { shape, data })
    }

    /// Builds from f64 working values, erroring if any rounds to non-finite f32.
    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        let narrowed: Vec<f32> = data.iter().map(|&v| v as f32).collect();
        Tensor::new(shape, narrowed)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; len],
        }
    }

    /// Identity matrix.
    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn is_vector(&self) -> bool {
        self.shape.len() == 1
    }

    /// Row count; errors unless rank-2.
    pub fn rows(&self) -> Result<usize> {
        self.require_matrix()?;
        Ok(self.shape[0])
    }

    /// Column count; errors unless rank-2.
    pub fn cols(&self) -> Result<usize> {
        self.require_matrix()?;
        Ok(self.shape[1])
    }

    pub fn require_matrix(&self) -> Result<()> {
        if !self.is_matrix() {
            return Err(Error::shape(format!(
                "expected a rank-2 tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }

    pub fn at(&self, i: usize, j: usize) -> f32 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f32) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (m, n) = (self.rows()?, self.cols()?);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::new(vec![n, m], out)
    }
}

// ── Matrix products (f64 accumulation) ─────────────────────────────────────

/// a (m×k) · b (k×n) with 64-bit accumulators.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows()?, a.cols()?);
    let (kb, n) = (b.rows()?, b.cols()?);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul inner dims disagree: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        for p in 0..ka {
            let aip = a.data[i * ka + p] as f64;
            if aip == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j] as f64;
            }
        }
    }
    Tensor::from_f64(vec![m, n], &out)
}

/// a (m×k) · bᵀ where b is (n×k).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, ka) = (a.rows()?, a.cols()?);
    let (n, kb) = (b.rows()?, b.cols()?);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul_nt inner dims disagree: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0f64; m * n];
    for i in 0..m {
        let arow = &a.data[i * ka..(i + 1) * ka];
        for j in 0..n {
            let brow = &b.data[j * kb..(j + 1) * kb];
            let mut acc = 0.0f64;
            for p in 0..ka {
                acc += arow[p] as f64 * brow[p] as f64;
            }
            out[i * n + j] = acc;
        }
    }
    Tensor::from_f64(vec![m, n], &out)
}

/// aᵀ · b where a is (k×m) and b is (k×n).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (ka, m) = (a.rows()?, a.cols()?);
    let (kb, n) = (b.rows()?, b.cols()?);
    if ka != kb {
        return Err(Error::shape(format!(
            "matmul_tn leading dims disagree: {ka} vs {kb}"
        )));
    }
    let mut out = vec![0.0f64; m * n];
    for p in 0..ka {
        let arow = &a.data[p * m..(p + 1) * m];
        let brow = &b.data[p * n..(p + 1) * n];
        for i in 0..m {
            let api = arow[i] as f64;
            if api == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += api * brow[j] as f64;
            }
        }
    }
    Tensor::from_f64(vec![m, n], &out)
}

// ── Norms ──────────────────────────────────────────────────────────────────

/// √(∑ v²) accumulated in 64-bit; defined for any tensor.
pub fn frobenius_norm(t: &Tensor) -> f64 {
    norm_of_slice(t.data())
}

pub fn norm_of_slice(values: &[f32]) -> f64 {
    values
        .iter()
        .map(|&v| {
            let v = v as f64;
            v * v
        })
        .sum::<f64>()
        .sqrt()
}

/// ∑ aᵢbᵢ in 64-bit.
pub fn dot_of_slices(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| x as f64 * y as f64)
        .sum()
}

// ── SVD ────────────────────────────────────────────────────────────────────

/// Thin SVD: u (m×k) and v (n×k) have orthonormal columns, s is descending
/// and non-negative, k = min(m, n), and u·diag(s)·vᵀ reconstructs the input.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: Tensor,
    pub s: Tensor,
    pub v: Tensor,
}

impl SvdResult {
    /// Count of singular values above the RANK_REL_TOL cutoff.
    pub fn numerical_rank(&self) -> usize {
        numerical_rank(self.s.data())
    }
}

/// Numerical rank of a descending singular-value list under the relative cutoff.
pub fn numerical_rank(s: &[f32]) -> usize {
    if s.is_empty() {
        return 0;
    }
    let s0 = s[0] as f64;
    if s0 <= 0.0 {
        return 0;
    }
    s.iter()
        .take_while(|&&v| v as f64 > RANK_REL_TOL * s0)
        .count()
}

/// Full thin SVD of a rank-2 tensor by one-sided Jacobi rotations.
///
/// Deterministic for identical input bytes: sweeps walk column pairs in a
/// fixed order and stop once every off-diagonal rotation falls below 1e-12.
pub fn svd(a: &Tensor) -> Result<SvdResult> {
    a.require_matrix()?;
    let (m, n) = (a.rows()?, a.cols()?);
    if m >= n {
        svd_tall(a, m, n)
    } else {
        let t = a.transpose()?;
        let r = svd_tall(&t, n, m)?;
        Ok(SvdResult {
            u: r.v,
            s: r.s,
            v: r.u,
        })
    }
}

fn svd_tall(a: &Tensor, m: usize, n: usize) -> Result<SvdResult> {
    // Column-major f64 working copies: u starts as the input, v as identity.
    let mut u: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..m).map(|i| a.data[i * n + j] as f64).collect())
        .collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();

    for _sweep in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let app = col_dot(&u[p], &u[p]);
                let aqq = col_dot(&u[q], &u[q]);
                let apq = col_dot(&u[p], &u[q]);
                if apq == 0.0 || apq.abs() <= JACOBI_TOL * (app * aqq).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = if zeta >= 0.0 {
                    1.0 / (zeta + (1.0 + zeta * zeta).sqrt())
                } else {
                    -1.0 / (-zeta + (1.0 + zeta * zeta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_pair(&mut u, p, q, c, s);
                rotate_pair(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    // Singular values are the column norms; normalize the nonzero columns.
    let mut sv: Vec<f64> = u.iter().map(|col| col_dot(col, col).sqrt()).collect();
    let smax = sv.iter().cloned().fold(0.0f64, f64::max);
    let zero_cut = smax * 1e-30;
    for j in 0..n {
        if sv[j] > zero_cut && sv[j] > 0.0 {
            for x in u[j].iter_mut() {
                *x /= sv[j];
            }
        } else {
            sv[j] = 0.0;
            for x in u[j].iter_mut() {
                *x = 0.0;
            }
        }
    }

    // Stable descending order by singular value.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap().then(i.cmp(&j)));
    let u: Vec<Vec<f64>> = order.iter().map(|&j| u[j].clone()).collect();
    let v: Vec<Vec<f64>> = order.iter().map(|&j| v[j].clone()).collect();
    let sv: Vec<f64> = order.iter().map(|&j| sv[j]).collect();

    // Zero singular values leave zero u columns; fill in an orthonormal
    // completion from standard basis vectors so uᵀu = I holds exactly.
    let mut u = u;
    for j in 0..n {
        if sv[j] == 0.0 {
            u[j] = complete_column(&u, j, m);
        }
    }

    let mut u_flat = vec![0.0f32; m * n];
    let mut v_flat = vec![0.0f32; n * n];
    for j in 0..n {
        for i in 0..m {
            u_flat[i * n + j] = u[j][i] as f32;
        }
        for i in 0..n {
            v_flat[i * n + j] = v[j][i] as f32;
        }
    }
    Ok(SvdResult {
        u: Tensor::new(vec![m, n], u_flat)?,
        s: Tensor::new(vec![n], sv.iter().map(|&x| x as f32).collect())?,
        v: Tensor::new(vec![n, n], v_flat)?,
    })
}

fn col_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn rotate_pair(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let len = cols[p].len();
    for i in 0..len {
        let xp = cols[p][i];
        let xq = cols[q][i];
        cols[p][i] = c * xp - s * xq;
        cols[q][i] = s * xp + c * xq;
    }
}

/// First standard basis vector that survives Gram-Schmidt against the
/// existing columns; deterministic and always succeeds for j < m.
fn complete_column(cols: &[Vec<f64>], skip: usize, m: usize) -> Vec<f64> {
    for cand in 0..m {
        let mut w = vec![0.0f64; m];
        w[cand] = 1.0;
        for (j, col) in cols.iter().enumerate() {
            if j == skip {
                continue;
            }
            let proj = col_dot(&w, col);
            if proj != 0.0 {
                for i in 0..m {
                    w[i] -= proj * col[i];
                }
            }
        }
        let norm = col_dot(&w, &w).sqrt();
        if norm > 0.5 {
            for x in w.iter_mut() {
                *x /= norm;
            }
            return w;
        }
    }
    // Unreachable: m basis vectors cannot all lie in a subspace of dim < m.
    vec![0.0; m]
}

// ── SPD solve ──────────────────────────────────────────────────────────────

/// Solves a·x = b for symmetric positive-definite a via Cholesky, narrowing
/// the 64-bit solution to tensor storage. The full-precision solution is
/// available from [`solve_spd_f64`].
pub fn solve_spd(a: &Tensor, b: &Tensor, label: &str) -> Result<Tensor> {
    let x = solve_spd_f64(a, b, label)?;
    Tensor::from_f64(vec![a.rows()?, b.cols()?], &x)
}

/// Solves a·x = b for symmetric positive-definite a via Cholesky in 64-bit.
///
/// If factorization hits a non-positive pivot, the diagonal is jittered by
/// 1e-8·trace(a)/n and the factorization retried, escalating tenfold for at
/// most 3 retries. `label` names the tensor in the singularity error.
pub fn solve_spd_f64(a: &Tensor, b: &Tensor, label: &str) -> Result<Vec<f64>> {
    let n = a.rows()?;
    if a.cols()? != n {
        return Err(Error::shape(format!(
            "solve_spd needs a square matrix, got {:?}",
            a.shape()
        )));
    }
    let (bn, p) = (b.rows()?, b.cols()?);
    if bn != n {
        return Err(Error::shape(format!(
            "solve_spd rhs has {bn} rows but the system is {n}×{n}"
        )));
    }
    let amax = a
        .data()
        .iter()
        .fold(0.0f64, |acc, &v| acc.max(v.abs() as f64));
    for i in 0..n {
        for j in (i + 1)..n {
            if (a.at(i, j) as f64 - a.at(j, i) as f64).abs() > 1e-6 * amax.max(1.0) {
                return Err(Error::shape(format!(
                    "solve_spd input '{label}' is not symmetric at ({i},{j})"
                )));
            }
        }
    }

    let trace: f64 = (0..n).map(|i| a.at(i, i) as f64).sum();
    let base_jitter = 1e-8 * trace / n as f64;
    let mut jitter = 0.0f64;
    for attempt in 0..4 {
        if attempt > 0 {
            jitter = base_jitter * 10f64.powi(attempt - 1);
        }
        if let Some(l) = cholesky(a, n, jitter) {
            let mut x = vec![0.0f64; n * p];
            for col in 0..p {
                // Forward substitution: L y = b.
                let mut y = vec![0.0f64; n];
                for i in 0..n {
                    let mut acc = b.at(i, col) as f64;
                    for k in 0..i {
                        acc -= l[i * n + k] * y[k];
                    }
                    y[i] = acc / l[i * n + i];
                }
                // Back substitution: Lᵀ x = y.
                for i in (0..n).rev() {
                    let mut acc = y[i];
                    for k in (i + 1)..n {
                        acc -= l[k * n + i] * x[k * p + col];
                    }
                    x[i * p + col] = acc / l[i * n + i];
                }
            }
            return Ok(x);
        }
    }
    Err(Error::Singular {
        tensor: label.to_string(),
    })
}

fn cholesky(a: &Tensor, n: usize, jitter: f64) -> Option<Vec<f64>> {
    let mut l = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut acc = a.at(i, j) as f64;
            if i == j {
                acc += jitter;
            }
            for k in 0..j {
                acc -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if acc <= 0.0 || !acc.is_finite() {
                    return None;
                }
                l[i * n + i] = acc.sqrt();
            } else {
                l[i * n + j] = acc / l[j * n + j];
            }
        }
    }
    Some(l)
}

// ── Deterministic RNG ──────────────────────────────────────────────────────

/// SplitMix64: the 64-bit mixing generator of Steele, Lea & Flood.
///
/// Identical seeds yield identical streams on every platform; all stochastic
/// masks and synthetic data in this crate derive from it.
#[derive(Debug, Clone)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        SplitMix64 { state: seed }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(0x9E3779B97F4A7C15);
        let mut z = self.state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }

    /// Uniform f64 in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform f64 in (0, 1]; safe as a logarithm argument.
    fn uniform_open(&mut self) -> f64 {
        ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Standard normal via the Box-Muller transform (pairs; the sine half
    /// is kept in reserve so consecutive draws stay cheap).
    pub fn gaussian(&mut self) -> f64 {
        let u1 = self.uniform_open();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Uniform index in [0, bound) by rejection; unbiased.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let bound = bound as u64;
        let zone = u64::MAX - (u64::MAX % bound);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % bound) as usize;
            }
        }
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Standard-normal tensor from the SplitMix64 stream for `seed`, via the
/// Box-Muller transform. Identical (seed, shape) pairs produce
/// bitwise-identical outputs for a given build: the uniform stream is
/// integer-exact everywhere, and the transform's ln/cos come from the
/// platform math library.
pub fn gaussian(seed: u64, shape: &[usize]) -> Tensor {
    let len: usize = shape.iter().product();
    let mut rng = SplitMix64::new(seed);
    let data: Vec<f32> = (0..len).map(|_| rng.gaussian() as f32).collect();
    Tensor {
        shape: shape.to_vec(),
        data,
    }
}

/// Derives an independent substream seed from a parent seed, a lane index,
/// and a textual key (FNV-1a over the key, SplitMix64-mixed).
pub fn stream_seed(seed: u64, lane: u64, key: &str) -> u64 {
    let mut h: u64 = 0xCBF29CE484222325;
    for b in key.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001B3);
    }
    let mut mixer =
        SplitMix64::new(seed ^ h.rotate_left(17) ^ lane.wrapping_mul(0x9E3779B97F4A7C15));
    mixer.next_u64()
}
