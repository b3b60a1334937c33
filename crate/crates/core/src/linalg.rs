//! Dense symmetric linear algebra, line fitting and the seeded random stream.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Sweep cap for the Jacobi eigensolver.
pub const MAX_SWEEPS: usize = 100;
/// Convergence threshold on the off-diagonal Frobenius norm, relative to ‖R‖_F.
pub const OFF_DIAGONAL_TOL: f64 = 1e-12;

/// Square symmetric matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    order: usize,
    entries: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(order: usize) -> Self {
        Self {
            order,
            entries: vec![0.0; order * order],
        }
    }

    pub fn identity(order: usize) -> Self {
        let mut m = Self::zeros(order);
        for i in 0..order {
            m.entries[i * order + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from row-major entries, mirroring the upper triangle so
    /// the result is exactly symmetric.
    pub fn from_upper(order: usize, entries: &[f64]) -> Result<Self> {
        if entries.len() != order * order {
            return Err(Error::shape(order * order, entries.len()));
        }
        let mut m = Self::zeros(order);
        for i in 0..order {
            for j in i..order {
                m.set(i, j, entries[i * order + j]);
            }
        }
        Ok(m)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.entries[i * self.order + j]
    }

    /// Sets both (i, j) and (j, i).
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.entries[i * self.order + j] = v;
        self.entries[j * self.order + i] = v;
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn trace(&self) -> f64 {
        (0..self.order).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn frobenius(&self) -> f64 {
        self.entries.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        self.entries
            .chunks_exact(self.order)
            .map(|row| dot(row, v))
            .collect()
    }
}

/// Eigenpairs sorted by descending eigenvalue.
#[derive(Debug, Clone, PartialEq)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    /// `eigenvectors[i]` pairs with `eigenvalues[i]`.
    pub eigenvectors: Vec<Vec<f64>>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Second-moment matrix (1/S)·Σ f fᵀ, no mean subtraction.
pub fn correlation_matrix<V: AsRef<[f64]>>(vectors: &[V]) -> Result<SymMatrix> {
    let first = vectors.first().ok_or(Error::Empty("correlation input"))?;
    let n = first.as_ref().len();
    let mut acc = vec![0.0; n * n];
    for (index, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != n {
            return Err(Error::Ragged {
                index,
                expected: n,
                found: v.len(),
            });
        }
        for i in 0..n {
            let vi = v[i];
            if vi == 0.0 {
                continue;
            }
            let row = &mut acc[i * n..(i + 1) * n];
            for j in i..n {
                row[j] += vi * v[j];
            }
        }
    }
    let inv = 1.0 / vectors.len() as f64;
    let mut m = SymMatrix::zeros(n);
    for i in 0..n {
        for j in i..n {
            m.set(i, j, acc[i * n + j] * inv);
        }
    }
    Ok(m)
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Eigenvalues come back in descending order (stable with respect to the
/// solver's diagonal order on ties). Each eigenvector is normalised so that its
/// largest-magnitude component is positive, the first such index winning ties.
pub fn eig_sym(m: &SymMatrix) -> Result<EigenDecomposition> {
    let n = m.order;
    for i in 0..n {
        for j in 0..n {
            if !m.get(i, j).is_finite() {
                return Err(Error::NonFinite(i, j));
            }
        }
    }
    let mut a = m.entries.clone();
    // v is stored row-major with eigenvectors in columns
    let mut v = SymMatrix::identity(n).entries;
    let target = OFF_DIAGONAL_TOL * m.frobenius();

    let off_norm = |a: &[f64]| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += a[i * n + j] * a[i * n + j];
            }
        }
        (2.0 * s).sqrt()
    };

    let mut converged = n < 2;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        if off_norm(&a) <= target {
            converged = true;
            break;
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                rotate(&mut a, n, p, q, c, s);
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    if !converged {
        let off = off_norm(&a);
        if off > target {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: off,
            });
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]));
    let eigenvalues = order.iter().map(|&i| a[i * n + i]).collect();
    let eigenvectors = order
        .iter()
        .map(|&col| {
            let mut vec: Vec<f64> = (0..n).map(|row| v[row * n + col]).collect();
            fix_sign(&mut vec);
            vec
        })
        .collect();
    Ok(EigenDecomposition {
        eigenvalues,
        eigenvectors,
    })
}

/// Applies the (p, q) plane rotation to the off-diagonal rows and columns of `a`.
fn rotate(a: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    for k in 0..n {
        if k == p || k == q {
            continue;
        }
        let akp = a[k * n + p];
        let akq = a[k * n + q];
        let new_p = c * akp - s * akq;
        let new_q = s * akp + c * akq;
        a[k * n + p] = new_p;
        a[p * n + k] = new_p;
        a[k * n + q] = new_q;
        a[q * n + k] = new_q;
    }
}

pub(crate) fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Ordinary least squares line through `points`, returned as (slope, intercept).
pub fn fit_line(points: &[(f64, f64)]) -> Result<(f64, f64)> {
    if points.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: points.len(),
        });
    }
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let (mut sxx, mut sxy) = (0.0, 0.0);
    for &(x, y) in points {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    if sxx == 0.0 {
        return Err(Error::DegenerateAbscissa(points.len()));
    }
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// Deterministic 64-bit seeded stream (ChaCha8).
///
/// Independent substreams are derived with [`SeededRng::fork`], which mixes the
/// parent seed with a label through SplitMix64, so training of separate
/// positions, trees and classes never shares random state.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Substream keyed by `label`; independent of how much of `self` was consumed.
    pub fn fork(&self, label: u64) -> SeededRng {
        SeededRng::new(splitmix64(self.seed ^ splitmix64(label.wrapping_add(1))))
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// One draw from N(mean, std²).
pub fn gaussian(rng: &mut SeededRng, mean: f64, std: f64) -> Result<f64> {
    if !(std >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "standard deviation must be non-negative, got {std}"
        )));
    }
    let z: f64 = rng.sample(StandardNormal);
    Ok(mean + std * z)
}
