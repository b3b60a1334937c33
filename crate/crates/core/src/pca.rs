//! One-stage PCA with DC/AC split: whitening (forward), coloring (inverse) and
//! the semi-log energy curve with its turning points.

use crate::error::{Error, Result};
use crate::linalg::{correlation_matrix, dot, eig_sym, fit_line, fix_sign, SymMatrix};

/// AC correlation entries at or below this magnitude count as no AC energy.
const DEGENERATE_TOL: f64 = 1e-24;

/// A fitted DC kernel plus descending-energy AC kernels.
///
/// The inverse transform uses the transposed forward kernels, which is the
/// least-squares optimal inverse for an orthonormal basis.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaBasis {
    dim: usize,
    ac_kernels: Vec<Vec<f64>>,
    /// Full AC spectrum e_1..e_{N-1}, independent of how many kernels are kept.
    eigenvalues: Vec<f64>,
}

/// DC projection followed by the retained AC projections.
#[derive(Debug, Clone, PartialEq)]
pub struct Coefficients(pub Vec<f64>);

impl Coefficients {
    pub fn dc(&self) -> f64 {
        self.0[0]
    }

    pub fn ac(&self) -> &[f64] {
        &self.0[1..]
    }
}

impl PcaBasis {
    /// Reassembles a basis from stored parts, checking shapes.
    pub fn from_parts(
        dim: usize,
        ac_kernels: Vec<Vec<f64>>,
        eigenvalues: Vec<f64>,
    ) -> Result<Self> {
        if dim < 2 || eigenvalues.len() != dim - 1 || ac_kernels.len() > dim - 1 {
            return Err(Error::shape(
                format!("dim {dim} with {} eigenvalues", dim.saturating_sub(1)),
                format!("{} eigenvalues, {} kernels", eigenvalues.len(), ac_kernels.len()),
            ));
        }
        if let Some(k) = ac_kernels.iter().find(|k| k.len() != dim) {
            return Err(Error::shape(dim, k.len()));
        }
        Ok(Self {
            dim,
            ac_kernels,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of retained AC kernels.
    pub fn kept(&self) -> usize {
        self.ac_kernels.len()
    }

    pub fn ac_kernels(&self) -> &[Vec<f64>] {
        &self.ac_kernels
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn dc_kernel(&self) -> Vec<f64> {
        vec![self.dc_weight(); self.dim]
    }

    fn dc_weight(&self) -> f64 {
        1.0 / (self.dim as f64).sqrt()
    }

    /// Keeps only the first `m` AC kernels; `m = 0` leaves a DC-only basis.
    pub fn truncated(&self, m: usize) -> Result<PcaBasis> {
        if m > self.kept() {
            return Err(Error::InvalidParameter(format!(
                "cannot keep {m} of {} kernels",
                self.kept()
            )));
        }
        Ok(PcaBasis {
            dim: self.dim,
            ac_kernels: self.ac_kernels[..m].to_vec(),
            eigenvalues: self.eigenvalues.clone(),
        })
    }

    /// Projections p_0 (DC) and p_1..p_M.
    pub fn forward(&self, f: &[f64]) -> Result<Coefficients> {
        if f.len() != self.dim {
            return Err(Error::shape(self.dim, f.len()));
        }
        let mut p = Vec::with_capacity(self.kept() + 1);
        p.push(self.dc_weight() * f.iter().sum::<f64>());
        p.extend(self.ac_kernels.iter().map(|a| dot(a, f)));
        Ok(Coefficients(p))
    }

    /// p_0·dc + Σ p_i·a_i.
    pub fn inverse(&self, c: &Coefficients) -> Result<Vec<f64>> {
        if c.0.len() != self.kept() + 1 {
            return Err(Error::shape(self.kept() + 1, c.0.len()));
        }
        let mut f = vec![c.0[0] * self.dc_weight(); self.dim];
        for (a, &p) in self.ac_kernels.iter().zip(&c.0[1..]) {
            for (x, k) in f.iter_mut().zip(a) {
                *x += p * k;
            }
        }
        Ok(f)
    }
}

/// Removes the DC component: f − (f·dc)·dc.
pub fn ac_part(f: &[f64]) -> Vec<f64> {
    let mean = f.iter().sum::<f64>() / f.len() as f64;
    f.iter().map(|x| x - mean).collect()
}

/// Orthonormal basis of the AC subspace (Helmert contrasts), one vector per entry.
fn helmert_basis(n: usize) -> Vec<Vec<f64>> {
    (1..n)
        .map(|k| {
            let scale = 1.0 / ((k * (k + 1)) as f64).sqrt();
            let mut q = vec![0.0; n];
            q[..k].iter_mut().for_each(|x| *x = scale);
            q[k] = -(k as f64) * scale;
            q
        })
        .collect()
}

/// Fits the AC kernels from the correlation matrix of the AC parts of `vectors`
/// and keeps the leading `m` of them.
///
/// The eigenproblem is solved inside the AC subspace, so every kernel is exactly
/// orthogonal to the DC kernel even when the AC spectrum has repeated zeros.
pub fn fit_pca<V: AsRef<[f64]>>(vectors: &[V], m: usize) -> Result<PcaBasis> {
    let n = vectors
        .first()
        .ok_or(Error::Empty("PCA training vectors"))?
        .as_ref()
        .len();
    if n < 2 || m == 0 || m > n - 1 {
        return Err(Error::InvalidParameter(format!(
            "retained kernel count {m} must lie in 1..={}",
            n.saturating_sub(1)
        )));
    }
    let acs: Vec<Vec<f64>> = vectors
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let v = v.as_ref();
            if v.len() != n {
                return Err(Error::Ragged {
                    index,
                    expected: n,
                    found: v.len(),
                });
            }
            Ok(ac_part(v))
        })
        .collect::<Result<_>>()?;
    let r = correlation_matrix(&acs)?;
    let scale = vectors
        .iter()
        .flat_map(|v| v.as_ref().iter())
        .fold(0.0f64, |m, x| m.max(x * x));
    if r.max_abs() <= DEGENERATE_TOL * scale || r.max_abs() <= f64::MIN_POSITIVE {
        return Err(Error::DegenerateData);
    }
    let mut basis = PcaBasis::in_ac_subspace(&r)?;
    basis.ac_kernels.truncate(m);
    Ok(basis)
}

impl PcaBasis {
    /// Full-rank decomposition of an AC correlation matrix.
    fn in_ac_subspace(r: &SymMatrix) -> Result<PcaBasis> {
        let n = r.order();
        let q = helmert_basis(n);
        let rq: Vec<Vec<f64>> = q.iter().map(|col| r.mul_vec(col)).collect();
        let mut reduced = SymMatrix::zeros(n - 1);
        for i in 0..n - 1 {
            for j in i..n - 1 {
                reduced.set(i, j, dot(&q[i], &rq[j]));
            }
        }
        let eig = eig_sym(&reduced)?;
        let ac_kernels = eig
            .eigenvectors
            .iter()
            .map(|u| {
                let mut a = vec![0.0; n];
                for (qk, &uk) in q.iter().zip(u) {
                    for (x, &y) in a.iter_mut().zip(qk) {
                        *x += uk * y;
                    }
                }
                fix_sign(&mut a);
                a
            })
            .collect();
        Ok(PcaBasis {
            dim: n,
            ac_kernels,
            eigenvalues: eig.eigenvalues,
        })
    }

    /// Basis for data without any AC energy: fixed Helmert kernels, zero spectrum.
    pub fn degenerate(n: usize) -> Result<PcaBasis> {
        if n < 2 {
            return Err(Error::InvalidParameter(format!("dimension {n} < 2")));
        }
        PcaBasis::in_ac_subspace(&SymMatrix::zeros(n))
    }
}

/// Normalised spectrum with detected turning points (1-based component indices).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCurve {
    pub ratios: Vec<f64>,
    pub turning_points: Vec<usize>,
}

impl EnergyCurve {
    /// Normalises a descending spectrum; negative rounding noise is clamped to 0.
    pub fn from_eigenvalues(eigenvalues: &[f64]) -> Result<Self> {
        let clamped: Vec<f64> = eigenvalues.iter().map(|e| e.max(0.0)).collect();
        let total: f64 = clamped.iter().sum();
        if !(total > 0.0) {
            return Err(Error::ZeroEnergy);
        }
        Ok(Self {
            ratios: clamped.iter().map(|e| e / total).collect(),
            turning_points: Vec::new(),
        })
    }

    pub fn is_turning_point(&self, index: usize) -> bool {
        self.turning_points.contains(&index)
    }
}

/// Parameters of the greedy sector scan.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TurningPointParams {
    /// Leading points fitted before the first deviation test of a sector.
    pub min_window: usize,
    /// Allowed |log10 r − fit| before a sector closes.
    pub tolerance: f64,
    pub max_points: usize,
    /// Ratios are floored here before taking log10.
    pub floor: f64,
}

impl Default for TurningPointParams {
    fn default() -> Self {
        Self {
            min_window: 4,
            tolerance: 0.15,
            max_points: 4,
            floor: 1e-300,
        }
    }
}

/// Energy curve of a basis with turning points detected under `params`.
pub fn energy_curve(basis: &PcaBasis, params: &TurningPointParams) -> Result<EnergyCurve> {
    let mut curve = EnergyCurve::from_eigenvalues(basis.eigenvalues())?;
    curve.turning_points = detect_turning_points(&curve, params)?;
    Ok(curve)
}

/// Greedy sector scan over log10 ratios.
///
/// A sector starts with `min_window` points; a least-squares line is fitted to
/// the points seen so far and the next point is tested against it. The first
/// point deviating by more than `tolerance` is a turning point and starts the
/// next sector. Indices are 1-based component numbers.
pub fn detect_turning_points(curve: &EnergyCurve, params: &TurningPointParams) -> Result<Vec<usize>> {
    let window = params.min_window.max(2);
    let needed = window.max(8);
    if curve.ratios.len() < needed {
        return Err(Error::TooFewPoints {
            needed,
            found: curve.ratios.len(),
        });
    }
    let logs: Vec<f64> = curve
        .ratios
        .iter()
        .map(|r| r.max(params.floor).log10())
        .collect();
    let n = logs.len();
    let mut points = Vec::new();
    let mut start = 0;
    while points.len() < params.max_points && start + window < n {
        let mut end = start + window;
        let mut found = None;
        while end < n {
            let pts: Vec<(f64, f64)> = (start..end).map(|i| (i as f64, logs[i])).collect();
            let (slope, intercept) = fit_line(&pts)?;
            if (logs[end] - (slope * end as f64 + intercept)).abs() > params.tolerance {
                found = Some(end);
                break;
            }
            end += 1;
        }
        match found {
            Some(i) => {
                points.push(i + 1);
                start = i;
            }
            None => break,
        }
    }
    Ok(points)
}
