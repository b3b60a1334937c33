//! Latent statistics, k-means clustering and the two outlier rules used when
//! drawing stage-2 latent vectors.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::{gaussian, SeededRng};

pub const KMEANS_MAX_ITERATIONS: usize = 300;

/// Per-dimension mean and population standard deviation.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

pub fn fit_stats<V: AsRef<[f64]>>(coeffs: &[V]) -> Result<GaussianStats> {
    if coeffs.len() < 2 {
        return Err(Error::TooFewPoints {
            needed: 2,
            found: coeffs.len(),
        });
    }
    let k = coeffs[0].as_ref().len();
    let n = coeffs.len() as f64;
    let mut mean = vec![0.0; k];
    for (index, c) in coeffs.iter().enumerate() {
        let c = c.as_ref();
        if c.len() != k {
            return Err(Error::Ragged {
                index,
                expected: k,
                found: c.len(),
            });
        }
        mean.iter_mut().zip(c).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; k];
    for c in coeffs {
        for ((v, x), m) in var.iter_mut().zip(c.as_ref()).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let std = var.iter().map(|v| (v / n).sqrt()).collect();
    Ok(GaussianStats { mean, std })
}

/// Inlier iff every coordinate lies within 3σ of its mean. A σ = 0 dimension
/// accepts only its exact mean.
pub fn is_outlier_zscore(stats: &GaussianStats, c: &[f64]) -> bool {
    c.iter()
        .zip(stats.mean.iter().zip(&stats.std))
        .any(|(x, (m, s))| !((x - m).abs() <= 3.0 * s))
}

/// k-means centroids with the per-cluster mean squared distance of members.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterModel {
    pub centroids: Vec<Vec<f64>>,
    pub mse: Vec<f64>,
    pub sizes: Vec<usize>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl ClusterModel {
    /// Index of the nearest centroid and its squared distance; lowest index on ties.
    pub fn nearest(&self, c: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, c)
    }
}

fn nearest(centroids: &[Vec<f64>], c: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(c, centroid);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// Total within-cluster sum of squared distances.
pub fn within_sse<V: AsRef<[f64]>>(points: &[V], centroids: &[Vec<f64>], labels: &[usize]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &l)| sq_dist(p.as_ref(), &centroids[l]))
        .sum()
}

fn kmeans_plus_plus<V: AsRef<[f64]>>(points: &[V], k: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].as_ref().to_vec()];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| sq_dist(p.as_ref(), &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].as_ref().to_vec();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p.as_ref(), &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Result of a Lloyd run, kept for inspection in tests.
#[derive(Debug, Clone)]
pub struct LloydTrace {
    pub labels: Vec<usize>,
    /// Objective after each assignment step.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

/// k-means++ seeding followed by Lloyd iterations until the assignment stops
/// changing or [`KMEANS_MAX_ITERATIONS`] is reached. An emptied cluster is
/// re-seeded at the point farthest from its current centroid.
pub fn fit_clusters_traced<V: AsRef<[f64]>>(
    coeffs: &[V],
    k: usize,
    rng: &mut SeededRng,
) -> Result<(ClusterModel, LloydTrace)> {
    if k == 0 {
        return Err(Error::InvalidParameter("k must be at least 1".into()));
    }
    if coeffs.len() < k {
        return Err(Error::InvalidParameter(format!(
            "k = {k} exceeds {} samples",
            coeffs.len()
        )));
    }
    let dim = coeffs[0].as_ref().len();
    if let Some((index, c)) = coeffs.iter().enumerate().find(|(_, c)| c.as_ref().len() != dim) {
        return Err(Error::Ragged {
            index,
            expected: dim,
            found: c.as_ref().len(),
        });
    }

    let mut centroids = kmeans_plus_plus(coeffs, k, rng);
    let mut labels: Vec<usize> = vec![usize::MAX; coeffs.len()];
    let mut objective = Vec::new();
    let mut iterations = 0;
    loop {
        let mut changed = false;
        for (l, p) in labels.iter_mut().zip(coeffs) {
            let (best, _) = nearest(&centroids, p.as_ref());
            if *l != best {
                *l = best;
                changed = true;
            }
        }
        reseed_empty(coeffs, &mut centroids, &mut labels);
        objective.push(within_sse(coeffs, &centroids, &labels));
        if !changed || iterations >= KMEANS_MAX_ITERATIONS {
            break;
        }
        iterations += 1;
        centroids = cluster_means(coeffs, &labels, k, dim);
    }

    let centroids = cluster_means(coeffs, &labels, k, dim);
    let mut mse = vec![0.0; k];
    let mut sizes = vec![0usize; k];
    for (p, &l) in coeffs.iter().zip(&labels) {
        mse[l] += sq_dist(p.as_ref(), &centroids[l]);
        sizes[l] += 1;
    }
    for (m, &s) in mse.iter_mut().zip(&sizes) {
        *m /= s as f64;
    }
    Ok((
        ClusterModel {
            centroids,
            mse,
            sizes,
        },
        LloydTrace {
            labels,
            objective,
            iterations,
        },
    ))
}

pub fn fit_clusters<V: AsRef<[f64]>>(coeffs: &[V], k: usize, rng: &mut SeededRng) -> Result<ClusterModel> {
    fit_clusters_traced(coeffs, k, rng).map(|(m, _)| m)
}

fn cluster_means<V: AsRef<[f64]>>(points: &[V], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        sums[l].iter_mut().zip(p.as_ref()).for_each(|(s, x)| *s += x);
        counts[l] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|x| *x /= c as f64);
    }
    sums
}

/// Moves the farthest point (from its own centroid) into each empty cluster.
fn reseed_empty<V: AsRef<[f64]>>(points: &[V], centroids: &mut [Vec<f64>], labels: &mut [usize]) {
    let k = centroids.len();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let far = points
            .iter()
            .enumerate()
            .filter(|(i, _)| counts[labels[*i]] > 1)
            .map(|(i, p)| (i, sq_dist(p.as_ref(), &centroids[labels[i]])))
            .fold((usize::MAX, -1.0), |b, x| if x.1 > b.1 { x } else { b });
        if far.0 == usize::MAX {
            return;
        }
        centroids[empty] = points[far.0].as_ref().to_vec();
        labels[far.0] = empty;
    }
}

/// Outlier iff the squared distance to the nearest centroid exceeds that
/// cluster's MSE.
pub fn is_outlier_cluster(model: &ClusterModel, c: &[f64]) -> bool {
    let (k, d) = model.nearest(c);
    d > model.mse[k]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutlierMethod {
    #[default]
    ZScore,
    Cluster,
    /// Z-score test, then the cluster test.
    Both,
    None,
}

impl OutlierMethod {
    pub fn is_outlier(self, stats: &GaussianStats, clusters: &ClusterModel, c: &[f64]) -> bool {
        match self {
            OutlierMethod::ZScore => is_outlier_zscore(stats, c),
            OutlierMethod::Cluster => is_outlier_cluster(clusters, c),
            OutlierMethod::Both => is_outlier_zscore(stats, c) || is_outlier_cluster(clusters, c),
            OutlierMethod::None => false,
        }
    }

    pub fn code(self) -> u8 {
        match self {
            OutlierMethod::ZScore => 0,
            OutlierMethod::Cluster => 1,
            OutlierMethod::Both => 2,
            OutlierMethod::None => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => OutlierMethod::ZScore,
            1 => OutlierMethod::Cluster,
            2 => OutlierMethod::Both,
            3 => OutlierMethod::None,
            _ => return None,
        })
    }
}

impl FromStr for OutlierMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zscore" => Ok(OutlierMethod::ZScore),
            "cluster" => Ok(OutlierMethod::Cluster),
            "both" => Ok(OutlierMethod::Both),
            "none" => Ok(OutlierMethod::None),
            other => Err(Error::InvalidParameter(format!(
                "unknown outlier method {other:?}"
            ))),
        }
    }
}

impl fmt::Display for OutlierMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OutlierMethod::ZScore => "zscore",
            OutlierMethod::Cluster => "cluster",
            OutlierMethod::Both => "both",
            OutlierMethod::None => "none",
        })
    }
}

/// An accepted latent vector and the number of draws it took.
#[derive(Debug, Clone, PartialEq)]
pub struct InlierDraw {
    pub vector: Vec<f64>,
    pub attempts: usize,
}

/// Draws independent N(μ_j, σ_j²) vectors until one passes `method`.
pub fn draw_inlier(
    stats: &GaussianStats,
    clusters: &ClusterModel,
    rng: &mut SeededRng,
    method: OutlierMethod,
    max_attempts: usize,
) -> Result<InlierDraw> {
    let mut vector = vec![0.0; stats.dim()];
    for attempt in 1..=max_attempts {
        for (v, (&m, &s)) in vector.iter_mut().zip(stats.mean.iter().zip(&stats.std)) {
            *v = gaussian(rng, m, s)?;
        }
        if !method.is_outlier(stats, clusters, &vector) {
            return Ok(InlierDraw {
                vector,
                attempts: attempt,
            });
        }
    }
    Err(Error::RejectionExhausted {
        attempts: max_attempts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_cluster(points: &[f64]) -> ClusterModel {
        let pts: Vec<Vec<f64>> = points.iter().map(|&p| vec![p]).collect();
        fit_clusters(&pts, 1, &mut SeededRng::new(0)).unwrap()
    }

    #[test]
    fn stats_examples() {
        let s = fit_stats(&[vec![0.0], vec![2.0]]).unwrap();
        assert_eq!((s.mean[0], s.std[0]), (1.0, 1.0));
        let s = fit_stats(&vec![vec![3.0, -1.0]; 4]).unwrap();
        assert_eq!(s.std, vec![0.0, 0.0]);
        assert!(fit_stats(&[vec![1.0]]).is_err());

        let joint = fit_stats(&[vec![1.0, 5.0], vec![2.0, 7.0], vec![4.0, 6.0]]).unwrap();
        let a = fit_stats(&[vec![1.0], vec![2.0], vec![4.0]]).unwrap();
        let b = fit_stats(&[vec![5.0], vec![7.0], vec![6.0]]).unwrap();
        assert_eq!(joint.mean, vec![a.mean[0], b.mean[0]]);
        assert_eq!(joint.std, vec![a.std[0], b.std[0]]);
    }

    #[test]
    fn single_cluster_hand_case() {
        let m = one_cluster(&[1.0, 3.0]);
        assert_eq!(m.centroids, vec![vec![2.0]]);
        assert_eq!(m.mse, vec![1.0]);
        assert_eq!(m.sizes, vec![2]);
        assert!(!is_outlier_cluster(&m, &[2.5]));
        assert!(is_outlier_cluster(&m, &[4.0]));
        assert!(!is_outlier_cluster(&m, &[2.0]));
    }

    #[test]
    fn k1_is_global_mean() {
        let pts = vec![vec![0.0, 1.0], vec![2.0, 3.0], vec![4.0, -1.0]];
        let m = fit_clusters(&pts, 1, &mut SeededRng::new(3)).unwrap();
        assert_eq!(m.centroids[0], vec![2.0, 1.0]);
        let expect = pts.iter().map(|p| sq_dist(p, &[2.0, 1.0])).sum::<f64>() / 3.0;
        assert!((m.mse[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn singleton_cluster_rejects_everything_else() {
        let m = ClusterModel {
            centroids: vec![vec![1.0, 1.0]],
            mse: vec![0.0],
            sizes: vec![1],
        };
        assert!(!is_outlier_cluster(&m, &[1.0, 1.0]));
        assert!(is_outlier_cluster(&m, &[1.0, 1.0 + 1e-9]));
    }

    #[test]
    fn two_blobs() {
        let mut rng = SeededRng::new(17);
        let n = 400;
        let sigma = 0.5;
        let mut pts = Vec::new();
        for c in [[-10.0, 0.0], [10.0, 5.0]] {
            for _ in 0..n {
                pts.push(vec![
                    gaussian(&mut rng, c[0], sigma).unwrap(),
                    gaussian(&mut rng, c[1], sigma).unwrap(),
                ]);
            }
        }
        let blob_mean = |range: std::ops::Range<usize>| -> Vec<f64> {
            let len = range.len() as f64;
            let mut m = vec![0.0; 2];
            for p in &pts[range] {
                m[0] += p[0] / len;
                m[1] += p[1] / len;
            }
            m
        };
        let means = [blob_mean(0..n), blob_mean(n..2 * n)];
        let (model, trace) = fit_clusters_traced(&pts, 2, &mut SeededRng::new(1)).unwrap();
        let bound = 3.0 * sigma / (n as f64).sqrt();
        for m in &means {
            let (k, _) = model.nearest(m);
            for d in 0..2 {
                assert!((model.centroids[k][d] - m[d]).abs() <= bound);
            }
        }
        assert_eq!(model.sizes, vec![n, n]);
        assert!(trace.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }

    #[test]
    fn lloyd_converges_to_member_means() {
        let mut rng = SeededRng::new(5);
        let pts: Vec<Vec<f64>> = (0..300)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let (model, trace) = fit_clusters_traced(&pts, 6, &mut SeededRng::new(2)).unwrap();
        assert!(trace.objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(trace.iterations < KMEANS_MAX_ITERATIONS);
        let means = cluster_means(&pts, &trace.labels, 6, 3);
        for (c, m) in model.centroids.iter().zip(&means) {
            assert!(c.iter().zip(m).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
        assert!(model.sizes.iter().all(|&s| s >= 1));
        assert_eq!(model.sizes.iter().sum::<usize>(), 300);
    }

    #[test]
    fn k_larger_than_samples_rejected() {
        assert!(fit_clusters(&[vec![0.0]], 2, &mut SeededRng::new(0)).is_err());
        assert!(fit_clusters(&[vec![0.0]], 0, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn duplicate_points_keep_clusters_non_empty() {
        let mut pts = vec![vec![1.0]; 10];
        pts.push(vec![5.0]);
        let m = fit_clusters(&pts, 3, &mut SeededRng::new(4)).unwrap();
        assert!(m.sizes.iter().all(|&s| s >= 1));
    }

    #[test]
    fn zscore_rule() {
        let s = GaussianStats {
            mean: vec![1.0, -2.0],
            std: vec![0.5, 0.0],
        };
        assert!(!is_outlier_zscore(&s, &[1.0, -2.0]));
        assert!(!is_outlier_zscore(&s, &[2.5, -2.0]));
        assert!(is_outlier_zscore(&s, &[1.0 + 3.5 * 0.5, -2.0]));
        assert!(is_outlier_zscore(&s, &[1.0, -2.0 + 1e-12]));
    }

    #[test]
    fn draw_methods() {
        let stats = GaussianStats {
            mean: vec![0.0, 1.0],
            std: vec![1.0, 2.0],
        };
        let clusters = ClusterModel {
            centroids: vec![vec![0.0, 1.0]],
            mse: vec![0.0],
            sizes: vec![1],
        };
        let mut a = SeededRng::new(1);
        let d = draw_inlier(&stats, &clusters, &mut a, OutlierMethod::None, 1000).unwrap();
        let mut b = SeededRng::new(1);
        let first = vec![gaussian(&mut b, 0.0, 1.0).unwrap(), gaussian(&mut b, 1.0, 2.0).unwrap()];
        assert_eq!((d.vector, d.attempts), (first, 1));

        let r = draw_inlier(&stats, &clusters, &mut a, OutlierMethod::Cluster, 50);
        assert!(matches!(r, Err(Error::RejectionExhausted { attempts: 50 })));

        let flat = GaussianStats {
            mean: vec![0.25, 3.0],
            std: vec![0.0, 0.0],
        };
        let d = draw_inlier(&flat, &clusters, &mut a, OutlierMethod::ZScore, 1).unwrap();
        assert_eq!(d.vector, vec![0.25, 3.0]);
    }

    #[test]
    fn zscore_attempts_match_geometric_mean() {
        let stats = GaussianStats {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let clusters = ClusterModel {
            centroids: vec![vec![0.0]],
            mse: vec![1.0],
            sizes: vec![1],
        };
        let mut rng = SeededRng::new(77);
        let n = 100_000;
        let total: usize = (0..n)
            .map(|_| {
                draw_inlier(&stats, &clusters, &mut rng, OutlierMethod::ZScore, 1000)
                    .unwrap()
                    .attempts
            })
            .sum();
        let mean = total as f64 / n as f64;
        // 1 / (Φ(3) − Φ(−3)) = 1.0027
        assert!((1.001..=1.006).contains(&mean), "mean attempts {mean}");
    }

    #[test]
    fn method_parsing() {
        for m in [OutlierMethod::ZScore, OutlierMethod::Cluster, OutlierMethod::Both, OutlierMethod::None] {
            assert_eq!(m.to_string().parse::<OutlierMethod>().unwrap(), m);
            assert_eq!(OutlierMethod::from_code(m.code()), Some(m));
        }
        assert!("gmm".parse::<OutlierMethod>().is_err());
    }
}
