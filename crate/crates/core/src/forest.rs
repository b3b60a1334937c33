//! Multi-output CART regression trees and per-position random forests mapping
//! the stage-1 DC map to each block's AC projections.

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::SeededRng;
use crate::stage1::{AcTensor, DcMap, AC_PER_BLOCK, POSITIONS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForestParams {
    pub trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        Self {
            trees: 30,
            max_depth: 12,
            min_samples_leaf: 5,
            features_per_split: 4,
            bootstrap: true,
        }
    }
}

impl ForestParams {
    pub fn validate(&self) -> Result<()> {
        if self.trees == 0 || self.min_samples_leaf == 0 || self.features_per_split == 0 {
            return Err(Error::InvalidParameter(format!(
                "forest needs trees, min_samples_leaf and features_per_split ≥ 1, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Which part of the DC map feeds the regressor of a block position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// All 16 DC projections.
    #[default]
    DcMap,
    /// Only the DC projection of the block being predicted.
    PositionDc,
}

impl Conditioning {
    pub fn features(self, dc: &DcMap, position: usize) -> Vec<f64> {
        match self {
            Conditioning::DcMap => dc.0.to_vec(),
            Conditioning::PositionDc => vec![dc.0[position]],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        output: Vec<f64>,
    },
}

/// Arena-allocated tree; node 0 is the root.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn from_nodes(nodes: Vec<TreeNode>) -> Result<Self> {
        if nodes.is_empty() {
            return Err(Error::Empty("tree nodes"));
        }
        for (i, n) in nodes.iter().enumerate() {
            if let TreeNode::Split { left, right, .. } = n {
                // children are always allocated after their parent
                if *left <= i || *right <= i || *left >= nodes.len() || *right >= nodes.len() {
                    return Err(Error::Format(format!("node {i} has invalid children")));
                }
            }
        }
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[TreeNode] {
        &self.nodes
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => {
                    1 + walk(nodes, *left).max(walk(nodes, *right))
                }
            }
        }
        walk(&self.nodes, 0)
    }

    pub fn predict(&self, x: &[f64]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { output } => return output,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }
}

struct Builder<'a> {
    x: &'a [Vec<f64>],
    y: &'a [Vec<f64>],
    params: &'a ForestParams,
    n_features: usize,
    n_outputs: usize,
    nodes: Vec<TreeNode>,
}

struct BestSplit {
    feature: usize,
    threshold: f64,
    left: Vec<usize>,
    right: Vec<usize>,
}

impl Builder<'_> {
    fn leaf(&self, idx: &[usize]) -> TreeNode {
        let mut output = vec![0.0; self.n_outputs];
        for &i in idx {
            for (o, v) in output.iter_mut().zip(&self.y[i]) {
                *o += v;
            }
        }
        let inv = 1.0 / idx.len() as f64;
        output.iter_mut().for_each(|o| *o *= inv);
        TreeNode::Leaf { output }
    }

    fn constant_targets(&self, idx: &[usize]) -> bool {
        let first = &self.y[idx[0]];
        idx.iter().all(|&i| self.y[i] == *first)
    }

    fn build(&mut self, idx: Vec<usize>, depth: usize, rng: &mut SeededRng) -> usize {
        let slot = self.nodes.len();
        self.nodes.push(TreeNode::Leaf { output: Vec::new() });
        let stop = depth >= self.params.max_depth
            || idx.len() < 2 * self.params.min_samples_leaf
            || self.constant_targets(&idx);
        let split = if stop { None } else { self.best_split(&idx, rng) };
        match split {
            None => self.nodes[slot] = self.leaf(&idx),
            Some(best) => {
                let left = self.build(best.left, depth + 1, rng);
                let right = self.build(best.right, depth + 1, rng);
                self.nodes[slot] = TreeNode::Split {
                    feature: best.feature,
                    threshold: best.threshold,
                    left,
                    right,
                };
            }
        }
        slot
    }

    /// Maximises Σ_d (S_L,d²/n_L + S_R,d²/n_R), which minimises the summed
    /// within-child squared deviation over all outputs.
    fn best_split(&self, idx: &[usize], rng: &mut SeededRng) -> Option<BestSplit> {
        let n = idx.len();
        let leaf = self.params.min_samples_leaf;
        let k = self.params.features_per_split.min(self.n_features);
        let mut features = sample(rng, self.n_features, k).into_vec();
        features.sort_unstable();

        let mut total = vec![0.0; self.n_outputs];
        for &i in idx {
            for (t, v) in total.iter_mut().zip(&self.y[i]) {
                *t += v;
            }
        }

        let mut best: Option<(f64, usize, f64, usize, Vec<usize>)> = None;
        let mut order = idx.to_vec();
        let mut left_sum = vec![0.0; self.n_outputs];
        for &f in &features {
            order.sort_by(|&a, &b| self.x[a][f].total_cmp(&self.x[b][f]).then(a.cmp(&b)));
            left_sum.iter_mut().for_each(|s| *s = 0.0);
            for pos in 0..n - 1 {
                let i = order[pos];
                for (s, v) in left_sum.iter_mut().zip(&self.y[i]) {
                    *s += v;
                }
                let n_left = pos + 1;
                let n_right = n - n_left;
                if n_left < leaf || n_right < leaf {
                    continue;
                }
                let lo = self.x[i][f];
                let hi = self.x[order[pos + 1]][f];
                if lo >= hi {
                    continue;
                }
                let gain: f64 = left_sum
                    .iter()
                    .zip(&total)
                    .map(|(&l, &t)| l * l / n_left as f64 + (t - l) * (t - l) / n_right as f64)
                    .sum();
                if best.as_ref().is_none_or(|b| gain > b.0 + GAIN_TIE_TOL * b.0.abs()) {
                    let mut threshold = 0.5 * (lo + hi);
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((gain, f, threshold, n_left, Vec::new()));
                }
            }
            if let Some(b) = best.as_mut() {
                if b.1 == f && b.4.is_empty() {
                    b.4 = order[..b.3].to_vec();
                }
            }
        }
        let (_, feature, threshold, _, left) = best?;
        let mut in_left = vec![false; self.x.len()];
        left.iter().for_each(|&i| in_left[i] = true);
        let right = idx.iter().copied().filter(|&i| !in_left[i]).collect();
        let mut left = left;
        left.sort_unstable();
        Some(BestSplit {
            feature,
            threshold,
            left,
            right,
        })
    }
}

/// Gains closer than this (relative) are ties, resolved by feature then threshold.
const GAIN_TIE_TOL: f64 = 1e-12;

fn check_data(x: &[Vec<f64>], y: &[Vec<f64>]) -> Result<(usize, usize)> {
    if x.is_empty() {
        return Err(Error::Empty("tree training samples"));
    }
    if x.len() != y.len() {
        return Err(Error::shape(format!("{} targets", x.len()), y.len()));
    }
    let nf = x[0].len();
    let no = y[0].len();
    if nf == 0 || no == 0 {
        return Err(Error::Empty("feature or target dimension"));
    }
    for (index, (xi, yi)) in x.iter().zip(y).enumerate() {
        if xi.len() != nf {
            return Err(Error::Ragged {
                index,
                expected: nf,
                found: xi.len(),
            });
        }
        if yi.len() != no {
            return Err(Error::Ragged {
                index,
                expected: no,
                found: yi.len(),
            });
        }
    }
    Ok((nf, no))
}

/// Grows one CART regression tree on all of `x`/`y`.
pub fn fit_tree(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    params: &ForestParams,
    rng: &mut SeededRng,
) -> Result<Tree> {
    params.validate()?;
    let (n_features, n_outputs) = check_data(x, y)?;
    let mut builder = Builder {
        x,
        y,
        params,
        n_features,
        n_outputs,
        nodes: Vec::new(),
    };
    builder.build((0..x.len()).collect(), 0, rng);
    Ok(Tree {
        nodes: builder.nodes,
    })
}

/// Trees for one position; tree `t` draws from `rng.fork(t)`.
pub fn fit_forest(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    params: &ForestParams,
    rng: &SeededRng,
) -> Result<Vec<Tree>> {
    params.validate()?;
    check_data(x, y)?;
    (0..params.trees)
        .into_par_iter()
        .map(|t| {
            let mut tree_rng = rng.fork(t as u64);
            if params.bootstrap {
                let n = x.len();
                let picks: Vec<usize> = (0..n).map(|_| tree_rng.random_range(0..n)).collect();
                let bx: Vec<Vec<f64>> = picks.iter().map(|&i| x[i].clone()).collect();
                let by: Vec<Vec<f64>> = picks.iter().map(|&i| y[i].clone()).collect();
                fit_tree(&bx, &by, params, &mut tree_rng)
            } else {
                fit_tree(x, y, params, &mut tree_rng)
            }
        })
        .collect()
}

/// Mean of the tree outputs reached by `x`.
pub fn predict_ensemble(trees: &[Tree], x: &[f64]) -> Vec<f64> {
    let mut out = trees[0].predict(x).to_vec();
    for t in &trees[1..] {
        for (o, v) in out.iter_mut().zip(t.predict(x)) {
            *o += v;
        }
    }
    let inv = 1.0 / trees.len() as f64;
    out.iter_mut().for_each(|o| *o *= inv);
    out
}

/// One ensemble per block position.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomForest {
    pub params: ForestParams,
    pub conditioning: Conditioning,
    ensembles: Vec<Vec<Tree>>,
}

impl RandomForest {
    pub fn from_ensembles(
        params: ForestParams,
        conditioning: Conditioning,
        ensembles: Vec<Vec<Tree>>,
    ) -> Result<Self> {
        if ensembles.len() != POSITIONS || ensembles.iter().any(|e| e.len() != params.trees) {
            return Err(Error::Format(format!(
                "forest must hold {POSITIONS} ensembles of {} trees",
                params.trees
            )));
        }
        Ok(Self {
            params,
            conditioning,
            ensembles,
        })
    }

    pub fn ensembles(&self) -> &[Vec<Tree>] {
        &self.ensembles
    }

    /// Trains every position in parallel; position `k` uses `rng.fork(k)`.
    pub fn fit(
        dcs: &[DcMap],
        acs: &[AcTensor],
        params: ForestParams,
        conditioning: Conditioning,
        rng: &SeededRng,
    ) -> Result<Self> {
        if dcs.len() != acs.len() {
            return Err(Error::shape(dcs.len(), acs.len()));
        }
        let ensembles = (0..POSITIONS)
            .into_par_iter()
            .map(|k| {
                let x: Vec<Vec<f64>> = dcs.iter().map(|d| conditioning.features(d, k)).collect();
                let y: Vec<Vec<f64>> = acs.iter().map(|a| a.0[k].to_vec()).collect();
                fit_forest(&x, &y, &params, &rng.fork(k as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            params,
            conditioning,
            ensembles,
        })
    }

    pub fn predict(&self, position: usize, dc: &DcMap) -> Result<Vec<f64>> {
        let trees = self
            .ensembles
            .get(position)
            .filter(|t| !t.is_empty())
            .ok_or_else(|| Error::InvalidParameter(format!("position {position} is not fitted")))?;
        Ok(predict_ensemble(
            trees,
            &self.conditioning.features(dc, position),
        ))
    }

    pub fn predict_all(&self, dc: &DcMap) -> Result<AcTensor> {
        let mut ac = AcTensor::zeros();
        for (k, row) in ac.0.iter_mut().enumerate() {
            let p = self.predict(k, dc)?;
            if p.len() != AC_PER_BLOCK {
                return Err(Error::shape(AC_PER_BLOCK, p.len()));
            }
            row.copy_from_slice(&p);
        }
        Ok(ac)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full(n_features: usize, depth: usize) -> ForestParams {
        ForestParams {
            trees: 1,
            max_depth: depth,
            min_samples_leaf: 1,
            features_per_split: n_features,
            bootstrap: false,
        }
    }

    fn mse(tree: &Tree, x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        for (xi, yi) in x.iter().zip(y) {
            s += tree
                .predict(xi)
                .iter()
                .zip(yi)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        s / (x.len() * y[0].len()) as f64
    }

    fn random_data(rng: &mut SeededRng, n: usize, nf: usize, no: usize) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let x: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..nf).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y = x
            .iter()
            .map(|xi| {
                (0..no)
                    .map(|d| xi[d % nf] * (d as f64 + 1.0) + xi[(d + 1) % nf].sin())
                    .collect()
            })
            .collect();
        (x, y)
    }

    #[test]
    fn constant_targets_give_single_leaf() {
        let x = vec![vec![0.0], vec![1.0], vec![2.0]];
        let y = vec![vec![4.0, 5.0]; 3];
        let t = fit_tree(&x, &y, &full(1, 12), &mut SeededRng::new(0)).unwrap();
        assert_eq!(t.nodes(), &[TreeNode::Leaf { output: vec![4.0, 5.0] }]);
    }

    #[test]
    fn separable_scalar() {
        let x = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let y = vec![vec![0.0], vec![1.0], vec![0.0], vec![1.0]];
        let t = fit_tree(&x, &y, &full(1, 12), &mut SeededRng::new(0)).unwrap();
        assert_eq!(t.depth(), 1);
        match &t.nodes()[0] {
            TreeNode::Split { threshold, .. } => assert_eq!(*threshold, 0.5),
            n => panic!("expected split, got {n:?}"),
        }
        assert_eq!(mse(&t, &x, &y), 0.0);
    }

    #[test]
    fn memorises_first_feature() {
        let mut rng = SeededRng::new(7);
        let x: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let y: Vec<Vec<f64>> = x.iter().map(|xi| vec![xi[0]]).collect();
        let t = fit_tree(&x, &y, &full(16, 12), &mut SeededRng::new(1)).unwrap();
        assert!(mse(&t, &x, &y) <= 1e-12);
    }

    #[test]
    fn empty_and_ragged_rejected() {
        let p = full(1, 3);
        assert!(fit_tree(&[], &[], &p, &mut SeededRng::new(0)).is_err());
        assert!(fit_tree(&[vec![0.0]], &[vec![0.0], vec![1.0]], &p, &mut SeededRng::new(0)).is_err());
        assert!(fit_tree(
            &[vec![0.0], vec![0.0, 1.0]],
            &[vec![0.0], vec![1.0]],
            &p,
            &mut SeededRng::new(0)
        )
        .is_err());
    }

    #[test]
    fn single_tree_forest_equals_tree() {
        let mut rng = SeededRng::new(8);
        let (x, y) = random_data(&mut rng, 60, 4, 3);
        let p = ForestParams {
            features_per_split: 2,
            ..full(4, 6)
        };
        let root = SeededRng::new(99);
        let forest = fit_forest(&x, &y, &p, &root).unwrap();
        let tree = fit_tree(&x, &y, &p, &mut root.fork(0)).unwrap();
        assert_eq!(forest, vec![tree]);
    }

    #[test]
    fn forest_prediction_is_tree_average_and_in_hull() {
        let mut rng = SeededRng::new(9);
        let (x, y) = random_data(&mut rng, 120, 5, 3);
        let p = ForestParams {
            trees: 7,
            max_depth: 8,
            min_samples_leaf: 3,
            features_per_split: 2,
            bootstrap: true,
        };
        let trees = fit_forest(&x, &y, &p, &SeededRng::new(5)).unwrap();
        assert_eq!(trees.len(), 7);
        let lo: Vec<f64> = (0..3).map(|d| y.iter().map(|v| v[d]).fold(f64::INFINITY, f64::min)).collect();
        let hi: Vec<f64> = (0..3).map(|d| y.iter().map(|v| v[d]).fold(f64::NEG_INFINITY, f64::max)).collect();
        for _ in 0..50 {
            let q: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let pred = predict_ensemble(&trees, &q);
            for d in 0..3 {
                let manual = trees.iter().map(|t| t.predict(&q)[d]).sum::<f64>() / 7.0;
                assert!((pred[d] - manual).abs() < 1e-12);
                assert!(lo[d] <= pred[d] && pred[d] <= hi[d]);
            }
        }
        let again = fit_forest(&x, &y, &p, &SeededRng::new(5)).unwrap();
        assert_eq!(trees, again);
    }

    #[test]
    fn constant_forest_predicts_constant() {
        let mut rng = SeededRng::new(10);
        let (x, _) = random_data(&mut rng, 40, 3, 2);
        let y = vec![vec![1.5, -2.0]; 40];
        let p = ForestParams {
            trees: 5,
            ..ForestParams::default()
        };
        let trees = fit_forest(&x, &y, &p, &SeededRng::new(1)).unwrap();
        assert_eq!(predict_ensemble(&trees, &[0.3, 0.1, 0.9]), vec![1.5, -2.0]);
    }

    #[test]
    fn training_error_non_increasing_in_depth() {
        let mut rng = SeededRng::new(11);
        let (x, y) = random_data(&mut rng, 200, 6, 4);
        let mut last = f64::INFINITY;
        for d in [1, 2, 4, 8, 12] {
            let t = fit_tree(&x, &y, &full(6, d), &mut SeededRng::new(3)).unwrap();
            let e = mse(&t, &x, &y);
            assert!(e <= last + 1e-15, "depth {d}: {e} > {last}");
            last = e;
        }
    }

    #[test]
    fn structure_invariant_under_sample_permutation() {
        let mut rng = SeededRng::new(12);
        let (x, y) = random_data(&mut rng, 80, 4, 2);
        let p = full(4, 6);
        let t1 = fit_tree(&x, &y, &p, &mut SeededRng::new(4)).unwrap();
        let mut perm: Vec<usize> = (0..80).collect();
        perm.reverse();
        perm.swap(3, 40);
        let px: Vec<Vec<f64>> = perm.iter().map(|&i| x[i].clone()).collect();
        let py: Vec<Vec<f64>> = perm.iter().map(|&i| y[i].clone()).collect();
        let t2 = fit_tree(&px, &py, &p, &mut SeededRng::new(4)).unwrap();
        let strip = |t: &Tree| -> Vec<(usize, u64)> {
            t.nodes()
                .iter()
                .filter_map(|n| match n {
                    TreeNode::Split { feature, threshold, .. } => Some((*feature, threshold.to_bits())),
                    _ => None,
                })
                .collect()
        };
        assert_eq!(strip(&t1), strip(&t2));
        for xi in &x {
            let a = t1.predict(xi);
            let b = t2.predict(xi);
            assert!(a.iter().zip(b).all(|(u, v)| (u - v).abs() < 1e-12));
        }
    }

    #[test]
    fn unfitted_position_errors() {
        let f = RandomForest {
            params: ForestParams::default(),
            conditioning: Conditioning::DcMap,
            ensembles: vec![Vec::new(); POSITIONS],
        };
        assert!(f.predict(0, &DcMap([0.0; 16])).is_err());
        assert!(f.predict(99, &DcMap([0.0; 16])).is_err());
    }
}
