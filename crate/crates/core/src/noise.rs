//! Scenario trees for the common noise.
//!
//! Epoch `n` sits at `t_n = T n / N`. Each branch draws a Brownian increment
//! from a quadrature rule matching the Gaussian moments: two points `±sqrt(dt)`
//! or the three-point Gauss-Hermite rule. Node ids are epoch-major. In a
//! recombining tree a node can have several parents; its field is then a
//! function of `(epoch, W)` only.

use crate::error::{MfgError, Result};
use crate::grid::{GridFunction, SpatialGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeNode {
    pub id: usize,
    pub epoch: usize,
    /// Cumulative Brownian value.
    pub w: f64,
    /// Unconditional probability of reaching this node.
    pub prob: f64,
    /// `(parent id, transition probability)`.
    pub parents: Vec<(usize, f64)>,
    /// `(child id, transition probability)`.
    pub children: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioTree {
    /// Time of epoch 0.
    pub t0: f64,
    pub horizon: f64,
    pub n_steps: usize,
    pub branching: usize,
    pub beta: f64,
    pub recombining: bool,
    pub nodes: Vec<TreeNode>,
    /// Node ids per epoch.
    pub epochs: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TreePath {
    pub nodes: Vec<usize>,
    pub w: Vec<f64>,
}

impl TreePath {
    pub fn leaf(&self) -> usize {
        *self.nodes.last().expect("path has a root")
    }
}

/// Branch increments and weights for one step of length `dt`.
fn rule(branching: usize, dt: f64) -> Vec<(f64, f64)> {
    match branching {
        2 => vec![(dt.sqrt(), 0.5), (-dt.sqrt(), 0.5)],
        3 => {
            let s = (3.0 * dt).sqrt();
            vec![(s, 1.0 / 6.0), (0.0, 2.0 / 3.0), (-s, 1.0 / 6.0)]
        }
        _ => vec![(0.0, 1.0)],
    }
}

pub fn build_tree(horizon: f64, n_steps: usize, branching: usize, beta: f64, recombining: bool) -> Result<ScenarioTree> {
    if branching != 2 && branching != 3 {
        return Err(MfgError::UnsupportedBranching(branching));
    }
    if n_steps == 0 {
        return Err(MfgError::InvalidParameter("n_steps must be at least 1".into()));
    }
    if !(horizon > 0.0) || beta < 0.0 {
        return Err(MfgError::InvalidParameter(format!("horizon {horizon}, beta {beta}")));
    }
    Ok(if recombining {
        build_recombining(horizon, n_steps, branching, beta)
    } else {
        build_full(horizon, n_steps, branching, beta)
    })
}

fn build_full(horizon: f64, n_steps: usize, branching: usize, beta: f64) -> ScenarioTree {
    let dt = horizon / n_steps as f64;
    let inc = rule(branching, dt);
    let mut nodes = vec![TreeNode { id: 0, epoch: 0, w: 0.0, prob: 1.0, parents: vec![], children: vec![] }];
    let mut epochs = vec![vec![0]];
    for n in 0..n_steps {
        let mut next = Vec::new();
        for &p in &epochs[n] {
            for &(dw, q) in &inc {
                let id = nodes.len();
                let (w, prob) = (nodes[p].w + dw, nodes[p].prob * q);
                nodes.push(TreeNode { id, epoch: n + 1, w, prob, parents: vec![(p, q)], children: vec![] });
                nodes[p].children.push((id, q));
                next.push(id);
            }
        }
        epochs.push(next);
    }
    ScenarioTree { t0: 0.0, horizon, n_steps, branching, beta, recombining: false, nodes, epochs }
}

fn build_recombining(horizon: f64, n_steps: usize, branching: usize, beta: f64) -> ScenarioTree {
    let dt = horizon / n_steps as f64;
    let step = if branching == 2 { dt.sqrt() } else { (3.0 * dt).sqrt() };
    let weights: Vec<f64> = rule(branching, dt).iter().rev().map(|r| r.1).collect();
    let mut nodes = Vec::new();
    let mut epochs = Vec::new();
    for n in 0..=n_steps {
        let count = n * (branching - 1) + 1;
        let mut ids = Vec::with_capacity(count);
        for j in 0..count {
            let id = nodes.len();
            let w = if branching == 2 {
                (2.0 * j as f64 - n as f64) * step
            } else {
                (j as f64 - n as f64) * step
            };
            nodes.push(TreeNode { id, epoch: n, w, prob: 0.0, parents: vec![], children: vec![] });
            ids.push(id);
        }
        epochs.push(ids);
    }
    nodes[0].prob = 1.0;
    for n in 0..n_steps {
        for (j, &p) in epochs[n].clone().iter().enumerate() {
            for (k, &q) in weights.iter().enumerate() {
                let c = epochs[n + 1][j + k];
                nodes[p].children.push((c, q));
                nodes[c].parents.push((p, q));
                nodes[c].prob += nodes[p].prob * q;
            }
        }
    }
    ScenarioTree { t0: 0.0, horizon, n_steps, branching, beta, recombining: true, nodes, epochs }
}

impl ScenarioTree {
    /// Single-path tree with no randomness, used for deterministic problems.
    pub fn deterministic(horizon: f64, n_steps: usize) -> Self {
        build_full_chain(horizon, n_steps)
    }

    /// Single-path tree on `[t_a, t_b]`.
    pub fn deterministic_on(t_a: f64, t_b: f64, n_steps: usize) -> Result<Self> {
        if !(t_b > t_a) {
            return Err(MfgError::InvalidParameter(format!("empty interval [{t_a}, {t_b}]")));
        }
        let mut t = build_full_chain(t_b - t_a, n_steps);
        t.t0 = t_a;
        Ok(t)
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    pub fn time(&self, epoch: usize) -> f64 {
        self.t0 + self.horizon * epoch as f64 / self.n_steps as f64
    }

    pub fn sigma(&self) -> f64 {
        (2.0 * self.beta).sqrt()
    }

    /// Spatial shift `sqrt(2 beta) W` of a node.
    pub fn shift(&self, node: usize) -> f64 {
        self.sigma() * self.nodes[node].w
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn leaves(&self) -> &[usize] {
        &self.epochs[self.n_steps]
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Probability-weighted average over the children of every node at `epoch`.
    /// `child_values[j]` belongs to the `j`-th node of epoch `epoch + 1`.
    pub fn conditional_expectation(&self, epoch: usize, child_values: &[Option<GridFunction>]) -> Result<Vec<GridFunction>> {
        if epoch >= self.n_steps {
            return Err(MfgError::IncompleteValues { epoch, detail: "no children at the last epoch".into() });
        }
        let next = &self.epochs[epoch + 1];
        if child_values.len() != next.len() {
            return Err(MfgError::IncompleteValues {
                epoch,
                detail: format!("{} values for {} children", child_values.len(), next.len()),
            });
        }
        let first = next[0];
        let mut out = Vec::with_capacity(self.epochs[epoch].len());
        for &p in &self.epochs[epoch] {
            let mut grid: Option<SpatialGrid> = None;
            let mut acc: Vec<f64> = Vec::new();
            for &(c, q) in &self.nodes[p].children {
                let v = child_values[c - first].as_ref().ok_or_else(|| MfgError::IncompleteValues {
                    epoch,
                    detail: format!("missing value for child node {c}"),
                })?;
                match grid {
                    None => {
                        grid = Some(v.grid);
                        acc = v.values.iter().map(|x| q * x).collect();
                    }
                    Some(g) => {
                        if !g.same_as(&v.grid) {
                            return Err(MfgError::GridMismatch);
                        }
                        acc.iter_mut().zip(&v.values).for_each(|(a, x)| *a += q * x);
                    }
                }
            }
            out.push(GridFunction::new(grid.expect("every node has children"), acc)?);
        }
        Ok(out)
    }

    /// Weighted child average of raw values, `value(child)` indexed by node id.
    pub fn expect_children<'a>(&self, node: usize, value: impl Fn(usize) -> &'a [f64]) -> Vec<f64> {
        let ch = &self.nodes[node].children;
        let mut acc: Vec<f64> = value(ch[0].0).iter().map(|x| ch[0].1 * x).collect();
        for &(c, q) in &ch[1..] {
            acc.iter_mut().zip(value(c)).for_each(|(a, x)| *a += q * x);
        }
        acc
    }

    pub fn sample_path(&self, seed: u64) -> TreePath {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_path_with(&mut rng)
    }

    pub fn sample_path_with<R: Rng>(&self, rng: &mut R) -> TreePath {
        let mut node = 0;
        let mut nodes = vec![0];
        let mut w = vec![0.0];
        for _ in 0..self.n_steps {
            let u: f64 = rng.random();
            let ch = &self.nodes[node].children;
            let mut acc = 0.0;
            let mut pick = ch[ch.len() - 1].0;
            for &(c, q) in ch {
                acc += q;
                if u < acc {
                    pick = c;
                    break;
                }
            }
            node = pick;
            nodes.push(node);
            w.push(self.nodes[node].w);
        }
        TreePath { nodes, w }
    }

    /// Checks that consecutive path entries are parent and child.
    pub fn check_path(&self, path: &TreePath) -> Result<()> {
        if path.nodes.len() != self.n_steps + 1 || path.nodes[0] != 0 {
            return Err(MfgError::NotAdapted(format!("path of length {}", path.nodes.len())));
        }
        for w in path.nodes.windows(2) {
            if !self.nodes[w[0]].children.iter().any(|c| c.0 == w[1]) {
                return Err(MfgError::NotAdapted(format!("{} is not a child of {}", w[1], w[0])));
            }
        }
        Ok(())
    }

    /// Child of `node` whose Brownian value is nearest to `w`.
    pub fn nearest_child(&self, node: usize, w: f64) -> usize {
        self.nodes[node]
            .children
            .iter()
            .map(|c| c.0)
            .min_by(|&a, &b| {
                (self.nodes[a].w - w).abs().total_cmp(&(self.nodes[b].w - w).abs())
            })
            .expect("node has children")
    }
}

fn build_full_chain(horizon: f64, n_steps: usize) -> ScenarioTree {
    let mut t = build_full(horizon, n_steps.max(1), 1, 0.0);
    t.branching = 1;
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_step_binomial() {
        let t = build_tree(2.0, 1, 2, 0.3, false).unwrap();
        assert_eq!(t.leaves().len(), 2);
        let ws: Vec<f64> = t.leaves().iter().map(|&l| t.nodes[l].w).collect();
        assert_eq!(ws, vec![2f64.sqrt(), -(2f64.sqrt())]);
        assert!(t.leaves().iter().all(|&l| t.nodes[l].prob == 0.5));
    }

    #[test]
    fn bad_branching() {
        assert_eq!(build_tree(1.0, 2, 4, 0.0, false), Err(MfgError::UnsupportedBranching(4)));
        assert_eq!(build_tree(1.0, 2, 1, 0.0, true), Err(MfgError::UnsupportedBranching(1)));
    }

    #[test]
    fn pascal_weights() {
        let t = build_tree(1.0, 2, 2, 0.1, true).unwrap();
        let p: Vec<f64> = t.leaves().iter().map(|&l| t.nodes[l].prob).collect();
        assert_eq!(p, vec![0.25, 0.5, 0.25]);
    }

    #[test]
    fn node_counts() {
        for b in [2, 3] {
            for n in 1..=5 {
                let r = build_tree(1.0, n, b, 0.1, true).unwrap();
                let f = build_tree(1.0, n, b, 0.1, false).unwrap();
                for k in 0..=n {
                    assert_eq!(r.epochs[k].len(), k * (b - 1) + 1);
                    assert_eq!(f.epochs[k].len(), b.pow(k as u32));
                }
            }
        }
    }

    #[test]
    fn zero_beta_keeps_increments() {
        let t = build_tree(1.0, 3, 2, 0.0, false).unwrap();
        assert!(t.nodes.iter().any(|n| n.w != 0.0));
        assert!(t.nodes.iter().all(|n| t.shift(n.id) == 0.0));
    }

    #[test]
    fn martingale_and_moments() {
        for (b, rec) in [(2, false), (2, true), (3, false), (3, true)] {
            let t = build_tree(1.5, 4, b, 0.2, rec).unwrap();
            for node in &t.nodes {
                if node.children.is_empty() {
                    continue;
                }
                let s: f64 = node.children.iter().map(|&(c, q)| q * t.nodes[c].w).sum();
                let p: f64 = node.children.iter().map(|&(_, q)| q).sum();
                assert!((s - node.w).abs() < 1e-14);
                assert!((p - 1.0).abs() < 1e-15);
                let m2: f64 = node.children.iter().map(|&(c, q)| q * (t.nodes[c].w - node.w).powi(2)).sum();
                assert!((m2 - t.dt()).abs() < 1e-14);
            }
            let ew2: f64 = t.leaves().iter().map(|&l| t.nodes[l].prob * t.nodes[l].w.powi(2)).sum();
            assert!((ew2 - 1.5).abs() < 1e-12);
        }
    }

    #[test]
    fn conditional_expectation_examples() {
        let g = SpatialGrid::new(0.0, 1.0, 5).unwrap();
        let t = build_tree(1.0, 1, 2, 0.0, false).unwrap();
        let vals = vec![Some(GridFunction::constant(g, 1.0)), Some(GridFunction::constant(g, 3.0))];
        let out = t.conditional_expectation(0, &vals).unwrap();
        assert_eq!(out[0].values, vec![2.0; 5]);
        let same = vec![Some(GridFunction::constant(g, 1.5)), Some(GridFunction::constant(g, 1.5))];
        assert_eq!(t.conditional_expectation(0, &same).unwrap()[0].values, vec![1.5; 5]);
        let missing = vec![Some(GridFunction::constant(g, 1.0)), None];
        assert!(matches!(t.conditional_expectation(0, &missing), Err(MfgError::IncompleteValues { .. })));
    }

    #[test]
    fn tower_property() {
        let g = SpatialGrid::new(0.0, 1.0, 7).unwrap();
        let t = build_tree(1.0, 4, 3, 0.1, false).unwrap();
        let mut level: Vec<Option<GridFunction>> = t
            .leaves()
            .iter()
            .map(|&l| Some(GridFunction::from_fn(g, |x| (x * (l as f64 + 1.0)).sin())))
            .collect();
        let direct: Vec<f64> = (0..7)
            .map(|i| {
                t.leaves()
                    .iter()
                    .zip(&level)
                    .map(|(&l, v)| t.nodes[l].prob * v.as_ref().unwrap().values[i])
                    .sum()
            })
            .collect();
        for e in (0..4).rev() {
            level = t.conditional_expectation(e, &level).unwrap().into_iter().map(Some).collect();
        }
        let root = level[0].as_ref().unwrap();
        for i in 0..7 {
            assert!((root.values[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_frequency_and_determinism() {
        let t = build_tree(1.0, 1, 2, 0.1, false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let ups = (0..n).filter(|_| t.nodes[t.sample_path_with(&mut rng).leaf()].w > 0.0).count();
        assert!(((ups as f64 / n as f64) - 0.5).abs() < 0.01);
        let t8 = build_tree(1.0, 8, 2, 0.1, false).unwrap();
        assert_eq!(t8.sample_path(42), t8.sample_path(42));
        t8.check_path(&t8.sample_path(42)).unwrap();
    }

    #[test]
    fn deterministic_chain() {
        let t = ScenarioTree::deterministic(1.0, 4);
        assert_eq!(t.node_count(), 5);
        assert!(t.nodes.iter().all(|n| n.prob == 1.0 && n.w == 0.0));
    }
}
