//! Hamilton-Jacobi solvers.
//!
//! The interval solver integrates `d_t u = (H(Du, x) - F) dt` backward over
//! one epoch with a monotone explicit scheme. The tree solver runs it on every
//! node with the Hamiltonian frozen at the epoch start and the node's shift,
//! projects onto the parent by conditional expectation and records the
//! martingale increments `dM = u(child) - E[u(child) | parent]`.

use crate::error::{MfgError, Result};
use crate::grid::{norms_of, GridFunction, SpatialGrid};
use crate::hamiltonian::{FrozenHamiltonian, QuadraticHamiltonian};
use crate::noise::{ScenarioTree, TreePath};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HjScheme {
    /// Local Lax-Friedrichs flux with viscosity `max |D_p H|` over the two one-sided slopes.
    LaxFriedrichs,
    /// Godunov flux for convex `H`.
    Godunov,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HjOptions {
    pub scheme: HjScheme,
    /// Fixed substep count per epoch; chosen from the CFL condition when `None`.
    pub substeps: Option<usize>,
    pub safety: f64,
}

impl Default for HjOptions {
    fn default() -> Self {
        Self { scheme: HjScheme::LaxFriedrichs, substeps: None, safety: 0.8 }
    }
}

/// Result of one backward interval solve.
#[derive(Debug, Clone, PartialEq)]
pub struct IntervalSolution {
    /// Values at substep times; index 0 is the interval start, the last is the terminal data.
    pub snapshots: Vec<Vec<f64>>,
    pub substeps: usize,
    pub max_courant: f64,
    /// Trapezoid quadrature of `H(Du) - F` over the interval, with centered `Du`.
    pub integrated: Vec<f64>,
}

impl IntervalSolution {
    pub fn start(&self) -> &[f64] {
        &self.snapshots[0]
    }
}

/// Source term sampled on the substep times of one interval. An empty slice
/// means no source; a single entry is held constant.
fn source_at(source: &[Vec<f64>], j: usize) -> Option<&[f64]> {
    match source.len() {
        0 => None,
        1 => Some(&source[0]),
        _ => Some(&source[j.min(source.len() - 1)]),
    }
}

#[inline]
fn numerical_h(scheme: HjScheme, fr: &FrozenHamiltonian, i: usize, pm: f64, pp: f64) -> (f64, f64) {
    let theta = fr.dp(i, pm).abs().max(fr.dp(i, pp).abs());
    let value = match scheme {
        HjScheme::LaxFriedrichs => fr.h(i, 0.5 * (pm + pp)) - 0.5 * theta * (pp - pm),
        HjScheme::Godunov => {
            if pm <= pp {
                let pstar = -fr.b[i] / fr.a[i];
                fr.h(i, pstar.clamp(pm, pp))
            } else {
                fr.h(i, pm).max(fr.h(i, pp))
            }
        }
    };
    (value, theta)
}

/// One-sided slopes with linear extrapolation at the ends.
#[inline]
fn slopes(u: &[f64], i: usize, h: f64) -> (f64, f64) {
    let n = u.len();
    if i == 0 {
        let p = (u[1] - u[0]) / h;
        (p, p)
    } else if i == n - 1 {
        let p = (u[n - 1] - u[n - 2]) / h;
        (p, p)
    } else {
        ((u[i] - u[i - 1]) / h, (u[i + 1] - u[i]) / h)
    }
}

fn centered_h(fr: &FrozenHamiltonian, u: &[f64], h: f64) -> Vec<f64> {
    (0..u.len())
        .map(|i| {
            let (pm, pp) = slopes(u, i, h);
            fr.h(i, 0.5 * (pm + pp))
        })
        .collect()
}

/// Substep count from the CFL condition on the terminal slopes.
pub fn cfl_substeps(fr: &FrozenHamiltonian, grid: &SpatialGrid, terminal: &[f64], dt: f64, safety: f64) -> usize {
    let theta = (0..terminal.len())
        .map(|i| {
            let (pm, pp) = slopes(terminal, i, grid.h);
            fr.dp(i, pm).abs().max(fr.dp(i, pp).abs())
        })
        .fold(0.0_f64, f64::max);
    ((dt * theta / (safety * grid.h)).ceil() as usize).max(1)
}

/// Backward solve over `dt` with exactly `substeps` explicit steps.
pub fn solve_interval(
    fr: &FrozenHamiltonian,
    grid: &SpatialGrid,
    terminal: &[f64],
    dt: f64,
    substeps: usize,
    scheme: HjScheme,
    source: &[Vec<f64>],
) -> Result<IntervalSolution> {
    if !(dt > 0.0) || substeps == 0 {
        return Err(MfgError::InvalidParameter(format!("dt {dt}, substeps {substeps}")));
    }
    let n = grid.n_points;
    if terminal.len() != n {
        return Err(MfgError::GridMismatch);
    }
    let h = grid.h;
    let ds = dt / substeps as f64;
    let mut snaps = vec![Vec::new(); substeps + 1];
    snaps[substeps] = terminal.to_vec();
    let mut max_courant = 0.0_f64;
    for j in (0..substeps).rev() {
        let u = &snaps[j + 1];
        let src = source_at(source, j + 1);
        let mut next = vec![0.0; n];
        for i in 0..n {
            let (pm, pp) = slopes(u, i, h);
            let (hv, theta) = numerical_h(scheme, fr, i, pm, pp);
            max_courant = max_courant.max(theta * ds / h);
            let f = src.map_or(0.0, |s| s[i]);
            next[i] = u[i] - ds * (hv - f);
        }
        if max_courant > 1.0 {
            return Err(MfgError::UnstableStep { courant: max_courant, limit: 1.0 });
        }
        snaps[j] = next;
    }
    let mut integrated = vec![0.0; n];
    let mut prev: Option<Vec<f64>> = None;
    for (j, u) in snaps.iter().enumerate() {
        let mut g = centered_h(fr, u, h);
        if let Some(s) = source_at(source, j) {
            g.iter_mut().zip(s).for_each(|(a, b)| *a -= b);
        }
        if let Some(p) = prev {
            integrated.iter_mut().zip(p.iter().zip(&g)).for_each(|(acc, (a, b))| *acc += 0.5 * ds * (a + b));
        }
        prev = Some(g);
    }
    Ok(IntervalSolution { snapshots: snaps, substeps, max_courant, integrated })
}

/// Like [`solve_interval`], choosing the substep count from the CFL condition
/// and doubling it while a step is unstable.
pub fn solve_interval_auto(
    fr: &FrozenHamiltonian,
    grid: &SpatialGrid,
    terminal: &[f64],
    dt: f64,
    opts: &HjOptions,
    source: &[Vec<f64>],
) -> Result<IntervalSolution> {
    if let Some(k) = opts.substeps {
        return solve_interval(fr, grid, terminal, dt, k, opts.scheme, source);
    }
    let mut k = cfl_substeps(fr, grid, terminal, dt, opts.safety);
    for _ in 0..8 {
        match solve_interval(fr, grid, terminal, dt, k, opts.scheme, source) {
            Err(MfgError::UnstableStep { .. }) => k *= 2,
            other => return other,
        }
    }
    solve_interval(fr, grid, terminal, dt, k, opts.scheme, source)
}

/// Solves `-d_t u + H(Du, x) = 0` backward over `dt` from `u_terminal`, with
/// `H` frozen at time `t` and shift `shift`, using the Lax-Friedrichs flux.
pub fn solve_interval_hj(
    u_terminal: &GridFunction,
    h: &QuadraticHamiltonian,
    t: f64,
    shift: f64,
    dt: f64,
    substeps: usize,
) -> Result<GridFunction> {
    let fr = h.freeze(&u_terminal.grid, t, shift);
    let sol = solve_interval(&fr, &u_terminal.grid, &u_terminal.values, dt, substeps, HjScheme::LaxFriedrichs, &[])?;
    GridFunction::new(u_terminal.grid, sol.snapshots[0].clone())
}

/// Gradient at the nodes: centered, except at kinks, where the centered
/// second difference exceeds twice a neighboring one plus a curvature
/// allowance of 4; there the one-sided slope on the smoother side is used.
pub fn kink_aware_gradient(u: &[f64], h: f64) -> Vec<f64> {
    let n = u.len();
    (0..n).map(|i| kink_aware_at(u, i, h)).collect()
}

#[inline]
fn kink_aware_at(u: &[f64], i: usize, h: f64) -> f64 {
    let n = u.len();
    if i == 0 {
        return (u[1] - u[0]) / h;
    }
    if i == n - 1 {
        return (u[n - 1] - u[n - 2]) / h;
    }
    let dc = (u[i + 1] - 2.0 * u[i] + u[i - 1]).abs();
    let dl = if i >= 2 { (u[i] - 2.0 * u[i - 1] + u[i - 2]).abs() } else { f64::INFINITY };
    let dr = if i + 2 < n { (u[i + 2] - 2.0 * u[i + 1] + u[i]).abs() } else { f64::INFINITY };
    if dc <= 2.0 * dl.min(dr) + 4.0 * h * h || (dl.is_infinite() && dr.is_infinite()) {
        0.5 * (u[i + 1] - u[i - 1]) / h
    } else if dl <= dr {
        (u[i] - u[i - 1]) / h
    } else {
        (u[i + 1] - u[i]) / h
    }
}

/// Kink-aware gradient interpolated linearly at `x`.
pub fn gradient_at(grid: &SpatialGrid, u: &[f64], x: f64) -> f64 {
    let (i, w) = grid.locate(x);
    let g0 = kink_aware_at(u, i, grid.h);
    if w == 0.0 || i + 1 >= u.len() {
        return g0;
    }
    (1.0 - w) * g0 + w * kink_aware_at(u, i + 1, grid.h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NodeDiagnostics {
    pub epoch: usize,
    pub node: usize,
    pub sup_norm_u: f64,
    pub lip_u: f64,
    pub semiconc_u: f64,
    /// `max (D²u - lambda u)`.
    pub semiconc_shifted: f64,
    pub sup_norm_m: f64,
}

/// Per-node source of the backward sweep, sampled on the node's substep times.
pub type NodeSource = [Vec<Vec<f64>>];

#[derive(Debug, Clone, PartialEq)]
pub struct BshjSolution {
    pub grid: SpatialGrid,
    /// Value at the right limit `t_n+` of each node's epoch; leaves hold the terminal data.
    pub u_plus: Vec<Vec<f64>>,
    /// Left limit `E[u_plus(child) | node]` at the end of the node's interval.
    pub v: Vec<Vec<f64>>,
    /// Martingale increments on the edges, aligned with `tree.nodes[id].children`.
    pub dm: Vec<Vec<Vec<f64>>>,
    /// Pointwise bounds of the cumulative martingale over all paths reaching a node.
    pub m_upper: Vec<Vec<f64>>,
    pub m_lower: Vec<Vec<f64>>,
    /// Quadrature of `H - F` over each node's interval.
    pub integrated: Vec<Vec<f64>>,
    /// Substep snapshots of each interior node; empty for leaves.
    pub snapshots: Vec<Vec<Vec<f64>>>,
    pub substeps: Vec<usize>,
    pub diagnostics: Vec<NodeDiagnostics>,
}

/// Backward sweep over the tree. `terminal[j]` belongs to the `j`-th leaf;
/// `source`, when given, is indexed by node id.
pub fn backward_sweep(
    tree: &ScenarioTree,
    h: &QuadraticHamiltonian,
    grid: &SpatialGrid,
    terminal: &[Vec<f64>],
    source: Option<&NodeSource>,
    opts: &HjOptions,
) -> Result<BshjSolution> {
    let count = tree.node_count();
    let leaves = tree.leaves();
    if terminal.len() != leaves.len() {
        return Err(MfgError::IncompleteValues {
            epoch: tree.n_steps,
            detail: format!("{} terminal values for {} leaves", terminal.len(), leaves.len()),
        });
    }
    let mut u_plus = vec![Vec::new(); count];
    let mut v = vec![Vec::new(); count];
    let mut integrated = vec![Vec::new(); count];
    let mut snapshots = vec![Vec::new(); count];
    let mut substeps = vec![0; count];
    for (j, &l) in leaves.iter().enumerate() {
        if terminal[j].len() != grid.n_points {
            return Err(MfgError::GridMismatch);
        }
        u_plus[l] = terminal[j].clone();
        v[l] = terminal[j].clone();
    }
    let dt = tree.dt();
    for e in (0..tree.n_steps).rev() {
        let t = tree.time(e);
        let results: Vec<Result<(usize, Vec<f64>, IntervalSolution)>> = tree.epochs[e]
            .par_iter()
            .map(|&node| {
                let vn = tree.expect_children(node, |c| &u_plus[c]);
                let fr = h.freeze(grid, t, tree.shift(node));
                let src: &[Vec<f64>] = source.map_or(&[], |s| &s[node]);
                let sol = solve_interval_auto(&fr, grid, &vn, dt, opts, src)?;
                Ok((node, vn, sol))
            })
            .collect();
        for r in results {
            let (node, vn, sol) = r?;
            u_plus[node] = sol.snapshots[0].clone();
            v[node] = vn;
            integrated[node] = sol.integrated;
            substeps[node] = sol.substeps;
            snapshots[node] = sol.snapshots;
        }
    }
    let mut dm: Vec<Vec<Vec<f64>>> = vec![Vec::new(); count];
    for node in &tree.nodes {
        dm[node.id] = node
            .children
            .iter()
            .map(|&(c, _)| u_plus[c].iter().zip(&v[node.id]).map(|(a, b)| a - b).collect())
            .collect();
    }
    let n = grid.n_points;
    let mut m_upper = vec![vec![f64::NEG_INFINITY; n]; count];
    let mut m_lower = vec![vec![f64::INFINITY; n]; count];
    m_upper[0] = vec![0.0; n];
    m_lower[0] = vec![0.0; n];
    for e in 0..tree.n_steps {
        for &p in &tree.epochs[e] {
            for (k, &(c, _)) in tree.nodes[p].children.iter().enumerate() {
                for i in 0..n {
                    let d = dm[p][k][i];
                    m_upper[c][i] = m_upper[c][i].max(m_upper[p][i] + d);
                    m_lower[c][i] = m_lower[c][i].min(m_lower[p][i] + d);
                }
            }
        }
    }
    let mut diagnostics = Vec::with_capacity(count);
    for node in &tree.nodes {
        let u = &u_plus[node.id];
        let nm = norms_of(grid, u)?;
        let shifted = u
            .windows(3)
            .enumerate()
            .map(|(i, w)| (w[2] - 2.0 * w[1] + w[0]) / (grid.h * grid.h) - h.lambda * u[i + 1])
            .fold(f64::NEG_INFINITY, f64::max);
        let sup_m = m_upper[node.id]
            .iter()
            .chain(&m_lower[node.id])
            .fold(0.0_f64, |m, x| m.max(x.abs()));
        diagnostics.push(NodeDiagnostics {
            epoch: node.epoch,
            node: node.id,
            sup_norm_u: nm.sup_norm,
            lip_u: nm.lip_constant,
            semiconc_u: nm.semiconcavity_constant,
            semiconc_shifted: shifted,
            sup_norm_m: sup_m,
        });
    }
    Ok(BshjSolution { grid: *grid, u_plus, v, dm, m_upper, m_lower, integrated, snapshots, substeps, diagnostics })
}

/// Backward stochastic HJ solve with terminal data per leaf and no coupling source.
pub fn solve_bshj(tree: &ScenarioTree, h: &QuadraticHamiltonian, g_terminal: &[GridFunction]) -> Result<BshjSolution> {
    solve_bshj_with(tree, h, g_terminal, &HjOptions::default())
}

pub fn solve_bshj_with(
    tree: &ScenarioTree,
    h: &QuadraticHamiltonian,
    g_terminal: &[GridFunction],
    opts: &HjOptions,
) -> Result<BshjSolution> {
    let grid = g_terminal
        .first()
        .ok_or_else(|| MfgError::IncompleteValues { epoch: tree.n_steps, detail: "no terminal data".into() })?
        .grid;
    if g_terminal.iter().any(|g| !g.grid.same_as(&grid)) {
        return Err(MfgError::GridMismatch);
    }
    let terminal: Vec<Vec<f64>> = g_terminal.iter().map(|g| g.values.clone()).collect();
    backward_sweep(tree, h, &grid, &terminal, None, opts)
}

/// Same terminal function at every leaf, evaluated at the leaf's shifted coordinates.
pub fn shifted_terminal(tree: &ScenarioTree, grid: &SpatialGrid, g: impl Fn(f64) -> f64) -> Vec<GridFunction> {
    tree.leaves()
        .iter()
        .map(|&l| {
            let s = tree.shift(l);
            GridFunction::from_fn(*grid, |x| g(x + s))
        })
        .collect()
}

impl BshjSolution {
    pub fn u_at(&self, node: usize) -> GridFunction {
        GridFunction { grid: self.grid, values: self.u_plus[node].clone() }
    }

    pub fn root_value(&self) -> &[f64] {
        &self.u_plus[0]
    }

    /// Largest `|sum_c q_c dM_c|` over nodes and grid points.
    pub fn martingale_defect(&self, tree: &ScenarioTree) -> f64 {
        let mut worst = 0.0_f64;
        for node in &tree.nodes {
            if node.children.is_empty() {
                continue;
            }
            for i in 0..self.grid.n_points {
                let s: f64 = node.children.iter().enumerate().map(|(k, &(_, q))| q * self.dm[node.id][k][i]).sum();
                worst = worst.max(s.abs());
            }
        }
        worst
    }

    /// Cumulative martingale along a root-to-leaf path; entry 0 is the root (zero).
    pub fn martingale_along(&self, tree: &ScenarioTree, path: &TreePath) -> Result<Vec<Vec<f64>>> {
        tree.check_path(path)?;
        let n = self.grid.n_points;
        let mut out = vec![vec![0.0; n]];
        for w in path.nodes.windows(2) {
            let k = tree.nodes[w[0]].children.iter().position(|c| c.0 == w[1]).expect("checked path");
            let prev = out.last().expect("nonempty");
            let next = prev.iter().zip(&self.dm[w[0]][k]).map(|(a, b)| a + b).collect();
            out.push(next);
        }
        Ok(out)
    }

    /// Largest deviation, along `path`, between `u(t_k+)` and its reconstruction
    /// `G - sum_{j >= k} int (H - F) - (M_T - M_{t_k})` from quadrature of the
    /// snapshots.
    pub fn reconstruction_residual(&self, tree: &ScenarioTree, path: &TreePath) -> Result<f64> {
        let m = self.martingale_along(tree, path)?;
        let n = self.grid.n_points;
        let leaf = path.leaf();
        let big_n = tree.n_steps;
        let mut worst = 0.0_f64;
        let mut tail = vec![0.0; n];
        for k in (0..=big_n).rev() {
            let node = path.nodes[k];
            if k < big_n {
                tail.iter_mut().zip(&self.integrated[node]).for_each(|(a, b)| *a += b);
            }
            for i in 0..n {
                let rec = self.u_plus[leaf][i] - tail[i] - (m[big_n][i] - m[k][i]);
                worst = worst.max((self.u_plus[node][i] - rec).abs());
            }
        }
        Ok(worst)
    }

    /// Substep snapshot index and weight for time `t` inside the node's interval.
    fn snapshot_pos(&self, tree: &ScenarioTree, node: usize, t: f64) -> (usize, f64) {
        let k = self.substeps[node];
        let e = tree.nodes[node].epoch;
        let s = ((t - tree.time(e)) / tree.dt() * k as f64).clamp(0.0, k as f64);
        let j = (s.floor() as usize).min(k.saturating_sub(1));
        (j, s - j as f64)
    }

    /// `Du` of the node's value at time `t` in its interval and position `x`.
    pub fn gradient(&self, tree: &ScenarioTree, node: usize, t: f64, x: f64) -> f64 {
        if self.snapshots[node].is_empty() {
            return gradient_at(&self.grid, &self.u_plus[node], x);
        }
        let (j, w) = self.snapshot_pos(tree, node, t);
        let g0 = gradient_at(&self.grid, &self.snapshots[node][j], x);
        if w == 0.0 {
            return g0;
        }
        (1.0 - w) * g0 + w * gradient_at(&self.grid, &self.snapshots[node][j + 1], x)
    }

    /// Optimal feedback `-D_p H(Du, x)` in shifted coordinates.
    pub fn optimal_control(&self, tree: &ScenarioTree, h: &QuadraticHamiltonian, node: usize, t: f64, x: f64) -> f64 {
        let e = tree.nodes[node].epoch;
        let p = self.gradient(tree, node, t, x);
        -h.eval_h(p, x, tree.time(e), tree.shift(node)).1
    }
}

/// Source value at `(node, t, x)`, from substep samples.
fn source_value(tree: &ScenarioTree, source: Option<&NodeSource>, grid: &SpatialGrid, node: usize, t: f64, x: f64) -> f64 {
    let Some(src) = source else { return 0.0 };
    let s = &src[node];
    if s.is_empty() {
        return 0.0;
    }
    if s.len() == 1 {
        return grid.interpolate(&s[0], x);
    }
    let k = s.len() - 1;
    let e = tree.nodes[node].epoch;
    let pos = ((t - tree.time(e)) / tree.dt() * k as f64).clamp(0.0, k as f64);
    let j = (pos.floor() as usize).min(k - 1);
    let w = pos - j as f64;
    (1.0 - w) * grid.interpolate(&s[j], x) + w * grid.interpolate(&s[j + 1], x)
}

fn source_slope(tree: &ScenarioTree, source: Option<&NodeSource>, grid: &SpatialGrid, node: usize, t: f64, x: f64) -> f64 {
    let Some(src) = source else { return 0.0 };
    let s = &src[node];
    if s.is_empty() {
        return 0.0;
    }
    let k = s.len() - 1;
    let e = tree.nodes[node].epoch;
    let j = if k == 0 {
        0
    } else {
        (((t - tree.time(e)) / tree.dt() * k as f64).round() as usize).min(k)
    };
    gradient_at(grid, &s[j], x)
}

/// Monte Carlo estimate at one starting point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlEstimate {
    pub x: f64,
    pub mean: f64,
    /// Half-width of the 95% confidence interval.
    pub ci: f64,
}

/// Problem data for trajectory evaluations on a solved tree.
pub struct ControlProblem<'a> {
    pub tree: &'a ScenarioTree,
    pub h: &'a QuadraticHamiltonian,
    pub grid: &'a SpatialGrid,
    /// Coupling potential per node, sampled on substep times.
    pub source: Option<&'a NodeSource>,
    /// Terminal cost per leaf, in leaf order.
    pub terminal: &'a [Vec<f64>],
    pub euler_steps: usize,
}

impl ControlProblem<'_> {
    fn terminal_of(&self, leaf: usize) -> &[f64] {
        let first = self.tree.leaves()[0];
        &self.terminal[leaf - first]
    }

    /// Cost of one trajectory along a tree path under `feedback(x, t, node)`.
    pub fn path_cost(&self, path: &TreePath, x0: f64, feedback: &(dyn Fn(f64, f64, usize) -> f64 + Sync)) -> Result<f64> {
        let tree = self.tree;
        let de = tree.dt() / self.euler_steps as f64;
        let mut x = x0;
        let mut cost = 0.0;
        for e in 0..tree.n_steps {
            let node = path.nodes[e];
            let (tn, shift) = (tree.time(e), tree.shift(node));
            for j in 0..self.euler_steps {
                let t = tn + j as f64 * de;
                let alpha = feedback(x, t, node);
                cost += de * (self.h.running_cost(alpha, x, tn, shift) + source_value(tree, self.source, self.grid, node, t, x));
                x += de * alpha;
                if !self.grid.contains(x) {
                    return Err(MfgError::DomainExit { x, t: t + de });
                }
            }
        }
        Ok(cost + self.grid.interpolate(self.terminal_of(path.leaf()), x))
    }
}

/// Expected cost `E[int (L + F) dt + G(x_T)]` of `feedback` from each `x0`,
/// by Monte Carlo over sampled tree paths.
pub fn control_value(
    problem: &ControlProblem,
    feedback: &(dyn Fn(f64, f64, usize) -> f64 + Sync),
    x0: &[f64],
    n_paths: usize,
    seed: u64,
) -> Result<Vec<ControlEstimate>> {
    if n_paths < 2 {
        return Err(MfgError::InvalidParameter("need at least two paths".into()));
    }
    let costs: Vec<Result<Vec<f64>>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(p as u64);
            let path = problem.tree.sample_path_with(&mut rng);
            x0.iter().map(|&x| problem.path_cost(&path, x, feedback)).collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0.0); x0.len()];
    for c in costs {
        for (s, v) in sums.iter_mut().zip(c?) {
            s.0 += v;
            s.1 += v * v;
        }
    }
    let n = n_paths as f64;
    Ok(x0
        .iter()
        .zip(sums)
        .map(|(&x, (s, s2))| {
            let mean = s / n;
            let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
            ControlEstimate { x, mean, ci: 1.96 * (var / n).sqrt() }
        })
        .collect())
}

/// Optimal trajectory and costate along one tree path.
#[derive(Debug, Clone, PartialEq)]
pub struct CostatePath {
    pub times: Vec<f64>,
    pub gamma: Vec<f64>,
    pub gamma_dot: Vec<f64>,
    /// `E[int_t^T D_x L ds + DG(x_T) | F_t]` along the path.
    pub pbar: Vec<f64>,
    /// `Du` at `(t, gamma_t)` on the path node.
    pub grad_u: Vec<f64>,
    /// `gamma_dot + D_p H(pbar, gamma)`.
    pub feedback_residual: Vec<f64>,
}

/// Costate of the optimal trajectory from `x0` along `path`, computed by
/// expectation over the whole subtree below each path node.
pub fn costate_along_path(problem: &ControlProblem, sol: &BshjSolution, path: &TreePath, x0: f64) -> Result<CostatePath> {
    let tree = problem.tree;
    tree.check_path(path)?;
    let de = tree.dt() / problem.euler_steps as f64;
    let mut out = CostatePath {
        times: vec![],
        gamma: vec![],
        gamma_dot: vec![],
        pbar: vec![],
        grad_u: vec![],
        feedback_residual: vec![],
    };
    let mut x = x0;
    for e in 0..tree.n_steps {
        let node = path.nodes[e];
        let (tn, shift) = (tree.time(e), tree.shift(node));
        let mut xs = Vec::with_capacity(problem.euler_steps);
        let mut dl = Vec::with_capacity(problem.euler_steps);
        let mut al = Vec::with_capacity(problem.euler_steps);
        for j in 0..problem.euler_steps {
            let t = tn + j as f64 * de;
            let alpha = sol.optimal_control(tree, problem.h, node, t, x);
            xs.push(x);
            al.push(alpha);
            dl.push(problem.h.running_cost_dx(alpha, x, tn, shift) + source_slope(tree, problem.source, problem.grid, node, t, x));
            x += de * alpha;
            if !problem.grid.contains(x) {
                return Err(MfgError::DomainExit { x, t: t + de });
            }
        }
        let mut tail: f64 = tree.nodes[node]
            .children
            .iter()
            .map(|&(c, q)| Ok(q * subtree_costate(problem, sol, c, x)?))
            .sum::<Result<f64>>()?;
        let mut local = vec![0.0; problem.euler_steps];
        for j in (0..problem.euler_steps).rev() {
            tail += de * dl[j];
            local[j] = tail;
        }
        for j in 0..problem.euler_steps {
            let t = tn + j as f64 * de;
            let a_dot = problem.h.eval_h(local[j], xs[j], tn, shift).1;
            out.times.push(t);
            out.gamma.push(xs[j]);
            out.gamma_dot.push(al[j]);
            out.pbar.push(local[j]);
            out.grad_u.push(sol.gradient(tree, node, t, xs[j]));
            out.feedback_residual.push(al[j] + a_dot);
        }
    }
    Ok(out)
}

fn subtree_costate(problem: &ControlProblem, sol: &BshjSolution, node: usize, x0: f64) -> Result<f64> {
    let tree = problem.tree;
    let nd = &tree.nodes[node];
    if nd.children.is_empty() {
        return Ok(gradient_at(problem.grid, problem.terminal_of(node), x0));
    }
    let de = tree.dt() / problem.euler_steps as f64;
    let (tn, shift) = (tree.time(nd.epoch), tree.shift(node));
    let mut x = x0;
    let mut acc = 0.0;
    for j in 0..problem.euler_steps {
        let t = tn + j as f64 * de;
        let alpha = sol.optimal_control(tree, problem.h, node, t, x);
        acc += de * (problem.h.running_cost_dx(alpha, x, tn, shift) + source_slope(tree, problem.source, problem.grid, node, t, x));
        x += de * alpha;
        if !problem.grid.contains(x) {
            return Err(MfgError::DomainExit { x, t: t + de });
        }
    }
    let mut tail = 0.0;
    for &(c, q) in &nd.children {
        tail += q * subtree_costate(problem, sol, c, x)?;
    }
    Ok(acc + tail)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hamiltonian::Coefficient;
    use crate::noise::build_tree;

    fn grid() -> SpatialGrid {
        SpatialGrid::new(-5.0, 5.0, 257).unwrap()
    }

    fn hopf_lax_abs(x: f64, tau: f64) -> f64 {
        // Oracle: brute-force minimization of |y| + (x - y)² / (2 tau).
        (0..=40_000)
            .map(|k| {
                let y = -10.0 + 20.0 * k as f64 / 40_000.0;
                y.abs() + (x - y) * (x - y) / (2.0 * tau)
            })
            .fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn constant_terminal_preserved() {
        let g = grid();
        let u = GridFunction::constant(g, 1.7);
        let out = solve_interval_hj(&u, &QuadraticHamiltonian::kinetic(), 0.0, 0.0, 1.0, 10).unwrap();
        assert!(out.values.iter().all(|v| (v - 1.7).abs() < 1e-14));
    }

    #[test]
    fn hopf_lax_abs_within_two_h() {
        let g = grid();
        let u = GridFunction::from_fn(g, f64::abs);
        let fr = QuadraticHamiltonian::kinetic().freeze(&g, 0.0, 0.0);
        for scheme in [HjScheme::LaxFriedrichs, HjScheme::Godunov] {
            let opts = HjOptions { scheme, ..Default::default() };
            let sol = solve_interval_auto(&fr, &g, &u.values, 1.0, &opts, &[]).unwrap();
            let err = g.ball(4.0).map(|i| (sol.start()[i] - hopf_lax_abs(g.x(i), 1.0)).abs()).fold(0.0, f64::max);
            assert!(err <= 2.0 * g.h, "{scheme:?}: {err}");
        }
        // Closed form of the same oracle.
        assert!((hopf_lax_abs(0.5, 1.0) - 0.125).abs() < 1e-6);
        assert!((hopf_lax_abs(2.0, 1.0) - 1.5).abs() < 1e-6);
    }

    #[test]
    fn unit_source_gives_time_to_go() {
        let g = grid();
        let fr = QuadraticHamiltonian::kinetic().freeze(&g, 0.0, 0.0);
        let src = vec![vec![1.0; g.n_points]];
        let sol = solve_interval(&fr, &g, &vec![0.0; g.n_points], 0.75, 5, HjScheme::LaxFriedrichs, &src).unwrap();
        assert!(sol.start().iter().all(|v| (v - 0.75).abs() < 1e-14));
        assert!(sol.integrated.iter().all(|v| (v + 0.75).abs() < 1e-14));
    }

    #[test]
    fn cfl_violation_is_reported() {
        let g = grid();
        let fr = QuadraticHamiltonian::kinetic().freeze(&g, 0.0, 0.0);
        let u: Vec<f64> = g.nodes().iter().map(|x| 3.0 * x).collect();
        let r = solve_interval(&fr, &g, &u, 1.0, 2, HjScheme::LaxFriedrichs, &[]);
        assert!(matches!(r, Err(MfgError::UnstableStep { .. })));
    }

    #[test]
    fn zero_beta_has_no_martingale() {
        let g = grid();
        let tree = build_tree(1.0, 3, 2, 0.0, false).unwrap();
        let h = QuadraticHamiltonian::kinetic();
        let gt = shifted_terminal(&tree, &g, |x| (x).cos());
        let sol = solve_bshj(&tree, &h, &gt).unwrap();
        assert!(sol.dm.iter().flatten().flatten().all(|d| *d == 0.0));
        // Deterministic time stepping with the same substep rule.
        let chain = ScenarioTree::deterministic(1.0, 3);
        let det = solve_bshj(&chain, &h, &shifted_terminal(&chain, &g, |x| x.cos())).unwrap();
        assert_eq!(sol.u_plus[0], det.u_plus[0]);
    }

    #[test]
    fn two_scenario_oracle() {
        let g = grid();
        let beta = 0.1;
        let tree = build_tree(1.0, 1, 2, beta, false).unwrap();
        let h = QuadraticHamiltonian::kinetic();
        let gfun = |x: f64| 0.5 * (x).sin();
        let sol = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, gfun)).unwrap();
        let s = (2.0 * beta).sqrt();
        let avg: Vec<f64> = (0..g.n_points).map(|i| 0.5 * (gfun(g.x(i) + s) + gfun(g.x(i) - s))).collect();
        let k = sol.substeps[0];
        let direct = solve_interval_hj(&GridFunction::new(g, avg).unwrap(), &h, 0.0, 0.0, 1.0, k).unwrap();
        assert_eq!(sol.u_plus[0], direct.values);
        assert!(sol.martingale_defect(&tree) < 1e-15);
        let du = &sol.dm[0][0];
        assert!(du.iter().zip(&sol.dm[0][1]).all(|(a, b)| (a + b).abs() < 1e-15));
    }

    #[test]
    fn martingale_and_reconstruction() {
        let g = grid();
        let h = QuadraticHamiltonian::new(
            Coefficient::SinX { base: 1.0, amp: 0.3, freq: 1.0 },
            Coefficient::Constant(0.2),
            Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 },
            4.0,
            0.0,
        )
        .unwrap();
        for rec in [false, true] {
            let tree = build_tree(1.0, 4, 2, 0.2, rec).unwrap();
            let sol = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, |x| 0.5 * x.cos())).unwrap();
            assert!(sol.martingale_defect(&tree) <= 1e-12);
            for seed in 0..5 {
                let p = tree.sample_path(seed);
                let tol = 5.0 * g.h + 5.0 * tree.dt();
                assert!(sol.reconstruction_residual(&tree, &p).unwrap() <= tol);
            }
        }
    }

    #[test]
    fn zero_cost_control_is_zero() {
        let g = grid();
        let tree = build_tree(1.0, 2, 2, 0.1, false).unwrap();
        let h = QuadraticHamiltonian::kinetic();
        let terminal = vec![vec![0.0; g.n_points]; 4];
        let prob = ControlProblem { tree: &tree, h: &h, grid: &g, source: None, terminal: &terminal, euler_steps: 4 };
        let est = control_value(&prob, &|_, _, _| 0.0, &[0.0, 1.0], 16, 1).unwrap();
        assert!(est.iter().all(|e| e.mean == 0.0 && e.ci == 0.0));
    }

    #[test]
    fn lq_costate_matches_riccati() {
        let g = grid();
        let tree = ScenarioTree::deterministic(1.0, 4);
        let h = QuadraticHamiltonian::kinetic();
        let gt = shifted_terminal(&tree, &g, |x| 0.5 * x * x);
        let sol = solve_bshj(&tree, &h, &gt).unwrap();
        let terminal: Vec<Vec<f64>> = gt.iter().map(|f| f.values.clone()).collect();
        let prob = ControlProblem { tree: &tree, h: &h, grid: &g, source: None, terminal: &terminal, euler_steps: 50 };
        let path = tree.sample_path(0);
        let cp = costate_along_path(&prob, &sol, &path, 1.5).unwrap();
        for k in 0..cp.times.len() {
            let exact = cp.gamma[k] / (1.0 + 1.0 - cp.times[k]);
            assert!((cp.pbar[k] - exact).abs() <= 5.0 * g.h);
            assert!((cp.grad_u[k] - exact).abs() <= 5.0 * g.h);
        }
    }

    #[test]
    fn flat_terminal_has_zero_costate() {
        let g = grid();
        let tree = build_tree(1.0, 3, 2, 0.1, false).unwrap();
        let h = QuadraticHamiltonian::kinetic();
        let gt = shifted_terminal(&tree, &g, |_| 2.0);
        let sol = solve_bshj(&tree, &h, &gt).unwrap();
        let terminal: Vec<Vec<f64>> = gt.iter().map(|f| f.values.clone()).collect();
        let prob = ControlProblem { tree: &tree, h: &h, grid: &g, source: None, terminal: &terminal, euler_steps: 5 };
        let cp = costate_along_path(&prob, &sol, &tree.sample_path(3), 0.3).unwrap();
        assert!(cp.pbar.iter().all(|p| *p == 0.0));
        assert!(cp.gamma.iter().all(|x| *x == 0.3));
    }

    #[test]
    fn kink_gradient_picks_smooth_side() {
        let g = SpatialGrid::new(-1.0, 1.0, 21).unwrap();
        let u: Vec<f64> = g.nodes().iter().map(|x| -x.abs()).collect();
        let d = kink_aware_gradient(&u, g.h);
        assert!((d[10].abs() - 1.0).abs() < 1e-12);
        assert!((d[5] - 1.0).abs() < 1e-12 && (d[15] + 1.0).abs() < 1e-12);
    }
}
