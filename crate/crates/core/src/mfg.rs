//! Mean field game fixed points.
//!
//! One engine serves the deterministic and the stochastic problem: it works
//! on a scenario tree, and a deterministic problem is a single-path tree. Each
//! sweep solves the HJ equations backward on every node with the coupling
//! evaluated along the current measure path, transports the initial density
//! forward along the resulting drift, and averages the new measure path into
//! the old one.

use crate::coupling::MonotoneCoupling;
use crate::error::{MfgError, Result};
use crate::grid::{d1_values, DensityField, GridFunction, SpatialGrid};
use crate::hamiltonian::{Coefficient, QuadraticHamiltonian, TimeModulus};
use crate::hj::{backward_sweep, BshjSolution, HjOptions};
use crate::noise::ScenarioTree;
use crate::transport::{solve_continuity, DriftField};
use rayon::prelude::*;

/// Terminal cost `G(x, m) = g(x) + coupling(x, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TerminalCost {
    pub g: Coefficient,
    pub coupling: Option<MonotoneCoupling>,
}

impl TerminalCost {
    pub fn fixed(g: Coefficient) -> Self {
        Self { g, coupling: None }
    }

    pub fn depends_on_m(&self) -> bool {
        self.coupling.as_ref().is_some_and(|c| !c.is_zero())
    }

    /// Values in shifted coordinates at a node with shift `shift`.
    pub fn values(&self, grid: &SpatialGrid, m: &[f64], t: f64, shift: f64) -> Vec<f64> {
        let mut out: Vec<f64> = grid.nodes().iter().map(|&x| self.g.eval(x + shift, t)).collect();
        if let Some(c) = self.coupling.as_ref().filter(|c| !c.is_zero()) {
            out.iter_mut().zip(c.eval_values(m, t, shift)).for_each(|(a, b)| *a += b);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MfgProblem {
    pub h: QuadraticHamiltonian,
    /// Running coupling `F`.
    pub coupling: MonotoneCoupling,
    pub terminal: TerminalCost,
    pub m0: DensityField,
}

impl MfgProblem {
    pub fn grid(&self) -> SpatialGrid {
        self.m0.grid
    }

    pub fn is_decoupled(&self) -> bool {
        self.coupling.is_zero() && !self.terminal.depends_on_m()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Damping {
    /// Fictitious play, weight `1/(k+1)` on the new iterate.
    Harmonic,
    Constant(f64),
    /// Starts at the given weight and halves it whenever the residual fails to decrease.
    Adaptive(f64),
}

const MIN_WEIGHT: f64 = 1.0 / 1024.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Initialization {
    /// Measure path frozen at the initial density.
    Frozen,
    /// Measure path of the problem without coupling.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FixedPointConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub damping: Damping,
    pub init: Initialization,
    pub hj: HjOptions,
    /// Courant number of the transport steps.
    pub cfl: f64,
    /// Factor applied to the substep count found on the decoupled problem.
    pub substep_margin: f64,
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self {
            max_iters: 200,
            tol: 1e-6,
            damping: Damping::Harmonic,
            init: Initialization::Decoupled,
            hj: HjOptions::default(),
            cfl: 1.0,
            substep_margin: 1.5,
        }
    }
}

/// Coupled solution on a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticMfgSolution {
    pub tree: ScenarioTree,
    /// Values, martingale increments and diagnostics.
    pub u: BshjSolution,
    /// Density at each node's epoch start.
    pub m: Vec<DensityField>,
    /// Density snapshots over each interior node's interval.
    pub m_paths: Vec<Vec<Vec<f64>>>,
    /// Coupling potential per interior node and substep.
    pub source: Vec<Vec<Vec<f64>>>,
    /// Terminal cost per leaf, in leaf order.
    pub terminal: Vec<Vec<f64>>,
    pub boundary_flux: Vec<f64>,
    pub max_mass_error: f64,
    pub substeps: usize,
    pub iterations: usize,
    pub residual: f64,
    pub history: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicMfgSolution {
    pub times: Vec<f64>,
    pub u: Vec<GridFunction>,
    pub m: Vec<DensityField>,
    pub fixed_point_residual: f64,
    pub iterations: usize,
    pub lattice: StochasticMfgSolution,
}

/// Per-epoch maxima over nodes of `|u|`, `sup m` and the second moment.
#[derive(Debug, Clone, PartialEq)]
pub struct Estimates {
    pub u_sup: Vec<f64>,
    pub m_sup: Vec<f64>,
    pub second_moment: Vec<f64>,
}

fn frozen_drifts(tree: &ScenarioTree, h: &QuadraticHamiltonian, grid: &SpatialGrid, hj: &BshjSolution) -> Vec<DriftField> {
    let interior = tree.node_count() - tree.leaves().len();
    (0..interior)
        .into_par_iter()
        .map(|node| {
            let fr = h.freeze(grid, tree.time(tree.nodes[node].epoch), tree.shift(node));
            DriftField::from_snapshots(*grid, &fr, &hj.snapshots[node], tree.dt())
        })
        .collect()
}

fn terminal_values(tree: &ScenarioTree, p: &MfgProblem, node_m: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let grid = p.grid();
    let t = tree.time(tree.n_steps);
    tree.leaves().iter().map(|&l| p.terminal.values(&grid, &node_m[l], t, tree.shift(l))).collect()
}

const MAX_SUBSTEPS: usize = 1 << 14;

/// Doubles the number of substeps of a snapshot path by linear interpolation.
fn refine_in_time(path: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(2 * path.len() - 1);
    for w in path.windows(2) {
        out.push(w[0].clone());
        out.push(w[0].iter().zip(&w[1]).map(|(a, b)| 0.5 * (a + b)).collect());
    }
    out.extend(path.last().cloned());
    out
}

/// Runs the damped fixed point on `tree`.
pub fn solve_on_tree(tree: &ScenarioTree, p: &MfgProblem, cfg: &FixedPointConfig) -> Result<StochasticMfgSolution> {
    let grid = p.grid();
    let count = tree.node_count();
    let interior = count - tree.leaves().len();
    let h = &p.h;
    // Substep count from the decoupled problem, shared by both initializations.
    let m0_all = vec![p.m0.values.clone(); count];
    let terminal0 = terminal_values(tree, p, &m0_all);
    let frozen: Vec<Vec<Vec<f64>>> = (0..interior)
        .map(|node| vec![p.coupling.eval_values(&p.m0.values, tree.time(tree.nodes[node].epoch), tree.shift(node))])
        .collect();
    let mut k_probe = 1;
    for src in [None, Some(frozen.as_slice())] {
        let probe = backward_sweep(tree, h, &grid, &terminal0, src, &cfg.hj)?;
        k_probe = k_probe.max(probe.substeps.iter().copied().max().unwrap_or(1));
    }
    let mut k = cfg
        .hj
        .substeps
        .unwrap_or_else(|| ((k_probe as f64 * cfg.substep_margin).ceil() as usize).max(1));
    let mut opts = HjOptions { substeps: Some(k), ..cfg.hj };

    let (mut paths, mut node_m): (Vec<Vec<Vec<f64>>>, Vec<Vec<f64>>) = match cfg.init {
        Initialization::Frozen => (vec![vec![p.m0.values.clone(); k + 1]; interior], m0_all),
        Initialization::Decoupled => {
            let hj0 = backward_sweep(tree, h, &grid, &terminal_values(tree, p, &m0_all), None, &opts)?;
            let cont = solve_continuity(tree, &frozen_drifts(tree, h, &grid, &hj0), &p.m0, cfg.cfl)?;
            (cont.paths.into_iter().take(interior).collect(), cont.m.into_iter().map(|d| d.values).collect())
        }
    };

    let mut history = Vec::new();
    let mut prev_u: Option<Vec<Vec<f64>>> = None;
    let mut adaptive = match cfg.damping {
        Damping::Adaptive(w) => w,
        _ => 1.0,
    };
    let mut it = 0;
    while it < cfg.max_iters {
        let source: Vec<Vec<Vec<f64>>> = (0..interior)
            .into_par_iter()
            .map(|node| {
                let (t, s) = (tree.time(tree.nodes[node].epoch), tree.shift(node));
                paths[node].iter().map(|m| p.coupling.eval_values(m, t, s)).collect()
            })
            .collect();
        let terminal = terminal_values(tree, p, &node_m);
        let hj = match backward_sweep(tree, h, &grid, &terminal, Some(&source), &opts) {
            Ok(hj) => hj,
            Err(MfgError::UnstableStep { .. }) if cfg.hj.substeps.is_none() && k < MAX_SUBSTEPS => {
                // Steeper iterates need finer steps; refine the stored paths in time.
                k *= 2;
                opts.substeps = Some(k);
                paths.iter_mut().for_each(|path| *path = refine_in_time(path));
                continue;
            }
            Err(e) => return Err(e),
        };
        it += 1;
        let cont = solve_continuity(tree, &frozen_drifts(tree, h, &grid, &hj), &p.m0, cfg.cfl)?;

        let mut res_m = 0.0_f64;
        for node in 0..interior {
            for (a, b) in paths[node].iter().zip(&cont.paths[node]) {
                res_m = res_m.max(d1_values(&grid, a, b));
            }
        }
        for &l in tree.leaves() {
            res_m = res_m.max(d1_values(&grid, &node_m[l], &cont.m[l].values));
        }
        let res_u = prev_u.as_ref().map_or(0.0, |pu| {
            pu.iter()
                .zip(&hj.u_plus)
                .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
                .fold(0.0_f64, f64::max)
        });
        let residual = res_m.max(res_u);
        history.push(residual);
        if residual <= cfg.tol {
            return Ok(StochasticMfgSolution {
                tree: tree.clone(),
                u: hj,
                m: cont.m,
                m_paths: cont.paths.into_iter().take(interior).collect(),
                source,
                terminal,
                boundary_flux: cont.boundary_flux,
                max_mass_error: cont.max_mass_error,
                substeps: k,
                iterations: it,
                residual,
                history,
            });
        }
        let w = match cfg.damping {
            Damping::Harmonic => 1.0 / (it as f64 + 1.0),
            Damping::Constant(w) => w,
            Damping::Adaptive(_) => {
                if history.len() >= 2 && residual >= history[history.len() - 2] {
                    adaptive = (adaptive * 0.5).max(MIN_WEIGHT);
                }
                adaptive
            }
        };
        for (old, new) in paths.iter_mut().zip(&cont.paths) {
            for (a, b) in old.iter_mut().zip(new) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x = (1.0 - w) * *x + w * y);
            }
        }
        for (old, new) in node_m.iter_mut().zip(&cont.m) {
            old.iter_mut().zip(&new.values).for_each(|(x, y)| *x = (1.0 - w) * *x + w * y);
        }
        prev_u = Some(hj.u_plus);
    }
    Err(MfgError::FixedPointFailure {
        iterations: cfg.max_iters,
        last_residual: history.last().copied().unwrap_or(f64::INFINITY),
        history,
    })
}

/// Stochastic MFG on a scenario tree.
pub fn solve_stochastic_mfg(tree: &ScenarioTree, p: &MfgProblem, cfg: &FixedPointConfig) -> Result<StochasticMfgSolution> {
    if !p.coupling.grid.same_as(&p.grid()) {
        return Err(MfgError::GridMismatch);
    }
    solve_on_tree(tree, p, cfg)
}

/// Deterministic MFG on `[t_a, t_b]`, with the Hamiltonian frozen on each of `segments` pieces.
pub fn solve_deterministic_mfg(
    p: &MfgProblem,
    interval: (f64, f64),
    segments: usize,
    cfg: &FixedPointConfig,
) -> Result<DeterministicMfgSolution> {
    let tree = ScenarioTree::deterministic_on(interval.0, interval.1, segments)?;
    let lat = solve_stochastic_mfg(&tree, p, cfg)?;
    let grid = p.grid();
    let ds = tree.dt() / lat.substeps as f64;
    let mut times = Vec::new();
    let mut u = Vec::new();
    let mut m = Vec::new();
    for e in 0..tree.n_steps {
        for j in 0..lat.substeps {
            times.push(tree.time(e) + j as f64 * ds);
            u.push(GridFunction { grid, values: lat.u.snapshots[e][j].clone() });
            m.push(DensityField { grid, values: lat.m_paths[e][j].clone() });
        }
    }
    let leaf = tree.leaves()[0];
    times.push(tree.time(tree.n_steps));
    u.push(lat.u.u_at(leaf));
    m.push(lat.m[leaf].clone());
    Ok(DeterministicMfgSolution { times, u, m, fixed_point_residual: lat.residual, iterations: lat.iterations, lattice: lat })
}

impl DeterministicMfgSolution {
    /// Value at time `t`, linear between stored times.
    pub fn value_at(&self, t: f64) -> Vec<f64> {
        let j = self.times.partition_point(|&s| s <= t).clamp(1, self.times.len() - 1) - 1;
        let w = ((t - self.times[j]) / (self.times[j + 1] - self.times[j])).clamp(0.0, 1.0);
        self.u[j].values.iter().zip(&self.u[j + 1].values).map(|(a, b)| (1.0 - w) * a + w * b).collect()
    }

    pub fn estimates(&self) -> Estimates {
        Estimates {
            u_sup: self.u.iter().map(|u| u.sup_norm()).collect(),
            m_sup: self.m.iter().map(|m| m.sup_norm()).collect(),
            second_moment: self.m.iter().map(|m| m.second_moment()).collect(),
        }
    }
}

impl StochasticMfgSolution {
    pub fn estimates(&self) -> Estimates {
        let epochs = self.tree.n_steps + 1;
        let mut e = Estimates { u_sup: vec![0.0; epochs], m_sup: vec![0.0; epochs], second_moment: vec![0.0; epochs] };
        for node in &self.tree.nodes {
            let k = node.epoch;
            e.u_sup[k] = e.u_sup[k].max(self.u.u_at(node.id).sup_norm());
            e.m_sup[k] = e.m_sup[k].max(self.m[node.id].sup_norm());
            e.second_moment[k] = e.second_moment[k].max(self.m[node.id].second_moment());
        }
        e
    }

    /// Largest boundary outflow over nodes.
    pub fn max_boundary_flux(&self) -> f64 {
        self.boundary_flux.iter().fold(0.0, |a, b| a.max(*b))
    }

    /// Largest `|mass - 1|` over node densities.
    pub fn max_mass_defect(&self) -> f64 {
        self.m.iter().fold(0.0, |a, m| a.max((m.mass() - 1.0).abs()))
    }
}

/// Quantities of the stability estimate for two deterministic solutions that
/// differ only in the initial density.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StabilityGap {
    /// `sup_t |u1 - u2|³`.
    pub lhs: f64,
    /// `int (u1_0 - u2_0)(m1_0 - m2_0)`.
    pub pairing: f64,
    pub d1_initial: f64,
}

pub fn stability_gap(s1: &DeterministicMfgSolution, s2: &DeterministicMfgSolution) -> Result<StabilityGap> {
    let g = s1.m[0].grid;
    if !g.same_as(&s2.m[0].grid) {
        return Err(MfgError::GridMismatch);
    }
    let (a, b) = (s1.times[0], *s1.times.last().expect("nonempty"));
    if (a - s2.times[0]).abs() > 1e-12 || (b - s2.times.last().expect("nonempty")).abs() > 1e-12 {
        return Err(MfgError::InvalidParameter("solutions live on different intervals".into()));
    }
    let mut sup = 0.0_f64;
    for (t, u1) in s1.times.iter().zip(&s1.u) {
        let u2 = s2.value_at(*t);
        sup = sup.max(u1.values.iter().zip(&u2).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())));
    }
    let prod: Vec<f64> = (0..g.n_points)
        .map(|i| (s1.u[0].values[i] - s2.u[0].values[i]) * (s1.m[0].values[i] - s2.m[0].values[i]))
        .collect();
    Ok(StabilityGap { lhs: sup.powi(3), pairing: g.integrate(&prod), d1_initial: d1_values(&g, &s1.m[0].values, &s2.m[0].values) })
}

/// `E[sum dt int (F1 - F2)(m1 - m2) + int (G1 - G2)(m1_T - m2_T)]` for two
/// solutions on the same tree.
pub fn duality_residual(s1: &StochasticMfgSolution, s2: &StochasticMfgSolution) -> Result<f64> {
    let tree = &s1.tree;
    if tree.node_count() != s2.tree.node_count() || s1.substeps != s2.substeps {
        return Err(MfgError::Embedding("solutions live on different trees".into()));
    }
    let g = s1.u.grid;
    let pair = |f1: &[f64], f2: &[f64], m1: &[f64], m2: &[f64]| -> f64 {
        let v: Vec<f64> = (0..g.n_points).map(|i| (f1[i] - f2[i]) * (m1[i] - m2[i])).collect();
        g.integrate(&v)
    };
    let ds = tree.dt() / s1.substeps as f64;
    let mut total = 0.0;
    for node in &tree.nodes {
        if node.children.is_empty() {
            continue;
        }
        let id = node.id;
        let mut acc = 0.0;
        for j in 0..s1.substeps {
            acc += ds * pair(&s1.source[id][j], &s2.source[id][j], &s1.m_paths[id][j], &s2.m_paths[id][j]);
        }
        total += node.prob * acc;
    }
    for (k, &l) in tree.leaves().iter().enumerate() {
        total += tree.nodes[l].prob * pair(&s1.terminal[k], &s2.terminal[k], &s1.m[l].values, &s2.m[l].values);
    }
    Ok(total)
}

/// Interpolation weights, in `W`, of the fine nodes at `epoch` around `w`.
fn embed(fine: &ScenarioTree, epoch: usize, w: f64) -> [(usize, f64); 2] {
    let ids = &fine.epochs[epoch];
    let ws: Vec<f64> = ids.iter().map(|&i| fine.nodes[i].w).collect();
    if ids.len() == 1 {
        return [(ids[0], 1.0), (ids[0], 0.0)];
    }
    let j = ws.partition_point(|&x| x <= w).clamp(1, ids.len() - 1) - 1;
    let lam = ((w - ws[j]) / (ws[j + 1] - ws[j])).clamp(0.0, 1.0);
    [(ids[j], 1.0 - lam), (ids[j + 1], lam)]
}

fn check_nested(coarse: &ScenarioTree, fine: &ScenarioTree) -> Result<usize> {
    if !coarse.recombining || !fine.recombining {
        return Err(MfgError::Embedding("cross-tree comparison needs recombining trees".into()));
    }
    if !fine.n_steps.is_multiple_of(coarse.n_steps) || (coarse.horizon - fine.horizon).abs() > 1e-12 || coarse.beta != fine.beta {
        return Err(MfgError::Embedding(format!(
            "{} steps do not refine {} steps on the same horizon and noise",
            fine.n_steps, coarse.n_steps
        )));
    }
    Ok(fine.n_steps / coarse.n_steps)
}

fn sup_on(grid: &SpatialGrid, r: f64, v: impl Fn(usize) -> f64) -> f64 {
    grid.ball(r).map(v).fold(0.0, |a, b: f64| a.max(b.abs()))
}

/// `sup_n E[ |u_coarse - u_fine|_{L∞(B_r)} ]` at the coarse epoch times, with
/// the fine field interpolated in `W` at the coarse nodes. Fields are indexed
/// by node id.
pub fn cauchy_gap(
    coarse: &ScenarioTree,
    uc: &[Vec<f64>],
    fine: &ScenarioTree,
    uf: &[Vec<f64>],
    grid: &SpatialGrid,
    r: f64,
) -> Result<f64> {
    let m = check_nested(coarse, fine)?;
    let mut worst = 0.0_f64;
    for n in 0..=coarse.n_steps {
        let mut e = 0.0;
        for &c in &coarse.epochs[n] {
            let [(a, wa), (b, wb)] = embed(fine, n * m, coarse.nodes[c].w);
            let d = sup_on(grid, r, |i| uc[c][i] - (wa * uf[a][i] + wb * uf[b][i]));
            e += coarse.nodes[c].prob * d;
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

/// `E[ |G_c - G_f|³ + sum_n dt |F_c - F_f|³ ]`, sup norms on `B_r`, at the coarse epochs.
pub fn coupling_gap(c: &StochasticMfgSolution, f: &StochasticMfgSolution, r: f64) -> Result<f64> {
    let m = check_nested(&c.tree, &f.tree)?;
    let (tc, tf) = (&c.tree, &f.tree);
    let grid = c.u.grid;
    let dt = tc.dt();
    let mut total = 0.0;
    for n in 0..tc.n_steps {
        for &node in &tc.epochs[n] {
            let [(a, wa), (b, wb)] = embed(tf, n * m, tc.nodes[node].w);
            let d = sup_on(&grid, r, |i| c.source[node][0][i] - (wa * f.source[a][0][i] + wb * f.source[b][0][i]));
            total += tc.nodes[node].prob * dt * d.powi(3);
        }
    }
    let (lc, lf) = (tc.leaves()[0], tf.leaves()[0]);
    for &leaf in tc.leaves() {
        let [(a, wa), (b, wb)] = embed(tf, tf.n_steps, tc.nodes[leaf].w);
        let d = sup_on(&grid, r, |i| c.terminal[leaf - lc][i] - (wa * f.terminal[a - lf][i] + wb * f.terminal[b - lf][i]));
        total += tc.nodes[leaf].prob * d.powi(3);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub n_list: Vec<usize>,
    /// Gap between consecutive entries of `n_list`.
    pub coupling_gap: Vec<f64>,
    pub cauchy_gap: Vec<f64>,
    pub duality_residual: f64,
    /// Time modulus at each `N`, when supplied.
    pub omega: Vec<f64>,
}

impl ConvergenceReport {
    pub fn gaps_decreasing(&self) -> bool {
        self.coupling_gap.windows(2).all(|w| w[1] < w[0]) && self.cauchy_gap.windows(2).all(|w| w[1] < w[0])
    }
}

/// Gaps between solutions on successively refined recombining trees.
pub fn convergence_diagnostics(
    solutions: &[&StochasticMfgSolution],
    r: f64,
    modulus: Option<&TimeModulus>,
    duality: Option<(&StochasticMfgSolution, &StochasticMfgSolution)>,
) -> Result<ConvergenceReport> {
    if solutions.len() < 2 {
        return Err(MfgError::Embedding("need at least two solutions".into()));
    }
    let mut rep = ConvergenceReport {
        n_list: solutions.iter().map(|s| s.tree.n_steps).collect(),
        coupling_gap: vec![],
        cauchy_gap: vec![],
        duality_residual: 0.0,
        omega: vec![],
    };
    for w in solutions.windows(2) {
        rep.coupling_gap.push(coupling_gap(w[0], w[1], r)?);
        rep.cauchy_gap.push(cauchy_gap(&w[0].tree, &w[0].u.u_plus, &w[1].tree, &w[1].u.u_plus, &w[0].u.grid, r)?);
    }
    if let Some(tm) = modulus {
        rep.omega = rep.n_list.iter().map(|&n| tm.get(n, r).unwrap_or(f64::NAN)).collect();
    }
    if let Some((a, b)) = duality {
        rep.duality_residual = duality_residual(a, b)?;
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::CouplingF;
    use crate::hj::solve_bshj;
    use crate::noise::build_tree;

    fn grid() -> SpatialGrid {
        SpatialGrid::new(-5.0, 5.0, 257).unwrap()
    }

    fn problem(kappa: f64, m0: DensityField) -> MfgProblem {
        let g = m0.grid;
        let f = if kappa == 0.0 { CouplingF::Zero } else { CouplingF::Linear { kappa } };
        MfgProblem {
            h: QuadraticHamiltonian::kinetic(),
            coupling: MonotoneCoupling::new(g, f, 0.3, None, 10.0).unwrap(),
            terminal: TerminalCost::fixed(Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 }),
            m0,
        }
    }

    fn fast() -> FixedPointConfig {
        FixedPointConfig { damping: Damping::Constant(1.0), ..Default::default() }
    }

    #[test]
    fn decoupled_problem_needs_one_iteration() {
        let g = grid();
        let p = problem(0.0, DensityField::gaussian(g, 0.0, 0.5).unwrap());
        let s = solve_deterministic_mfg(&p, (0.0, 1.0), 2, &FixedPointConfig::default()).unwrap();
        assert_eq!(s.iterations, 1);
        let tree = ScenarioTree::deterministic(1.0, 2);
        let plain = solve_bshj(&tree, &p.h, &[GridFunction::from_fn(g, |x| 0.5 * x.cos())]).unwrap();
        assert!(s.u[0].values.iter().zip(&plain.u_plus[0]).all(|(a, b)| (a - b).abs() < 1e-3));
    }

    #[test]
    fn symmetric_data_stays_symmetric() {
        let g = grid();
        let p = problem(0.5, DensityField::gaussian(g, 0.0, 0.5).unwrap());
        let s = solve_deterministic_mfg(&p, (0.0, 1.0), 2, &fast()).unwrap();
        let n = g.n_points;
        for (u, m) in s.u.iter().zip(&s.m) {
            for i in 0..n {
                assert!((u.values[i] - u.values[n - 1 - i]).abs() <= 1e-9);
                assert!((m.values[i] - m.values[n - 1 - i]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn crowd_aversion_spreads_mass() {
        let g = grid();
        let mut p = problem(2.0, DensityField::gaussian(g, 0.0, 0.2).unwrap());
        p.terminal = TerminalCost::fixed(Coefficient::Constant(0.0));
        let cfg = FixedPointConfig { damping: Damping::Constant(0.3), tol: 1e-5, ..Default::default() };
        let s = solve_deterministic_mfg(&p, (0.0, 1.0), 2, &cfg).unwrap();
        assert!(s.m.last().unwrap().variance() > p.m0.variance());
    }

    #[test]
    fn zero_noise_matches_deterministic() {
        let g = grid();
        let p = problem(0.5, DensityField::gaussian(g, 0.2, 0.5).unwrap());
        let det = solve_deterministic_mfg(&p, (0.0, 1.0), 2, &fast()).unwrap();
        let tree = build_tree(1.0, 2, 2, 0.0, true).unwrap();
        let sto = solve_stochastic_mfg(&tree, &p, &fast()).unwrap();
        for node in &tree.nodes {
            let e = node.epoch;
            let d = if e < 2 { &det.lattice.u.u_plus[e] } else { &det.lattice.u.u_plus[2] };
            assert!(sto.u.u_plus[node.id].iter().zip(d).all(|(a, b)| (a - b).abs() <= 1e-10));
            assert!(sto.m[node.id].values.iter().zip(&det.lattice.m[e].values).all(|(a, b)| (a - b).abs() <= 1e-10));
        }
    }

    #[test]
    fn identical_solutions_have_zero_gaps() {
        let g = grid();
        let p = problem(0.5, DensityField::gaussian(g, 0.0, 0.5).unwrap());
        let tree = build_tree(1.0, 2, 2, 0.1, true).unwrap();
        let s = solve_stochastic_mfg(&tree, &p, &fast()).unwrap();
        let rep = convergence_diagnostics(&[&s, &s], 3.0, None, Some((&s, &s))).unwrap();
        assert_eq!(rep.coupling_gap, vec![0.0]);
        assert_eq!(rep.cauchy_gap, vec![0.0]);
        assert_eq!(rep.duality_residual, 0.0);
    }

    #[test]
    fn non_nested_trees_are_rejected() {
        let g = grid();
        let p = problem(0.0, DensityField::gaussian(g, 0.0, 0.5).unwrap());
        let a = solve_stochastic_mfg(&build_tree(1.0, 2, 2, 0.1, true).unwrap(), &p, &fast()).unwrap();
        let b = solve_stochastic_mfg(&build_tree(1.0, 3, 2, 0.1, true).unwrap(), &p, &fast()).unwrap();
        assert!(matches!(convergence_diagnostics(&[&a, &b], 3.0, None, None), Err(MfgError::Embedding(_))));
    }

    #[test]
    fn identical_initial_densities_have_no_gap() {
        let g = grid();
        let p = problem(0.5, DensityField::gaussian(g, 0.0, 0.5).unwrap());
        let s1 = solve_deterministic_mfg(&p, (0.0, 1.0), 2, &fast()).unwrap();
        let s2 = solve_deterministic_mfg(&p, (0.0, 1.0), 2, &fast()).unwrap();
        let gap = stability_gap(&s1, &s2).unwrap();
        assert!(gap.lhs <= 1e-8 && gap.pairing.abs() <= 1e-8 && gap.d1_initial == 0.0);
    }

    #[test]
    fn harmonic_damping_failure_carries_history() {
        let g = grid();
        let p = problem(0.5, DensityField::gaussian(g, 0.0, 0.5).unwrap());
        let cfg = FixedPointConfig { max_iters: 3, ..Default::default() };
        match solve_deterministic_mfg(&p, (0.0, 1.0), 2, &cfg) {
            Err(MfgError::FixedPointFailure { iterations, history, .. }) => {
                assert_eq!(iterations, 3);
                assert_eq!(history.len(), 3);
            }
            other => panic!("{other:?}"),
        }
    }
}
