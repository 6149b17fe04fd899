//! Forward transport of the density.
//!
//! `d_t m + d_x(m b) = 0` is solved by a node-centered upwind finite volume
//! scheme: node `i` owns the trapezoid volume `V_i`, and faces sit at cell
//! midpoints. Fluxes leave the domain at the ends and never enter it. Drift
//! fields are piecewise constant in time on substeps, matching the snapshots of
//! the HJ solver.

use crate::error::{MfgError, Result};
use crate::grid::{DensityField, SpatialGrid, MASS_TOL, MAX_LEAKAGE};
use crate::hamiltonian::FrozenHamiltonian;
use crate::hj::kink_aware_gradient;
use crate::noise::ScenarioTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Drift over one interval of length `dt`, constant on each of its substeps.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftField {
    pub grid: SpatialGrid,
    pub dt: f64,
    /// Drift at the faces `x_i + h/2`, per substep.
    pub faces: Vec<Vec<f64>>,
    /// Drift at the nodes, per substep.
    pub nodes: Vec<Vec<f64>>,
}

impl DriftField {
    pub fn substeps(&self) -> usize {
        self.faces.len()
    }

    /// Time-independent drift given pointwise.
    pub fn from_fn(grid: SpatialGrid, dt: f64, substeps: usize, b: impl Fn(f64) -> f64) -> Self {
        let faces = vec![(0..grid.n_points - 1).map(|i| b(grid.midpoint(i))).collect::<Vec<_>>(); substeps];
        let nodes = vec![grid.nodes().into_iter().map(&b).collect::<Vec<_>>(); substeps];
        Self { grid, dt, faces, nodes }
    }

    /// Optimal drift `-(a Du + B)` from value snapshots; substep `j` uses snapshot `j`.
    pub fn from_snapshots(grid: SpatialGrid, fr: &FrozenHamiltonian, snapshots: &[Vec<f64>], dt: f64) -> Self {
        let k = snapshots.len().saturating_sub(1).max(1);
        let h = grid.h;
        let mut faces = Vec::with_capacity(k);
        let mut nodes = Vec::with_capacity(k);
        for u in snapshots.iter().take(k) {
            faces.push(
                (0..grid.n_points - 1)
                    .map(|i| -(fr.a_mid[i] * (u[i + 1] - u[i]) / h + fr.b_mid[i]))
                    .collect(),
            );
            let g = kink_aware_gradient(u, h);
            nodes.push((0..grid.n_points).map(|i| -fr.dp(i, g[i])).collect());
        }
        Self { grid, dt, faces, nodes }
    }

    pub fn bound(&self) -> f64 {
        self.faces.iter().chain(&self.nodes).flatten().fold(0.0_f64, |m, b| m.max(b.abs()))
    }

    /// Smallest `C >= 0` with `(b(x) - b(y))(x - y) >= -C |x - y|²` on adjacent
    /// faces. It also bounds the growth rate of `sup m`.
    pub fn one_sided_constant(&self) -> f64 {
        let h = self.grid.h;
        self.faces
            .iter()
            .flat_map(|f| f.windows(2).map(move |w| -(w[1] - w[0]) / h))
            .fold(0.0_f64, f64::max)
    }

    /// Face drift of the cell containing `x` on substep `j`.
    pub fn cell_drift(&self, j: usize, x: f64) -> f64 {
        let (i, _) = self.grid.locate(x);
        self.faces[j][i.min(self.grid.n_points - 2)]
    }

    /// Node drift interpolated at `x` on substep `j`.
    pub fn at(&self, j: usize, x: f64) -> f64 {
        self.grid.interpolate(&self.nodes[j], x)
    }
}

/// Density snapshots over one interval.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportRecord {
    /// Values at the substep times of the drift, first is the initial density.
    pub snapshots: Vec<Vec<f64>>,
    /// Mass that left through the boundary.
    pub outflow: f64,
    /// Largest `|mass + outflow - 1|` seen after any step, before renormalization.
    pub mass_error: f64,
}

impl TransportRecord {
    pub fn last(&self) -> &[f64] {
        self.snapshots.last().expect("at least one snapshot")
    }
}

/// Transports `m` over the interval of `drift`. Each drift substep is split
/// into steps with `max|b| dt <= cfl h`.
pub fn transport_interval(m: &[f64], drift: &DriftField, cfl: f64) -> Result<TransportRecord> {
    let grid = &drift.grid;
    let n = grid.n_points;
    if m.len() != n {
        return Err(MfgError::GridMismatch);
    }
    let h = grid.h;
    let k = drift.substeps();
    let ds = drift.dt / k as f64;
    let vol: Vec<f64> = (0..n).map(|i| grid.weight(i)).collect();
    let start_mass = grid.integrate(m);
    let mut cur = m.to_vec();
    let mut snaps = Vec::with_capacity(k + 1);
    snaps.push(cur.clone());
    let mut outflow = 0.0;
    let mut mass_error = 0.0_f64;
    let mut flux = vec![0.0; n - 1];
    let mut out_rate = vec![0.0; n];
    for j in 0..k {
        let faces = &drift.faces[j];
        let bmax = faces.iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let (bl, br) = (drift.nodes[j][0].min(0.0), drift.nodes[j][n - 1].max(0.0));
        let bmax = bmax.max(-bl).max(br);
        // Full steps at the stable limit plus a remainder step: unlike an even
        // split, this depends continuously on the drift.
        let full = if bmax > 0.0 { cfl * h / bmax } else { ds };
        let r = (ds / full).floor() as usize;
        let rest = ds - r as f64 * full;
        let steps = (0..r).map(|_| full).chain((rest > 1e-12 * ds).then_some(rest));
        for dtau in steps {
            for i in 0..n - 1 {
                let b = faces[i];
                flux[i] = dtau * (b.max(0.0) * cur[i] + b.min(0.0) * cur[i + 1]);
            }
            let (mut left, mut right) = (-dtau * bl * cur[0], dtau * br * cur[n - 1]);
            // Cap every donor's outflow at its content.
            out_rate.iter_mut().for_each(|o| *o = 0.0);
            for i in 0..n - 1 {
                if flux[i] > 0.0 {
                    out_rate[i] += flux[i];
                } else {
                    out_rate[i + 1] -= flux[i];
                }
            }
            out_rate[0] += left;
            out_rate[n - 1] += right;
            for i in 0..n {
                let avail = vol[i] * cur[i];
                if out_rate[i] > avail && out_rate[i] > 0.0 {
                    let s = avail / out_rate[i];
                    if i > 0 && flux[i - 1] < 0.0 {
                        flux[i - 1] *= s;
                    }
                    if i < n - 1 && flux[i] > 0.0 {
                        flux[i] *= s;
                    }
                    if i == 0 {
                        left *= s;
                    }
                    if i == n - 1 {
                        right *= s;
                    }
                }
            }
            for i in 0..n {
                let inflow = if i > 0 { flux[i - 1] } else { -left };
                let outgoing = if i < n - 1 { flux[i] } else { right };
                cur[i] = (cur[i] + (inflow - outgoing) / vol[i]).max(0.0);
            }
            outflow += left + right;
            let mass = grid.integrate(&cur);
            mass_error = mass_error.max((mass + outflow - start_mass).abs());
        }
        snaps.push(cur.clone());
    }
    Ok(TransportRecord { snapshots: snaps, outflow, mass_error })
}

/// Per-node densities from forward transport on a tree.
#[derive(Debug, Clone, PartialEq)]
pub struct ContinuitySolution {
    /// Density at each node's epoch start.
    pub m: Vec<DensityField>,
    /// Snapshots over each interior node's interval.
    pub paths: Vec<Vec<Vec<f64>>>,
    /// Boundary outflow accumulated up to each node, before renormalization.
    pub boundary_flux: Vec<f64>,
    pub max_mass_error: f64,
}

/// Forward transport on every node. On recombining trees a node's density is
/// the probability-weighted mixture of what its parents send to it.
pub fn solve_continuity(tree: &ScenarioTree, drifts: &[DriftField], m0: &DensityField, cfl: f64) -> Result<ContinuitySolution> {
    let count = tree.node_count();
    if drifts.len() < count - tree.leaves().len() {
        return Err(MfgError::IncompleteValues { epoch: 0, detail: "missing drift fields".into() });
    }
    let grid = m0.grid;
    let mut m = vec![m0.clone(); count];
    let mut flux = vec![0.0; count];
    let mut paths = vec![Vec::new(); count];
    let mut max_mass_error = 0.0_f64;
    for e in 0..tree.n_steps {
        let recs: Vec<Result<TransportRecord>> =
            tree.epochs[e].par_iter().map(|&node| transport_interval(&m[node].values, &drifts[node], cfl)).collect();
        let mut sent = vec![(Vec::new(), 0.0); tree.epochs[e + 1].len()];
        let first = tree.epochs[e + 1][0];
        for (&node, rec) in tree.epochs[e].iter().zip(recs) {
            let rec = rec?;
            max_mass_error = max_mass_error.max(rec.mass_error);
            let leak = flux[node] + rec.outflow;
            if leak > MAX_LEAKAGE {
                return Err(MfgError::DomainTooSmall(format!("boundary outflow {leak:.3e} at node {node}")));
            }
            for &(c, q) in &tree.nodes[node].children {
                let w = tree.nodes[node].prob * q / tree.nodes[c].prob;
                let slot = &mut sent[c - first];
                if slot.0.is_empty() {
                    slot.0 = vec![0.0; grid.n_points];
                }
                slot.0.iter_mut().zip(rec.last()).for_each(|(a, b)| *a += w * b);
                slot.1 += w * leak;
            }
            paths[node] = rec.snapshots;
        }
        for (j, (vals, leak)) in sent.into_iter().enumerate() {
            let c = first + j;
            flux[c] = leak;
            let mass = grid.integrate(&vals);
            m[c] = if (mass - 1.0).abs() > MASS_TOL {
                DensityField::normalized(grid, vals)?
            } else {
                DensityField { grid, values: vals }
            };
        }
    }
    Ok(ContinuitySolution { m, paths, boundary_flux: flux, max_mass_error })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
}

impl Trajectory {
    pub fn end(&self) -> f64 {
        *self.xs.last().expect("nonempty trajectory")
    }
}

/// Mollifies `b` with a smooth bump of radius `eps`, by 64-point midpoint quadrature.
pub fn mollify<'a>(b: &'a (dyn Fn(f64) -> f64 + Sync), eps: f64) -> impl Fn(f64) -> f64 + Sync + 'a {
    const Q: usize = 64;
    let mut nodes = Vec::with_capacity(Q);
    let mut total = 0.0;
    for k in 0..Q {
        let z = -1.0 + (2.0 * k as f64 + 1.0) / Q as f64;
        let w = (-1.0 / (1.0 - z * z)).exp();
        nodes.push((z * eps, w));
        total += w;
    }
    nodes.iter_mut().for_each(|n| n.1 /= total);
    move |x| nodes.iter().map(|&(y, w)| w * b(x - y)).sum()
}

/// Explicit Euler flow of the mollified field `b^eps`, `eps = 2h`, from
/// `x0` at `t0` to `t1`. Backward flows integrate `dX/dt = b(X)` toward
/// earlier times.
pub fn filippov_flow(
    b: &(dyn Fn(f64) -> f64 + Sync),
    grid: &SpatialGrid,
    x0: f64,
    t0: f64,
    t1: f64,
    direction: Direction,
    dt: f64,
) -> Result<Trajectory> {
    let span = (t1 - t0).abs();
    if !(dt > 0.0) {
        return Err(MfgError::InvalidParameter(format!("dt {dt}")));
    }
    let steps = ((span / dt).ceil() as usize).max(1);
    let step = span / steps as f64;
    let sign = match direction {
        Direction::Forward => 1.0,
        Direction::Backward => -1.0,
    };
    let be = mollify(b, 2.0 * grid.h);
    let mut x = x0;
    let mut out = Trajectory { times: vec![t0], xs: vec![x0] };
    for k in 1..=steps {
        x += sign * step * be(x);
        let t = t0 + sign * step * k as f64;
        if !grid.contains(x) {
            return Err(MfgError::DomainExit { x, t });
        }
        out.times.push(t);
        out.xs.push(x);
    }
    Ok(out)
}

/// Largest ratio `|X(x) - X(y)| / |x - y|` over consecutive starts.
pub fn flow_lipschitz(starts: &[f64], ends: &[f64]) -> f64 {
    starts
        .windows(2)
        .zip(ends.windows(2))
        .map(|(s, e)| (e[1] - e[0]).abs() / (s[1] - s[0]).abs())
        .fold(0.0, f64::max)
}

/// Fraction of `targets` whose preimage under `starts -> ends`, taken within
/// `tol`, spans more than `spread`.
pub fn multivalued_fraction(starts: &[f64], ends: &[f64], targets: &[f64], tol: f64, spread: f64) -> f64 {
    let bad = targets
        .iter()
        .filter(|&&y| {
            let pre: Vec<f64> = starts.iter().zip(ends).filter(|(_, &e)| (e - y).abs() <= tol).map(|(&s, _)| s).collect();
            match (pre.iter().cloned().reduce(f64::min), pre.iter().cloned().reduce(f64::max)) {
                (Some(lo), Some(hi)) => hi - lo > spread,
                _ => false,
            }
        })
        .count();
    bad as f64 / targets.len().max(1) as f64
}

/// Particles following the grid drift on every node of a non-recombining tree.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub weights: Vec<f64>,
    pub start: Vec<f64>,
    /// `positions[node][particle]` at the node's epoch start.
    pub positions: Vec<Vec<f64>>,
    /// Particles clamped at the boundary.
    pub exits: usize,
}

impl TrajectoryEnsemble {
    pub fn d1_to(&self, node: usize, m: &DensityField) -> f64 {
        empirical_d1(&self.positions[node], &self.weights, m)
    }
}

/// Stratified inverse-CDF sample of `m`: one uniform draw in each of `n` equal-mass strata.
pub fn stratified_sample(m: &DensityField, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cdf = m.cdf();
    let total = *cdf.last().expect("nonempty");
    let g = &m.grid;
    let mut out = Vec::with_capacity(n);
    let mut i = 0;
    for k in 0..n {
        let u = total * (k as f64 + rng.random::<f64>()) / n as f64;
        while i + 1 < cdf.len() && cdf[i + 1] < u {
            i += 1;
        }
        let j = (i + 1).min(cdf.len() - 1);
        let span = cdf[j] - cdf[i];
        let w = if span > 0.0 { ((u - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.0 };
        out.push(g.x(i) + w * g.h);
    }
    out
}

/// Moves particles through one interval with the cell-wise face drift.
fn advect(positions: &mut [f64], drift: &DriftField, cfl: f64, exits: &mut usize) {
    let g = &drift.grid;
    let k = drift.substeps();
    let ds = drift.dt / k as f64;
    let (lo, hi) = (g.x_min, g.x_max);
    for j in 0..k {
        let bmax = drift.faces[j].iter().fold(0.0_f64, |a, b| a.max(b.abs()));
        let r = ((ds * bmax / (cfl * g.h)).ceil() as usize).max(1);
        let dtau = ds / r as f64;
        for x in positions.iter_mut() {
            if *x <= lo || *x >= hi {
                continue;
            }
            for _ in 0..r {
                *x += dtau * drift.cell_drift(j, *x);
                if *x <= lo || *x >= hi {
                    *x = x.clamp(lo, hi);
                    *exits += 1;
                    break;
                }
            }
        }
    }
}

pub fn characteristics_ensemble(
    tree: &ScenarioTree,
    drifts: &[DriftField],
    m0: &DensityField,
    n_particles: usize,
    seed: u64,
    cfl: f64,
) -> Result<TrajectoryEnsemble> {
    if tree.recombining {
        return Err(MfgError::InvalidParameter("particle ensembles need a non-recombining tree".into()));
    }
    let start = stratified_sample(m0, n_particles, seed);
    let mut positions = vec![Vec::new(); tree.node_count()];
    positions[0] = start.clone();
    let mut exits = 0;
    for e in 0..tree.n_steps {
        for &node in &tree.epochs[e] {
            for &(c, _) in &tree.nodes[node].children {
                let mut p = positions[node].clone();
                advect(&mut p, &drifts[node], cfl, &mut exits);
                positions[c] = p;
            }
        }
    }
    Ok(TrajectoryEnsemble { weights: vec![1.0 / n_particles as f64; n_particles], start, positions, exits })
}

/// `int |F_emp - F_m| dx`, with the grid CDF linear between nodes.
pub fn empirical_d1(points: &[f64], weights: &[f64], m: &DensityField) -> f64 {
    let g = &m.grid;
    let cdf = m.cdf();
    let total = *cdf.last().expect("nonempty");
    let mut pts: Vec<(f64, f64)> = points.iter().cloned().zip(weights.iter().cloned()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let grid_cdf = |x: f64| g.interpolate(&cdf, x) / total;
    // Breakpoints: grid nodes and particle positions.
    let mut xs: Vec<f64> = g.nodes();
    xs.extend(pts.iter().map(|p| p.0.clamp(g.x_min, g.x_max)));
    xs.sort_by(f64::total_cmp);
    let mut acc = 0.0;
    let mut k = 0;
    let mut femp = 0.0;
    for w in xs.windows(2) {
        let (a, b) = (w[0], w[1]);
        while k < pts.len() && pts[k].0 <= a {
            femp += pts[k].1;
            k += 1;
        }
        if b <= a {
            continue;
        }
        let (ga, gb) = (grid_cdf(a) - femp, grid_cdf(b) - femp);
        acc += if ga * gb >= 0.0 {
            0.5 * (ga.abs() + gb.abs()) * (b - a)
        } else {
            0.5 * (ga * ga + gb * gb) / (gb - ga).abs() * (b - a)
        };
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{d1_distance, push_forward_shift};

    fn grid() -> SpatialGrid {
        SpatialGrid::new(-5.0, 5.0, 257).unwrap()
    }

    fn steps(g: &SpatialGrid, t: f64, bmax: f64) -> usize {
        (t * bmax / g.h).ceil() as usize
    }

    #[test]
    fn zero_drift_keeps_density() {
        let g = grid();
        let m = DensityField::gaussian(g, 0.3, 0.5).unwrap();
        let d = DriftField::from_fn(g, 1.0, 4, |_| 0.0);
        let r = transport_interval(&m.values, &d, 1.0).unwrap();
        assert_eq!(r.last(), &m.values[..]);
    }

    #[test]
    fn unit_drift_translates() {
        let g = grid();
        let m = DensityField::gaussian(g, -1.0, 0.5).unwrap();
        let d = DriftField::from_fn(g, 1.0, steps(&g, 1.0, 1.0), |_| 1.0);
        let r = transport_interval(&m.values, &d, 1.0).unwrap();
        let out = DensityField::new(g, r.last().to_vec()).unwrap();
        let exact = push_forward_shift(&m, 1.0).unwrap();
        assert!(out.l1_distance(&exact).unwrap() <= 2.0 * g.h);
        assert!(r.mass_error < 1e-12);
    }

    #[test]
    fn expansive_sign_field_opens_vacuum() {
        let g = grid();
        let m = DensityField::uniform(g, -1.0, 1.0).unwrap();
        let t = 0.5;
        let d = DriftField::from_fn(g, t, steps(&g, t, 1.0), f64::signum);
        let r = transport_interval(&m.values, &d, 1.0).unwrap();
        let out = DensityField::new(g, r.last().to_vec()).unwrap();
        // Oracle: characteristics move each half of the mass away from 0 at unit speed.
        let exact: Vec<f64> = g.nodes().iter().map(|&x| if x.abs() >= t && x.abs() <= 1.0 + t { 0.5 } else { 0.0 }).collect();
        let l1 = g.integrate(&out.values.iter().zip(&exact).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>());
        assert!(l1 <= 3.0 * g.h, "{l1}");
        assert!(r.mass_error < 1e-12);
    }

    #[test]
    fn boundary_outflow_is_logged() {
        let g = SpatialGrid::new(-2.0, 2.0, 81).unwrap();
        let m = DensityField::gaussian(g, 1.5, 0.3).unwrap();
        let d = DriftField::from_fn(g, 1.0, 40, |_| 1.0);
        let r = transport_interval(&m.values, &d, 1.0).unwrap();
        assert!(r.outflow > 0.1);
        assert!(r.mass_error < 1e-12);
        let tree = ScenarioTree::deterministic(1.0, 1);
        assert!(matches!(solve_continuity(&tree, &[d], &m, 1.0), Err(MfgError::DomainTooSmall(_))));
    }

    #[test]
    fn lipschitz_flow_matches_exponential() {
        let g = grid();
        let dt = 1e-3;
        let tr = filippov_flow(&|x| -x, &g, 1.0, 0.0, 1.0, Direction::Forward, dt).unwrap();
        assert!((tr.end() - (-1.0f64).exp()).abs() <= (dt + g.h) * 1f64.exp());
    }

    #[test]
    fn sign_field_flows() {
        let g = grid();
        let fwd = filippov_flow(&f64::signum, &g, 0.5, 0.0, 1.0, Direction::Forward, 1e-3).unwrap();
        assert!((fwd.end() - 1.5).abs() < 1e-9);
        let back = filippov_flow(&f64::signum, &g, 0.5, 1.0, 0.0, Direction::Backward, 1e-3).unwrap();
        let at_half = back.xs[500];
        assert!(at_half.abs() <= 2.0 * g.h);
        assert!(back.end().abs() <= 2.0 * g.h);
    }

    #[test]
    fn mollifier_keeps_one_sided_constant() {
        let g = grid();
        let b = |x: f64| 2.0 * f64::signum(x) - 0.5 * x;
        let be = mollify(&b, 2.0 * g.h);
        let xs: Vec<f64> = (0..400).map(|k| -2.0 + k as f64 * 0.01).collect();
        let c = xs.windows(2).map(|w| -(be(w[1]) - be(w[0])) / (w[1] - w[0])).fold(f64::MIN, f64::max);
        assert!(c <= 0.5 + 1e-9);
    }

    #[test]
    fn particles_translate() {
        let g = grid();
        let m = DensityField::gaussian(g, -1.0, 0.5).unwrap();
        let tree = ScenarioTree::deterministic(1.0, 1);
        let d = DriftField::from_fn(g, 1.0, steps(&g, 1.0, 1.0), |_| 1.0);
        let ens = characteristics_ensemble(&tree, std::slice::from_ref(&d), &m, 4000, 7, 1.0).unwrap();
        let cs = solve_continuity(&tree, &[d], &m, 1.0).unwrap();
        assert!(ens.d1_to(1, &cs.m[1]) <= 5.0 * g.h + 1.0 / (4000f64).sqrt());
        let zero = DriftField::from_fn(g, 1.0, 3, |_| 0.0);
        let still = characteristics_ensemble(&tree, &[zero], &m, 100, 7, 1.0).unwrap();
        assert_eq!(still.positions[1], still.start);
    }

    #[test]
    fn empirical_d1_of_point_mass() {
        // Oracle: a unit atom at the mean of a symmetric uniform law is at
        // distance (b - a) / 4.
        let g = SpatialGrid::new(-2.0, 2.0, 401).unwrap();
        let m = DensityField::uniform(g, -1.0, 1.0).unwrap();
        assert!((empirical_d1(&[0.0], &[1.0], &m) - 0.5).abs() < 1e-3);
        let same = stratified_sample(&m, 20_000, 1);
        let w = vec![1.0 / 20_000.0; 20_000];
        assert!(empirical_d1(&same, &w, &m) < 1e-3);
        let _ = d1_distance(&m, &m).unwrap();
    }
}
