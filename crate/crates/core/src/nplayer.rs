//! N-player game with common noise and Monte Carlo Nash gaps of the mean
//! field feedback.
//!
//! Players move by `dX = alpha dt + sqrt(2 beta) dW` with one shared Brownian
//! path, simulated by Euler-Maruyama off the tree and projected onto it by
//! nearest-`W` lookup at each epoch. A player pays the running cost of its
//! control plus the coupling evaluated on the empirical measure of the other
//! players. Non-deviating players use the feedback of a solved MFG, which does
//! not look at the empirical measure, so the other players' paths do not
//! depend on what the deviating player does.

use crate::coupling::{CouplingF, MonotoneCoupling};
use crate::error::{MfgError, Result};
use crate::grid::SpatialGrid;
use crate::hamiltonian::QuadraticHamiltonian;
use crate::hj::gradient_at;
use crate::mfg::{MfgProblem, StochasticMfgSolution};
use crate::noise::ScenarioTree;
use crate::transport::empirical_d1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GameConfig {
    pub n_players: usize,
    /// Upper bound on the Euler step; the step divides each epoch evenly.
    pub euler_dt: f64,
    pub n_mc: usize,
    /// Seed of the initial positions and of the Brownian paths.
    pub seed: u64,
}

impl GameConfig {
    fn validate(&self) -> Result<()> {
        if self.n_players < 2 {
            return Err(MfgError::InvalidParameter(format!("{} players", self.n_players)));
        }
        if !(self.euler_dt > 0.0) {
            return Err(MfgError::InvalidParameter(format!("euler_dt = {}", self.euler_dt)));
        }
        Ok(())
    }
}

/// Control used by the deviating player.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Deviation {
    Equilibrium,
    Constant(f64),
    /// `before` up to the midpoint of the horizon, `after` from then on.
    BangBang { before: f64, after: f64 },
    /// `factor` times the equilibrium feedback.
    Scaled(f64),
    /// Equilibrium feedback corrected by `-delta` times the difference between
    /// the coupling slope on the empirical measure and on the mean field.
    CrowdReactive(f64),
}

impl Deviation {
    pub fn label(&self) -> String {
        match *self {
            Deviation::Equilibrium => "equilibrium".into(),
            Deviation::Constant(c) => format!("constant({c})"),
            Deviation::BangBang { before, after } => format!("bang_bang({before},{after})"),
            Deviation::Scaled(f) => format!("scaled({f})"),
            Deviation::CrowdReactive(d) => format!("crowd_reactive({d})"),
        }
    }

    /// Constants on a grid, two switches, two scalings and one crowd-reactive correction.
    pub fn standard_family() -> Vec<Deviation> {
        let mut v: Vec<Deviation> = [-1.0, -0.5, 0.0, 0.5, 1.0].into_iter().map(Deviation::Constant).collect();
        v.push(Deviation::BangBang { before: -1.0, after: 1.0 });
        v.push(Deviation::BangBang { before: 1.0, after: -1.0 });
        v.push(Deviation::Scaled(0.5));
        v.push(Deviation::Scaled(1.5));
        v.push(Deviation::CrowdReactive(0.5));
        v
    }
}

/// Equilibrium feedback `-D_p H(D u, x)` of a solved MFG, in original coordinates.
pub struct Feedback<'a> {
    pub sol: &'a StochasticMfgSolution,
    pub h: QuadraticHamiltonian,
}

pub fn optimal_feedback<'a>(sol: &'a StochasticMfgSolution, h: &QuadraticHamiltonian) -> Feedback<'a> {
    Feedback { sol, h: *h }
}

impl Feedback<'_> {
    /// Control at position `x`, time `t`, on `node`, for the Brownian value `w`.
    pub fn at(&self, x: f64, t: f64, node: usize, w: f64) -> f64 {
        let tree = &self.sol.tree;
        let p = self.sol.u.gradient(tree, node, t, x - tree.sigma() * w);
        -self.h.eval_h(p, x, tree.time(tree.nodes[node].epoch), 0.0).1
    }

    /// Control on the tree, with the Brownian value of the node.
    pub fn on_tree(&self, x: f64, t: f64, node: usize) -> f64 {
        self.at(x, t, node, self.sol.tree.nodes[node].w)
    }

    /// `max|a| lip(u) + max|B|` over the grid and the node epochs.
    pub fn bound(&self) -> f64 {
        let tree = &self.sol.tree;
        let g = &self.sol.u.grid;
        let lip = self.sol.u.diagnostics.iter().fold(0.0_f64, |m, d| m.max(d.lip_u));
        let (mut amax, mut bmax) = (0.0_f64, 0.0_f64);
        for e in 0..=tree.n_steps {
            for x in g.nodes() {
                let (a, b, _) = self.h.coefficients(x, tree.time(e), 0.0);
                amax = amax.max(a.abs());
                bmax = bmax.max(b.abs());
            }
        }
        amax * lip + bmax
    }
}

/// Coupling `kappa (rho * rho * m)(x) + (rho * V)(x)` on an empirical measure.
struct EmpiricalCoupling {
    kappa: f64,
    /// `rho * rho` on offsets `-half..=half`.
    rr: Vec<f64>,
    half: usize,
    grid: SpatialGrid,
    /// `rho * V` on the grid, or empty when there is no potential.
    base: Vec<f64>,
}

impl EmpiricalCoupling {
    fn new(c: &MonotoneCoupling) -> Self {
        let g = c.grid;
        let w = &c.kernel.weights;
        let n = w.len();
        let mut rr = vec![0.0; 2 * n - 1];
        for i in 0..n {
            for j in 0..n {
                rr[i + j] += g.h * w[i] * w[j];
            }
        }
        let (kappa, base) = match c.f {
            CouplingF::Zero => (0.0, vec![]),
            CouplingF::Linear { kappa } => (kappa, vec![]),
            CouplingF::LinearPotential { kappa, amp, freq } => {
                let v: Vec<f64> = g.nodes().iter().map(|x| amp * (freq * x).cos()).collect();
                (kappa, c.smooth(&v))
            }
        };
        Self { kappa, rr, half: n - 1, grid: g, base }
    }

    fn rr_at(&self, d: f64) -> f64 {
        let s = d / self.grid.h + self.half as f64;
        if s <= 0.0 || s >= (self.rr.len() - 1) as f64 {
            return 0.0;
        }
        let i = s.floor() as usize;
        let w = s - i as f64;
        (1.0 - w) * self.rr[i] + w * self.rr[i + 1]
    }

    fn rr_slope(&self, d: f64) -> f64 {
        let s = d / self.grid.h + self.half as f64;
        if s <= 0.0 || s >= (self.rr.len() - 1) as f64 {
            return 0.0;
        }
        let i = s.floor() as usize;
        (self.rr[i + 1] - self.rr[i]) / self.grid.h
    }

    /// Value at `x` for the uniform measure on `others`, skipping index `skip`.
    fn value(&self, x: f64, others: &[f64], skip: Option<usize>) -> f64 {
        let mut v = 0.0;
        if self.kappa != 0.0 {
            let (s, n) = self.sum(x, others, skip, |d| self.rr_at(d));
            v += self.kappa * s / n;
        }
        if !self.base.is_empty() {
            v += self.grid.interpolate(&self.base, x);
        }
        v
    }

    fn slope(&self, x: f64, others: &[f64], skip: Option<usize>) -> f64 {
        let mut v = 0.0;
        if self.kappa != 0.0 {
            let (s, n) = self.sum(x, others, skip, |d| self.rr_slope(d));
            v += self.kappa * s / n;
        }
        if !self.base.is_empty() {
            v += self.grid.cell_slope(&self.base, x);
        }
        v
    }

    fn sum(&self, x: f64, others: &[f64], skip: Option<usize>, k: impl Fn(f64) -> f64) -> (f64, f64) {
        let mut s = 0.0;
        for (j, &y) in others.iter().enumerate() {
            if Some(j) != skip {
                s += k(x - y);
            }
        }
        (s, (others.len() - skip.map_or(0, |_| 1)) as f64)
    }
}

/// Shared randomness and the equilibrium paths of all players for one run.
struct Scenario {
    /// Brownian value at each Euler step.
    w: Vec<f64>,
    /// Tree node of each Euler step.
    nodes: Vec<usize>,
    /// Positions `[step][player]` under the equilibrium feedback.
    states: Vec<Vec<f64>>,
}

struct Game<'a> {
    cfg: GameConfig,
    problem: &'a MfgProblem,
    feedback: Feedback<'a>,
    running: EmpiricalCoupling,
    terminal: Option<EmpiricalCoupling>,
    steps_per_epoch: usize,
    de: f64,
    cdf: Vec<f64>,
}

fn quantile(grid: &SpatialGrid, cdf: &[f64], u: f64) -> f64 {
    let target = u * cdf[cdf.len() - 1];
    let i = cdf.partition_point(|&c| c < target).clamp(1, cdf.len() - 1) - 1;
    let span = cdf[i + 1] - cdf[i];
    let w = if span > 0.0 { ((target - cdf[i]) / span).clamp(0.0, 1.0) } else { 0.0 };
    grid.x(i) + w * grid.h
}

impl<'a> Game<'a> {
    fn new(cfg: &GameConfig, problem: &'a MfgProblem, sol: &'a StochasticMfgSolution) -> Result<Self> {
        cfg.validate()?;
        let tree = &sol.tree;
        let steps_per_epoch = ((tree.dt() / cfg.euler_dt).ceil() as usize).max(1);
        Ok(Self {
            cfg: *cfg,
            problem,
            feedback: optimal_feedback(sol, &problem.h),
            running: EmpiricalCoupling::new(&problem.coupling),
            terminal: problem.terminal.coupling.as_ref().map(EmpiricalCoupling::new),
            steps_per_epoch,
            de: tree.dt() / steps_per_epoch as f64,
            cdf: problem.m0.cdf(),
        })
    }

    fn tree(&self) -> &ScenarioTree {
        &self.feedback.sol.tree
    }

    fn steps(&self) -> usize {
        self.tree().n_steps * self.steps_per_epoch
    }

    fn time(&self, k: usize) -> f64 {
        self.tree().t0 + k as f64 * self.de
    }

    /// Initial positions of the players from their own streams, and the Brownian path.
    fn scenario(&self, run: usize, z: &[u64]) -> Result<Scenario> {
        let tree = self.tree();
        let grid = self.problem.grid();
        let sigma = tree.sigma();
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(run as u64);
        let steps = self.steps();
        let mut w = vec![0.0; steps + 1];
        let mut nodes = vec![tree.root(); steps + 1];
        let sq = self.de.sqrt();
        for k in 0..steps {
            let xi: f64 = rng.sample(StandardNormal);
            w[k + 1] = w[k] + sq * xi;
            nodes[k + 1] = if (k + 1) % self.steps_per_epoch == 0 {
                tree.nearest_child(nodes[k], w[k + 1])
            } else {
                nodes[k]
            };
        }
        let x0: Vec<f64> = z
            .iter()
            .map(|&s| {
                let mut r = ChaCha8Rng::seed_from_u64(self.cfg.seed.wrapping_add(1 + s));
                r.set_stream(run as u64);
                quantile(&grid, &self.cdf, r.random::<f64>())
            })
            .collect();
        let mut states = Vec::with_capacity(steps + 1);
        states.push(x0);
        for k in 0..steps {
            let t = self.time(k);
            let dw = w[k + 1] - w[k];
            let next: Vec<f64> = states[k]
                .iter()
                .map(|&x| x + self.de * self.feedback.at(x, t, nodes[k], w[k]) + sigma * dw)
                .collect();
            if let Some(&x) = next.iter().find(|&&x| !grid.contains(x)) {
                return Err(MfgError::DomainExit { x, t: t + self.de });
            }
            states.push(next);
        }
        Ok(Scenario { w, nodes, states })
    }

    /// Control of the deviating player at step `k`.
    fn control(&self, dev: &Deviation, sc: &Scenario, k: usize, x: f64, player: usize) -> f64 {
        let t = self.time(k);
        let (node, w) = (sc.nodes[k], sc.w[k]);
        match *dev {
            Deviation::Equilibrium => self.feedback.at(x, t, node, w),
            Deviation::Constant(c) => c,
            Deviation::BangBang { before, after } => {
                if k < self.steps() / 2 {
                    before
                } else {
                    after
                }
            }
            Deviation::Scaled(f) => f * self.feedback.at(x, t, node, w),
            Deviation::CrowdReactive(delta) => {
                let sol = self.feedback.sol;
                let tree = &sol.tree;
                let e = tree.nodes[node].epoch;
                let kk = sol.substeps;
                let pos = (((t - tree.time(e)) / tree.dt()) * kk as f64).round() as usize;
                let mean_field = gradient_at(&sol.u.grid, &sol.source[node][pos.min(kk - 1)], x - tree.sigma() * w);
                let empirical = self.running.slope(x, &sc.states[k], Some(player));
                self.feedback.at(x, t, node, w) - delta * (empirical - mean_field)
            }
        }
    }

    /// Cost of `player` along its own path `xs`, facing the equilibrium paths of the others.
    fn cost(&self, sc: &Scenario, xs: &[f64], controls: &[f64], player: usize) -> f64 {
        let tree = self.tree();
        let mut c = 0.0;
        for k in 0..self.steps() {
            let node = sc.nodes[k];
            let te = tree.time(tree.nodes[node].epoch);
            c += self.de
                * (self.problem.h.running_cost(controls[k], xs[k], te, 0.0)
                    + self.running.value(xs[k], &sc.states[k], Some(player)));
        }
        let n = self.steps();
        let xt = xs[n];
        c += self.problem.terminal.g.eval(xt, self.time(n));
        if let Some(tc) = &self.terminal {
            c += tc.value(xt, &sc.states[n], Some(player));
        }
        c
    }

    /// Path and cost of `player` under `dev` while the others play the equilibrium.
    fn play(&self, sc: &Scenario, dev: &Deviation, player: usize) -> Result<(Vec<f64>, f64)> {
        let grid = self.problem.grid();
        let sigma = self.tree().sigma();
        let n = self.steps();
        let mut xs = Vec::with_capacity(n + 1);
        let mut controls = Vec::with_capacity(n);
        xs.push(sc.states[0][player]);
        for k in 0..n {
            let x = xs[k];
            let a = match dev {
                Deviation::Equilibrium => (sc.states[k + 1][player] - x - sigma * (sc.w[k + 1] - sc.w[k])) / self.de,
                _ => self.control(dev, sc, k, x, player),
            };
            let next = match dev {
                Deviation::Equilibrium => sc.states[k + 1][player],
                _ => x + self.de * a + sigma * (sc.w[k + 1] - sc.w[k]),
            };
            if !grid.contains(next) {
                return Err(MfgError::DomainExit { x: next, t: self.time(k + 1) });
            }
            controls.push(a);
            xs.push(next);
        }
        let c = self.cost(sc, &xs, &controls, player);
        Ok((xs, c))
    }
}

/// Outcome of one simulated game.
#[derive(Debug, Clone, PartialEq)]
pub struct GameRun {
    pub costs: Vec<f64>,
    /// Positions `[step][player]`, when requested.
    pub states: Option<Vec<Vec<f64>>>,
    /// Brownian value at each Euler step.
    pub w: Vec<f64>,
}

/// Simulates run `run` of the game. Player `i` draws its initial position from
/// stream `player_seeds[i]`; `deviation` replaces one player's control.
pub fn simulate_game(
    cfg: &GameConfig,
    problem: &MfgProblem,
    sol: &StochasticMfgSolution,
    run: usize,
    player_seeds: Option<&[u64]>,
    deviation: Option<(usize, Deviation)>,
    keep_states: bool,
) -> Result<GameRun> {
    let game = Game::new(cfg, problem, sol)?;
    let default: Vec<u64> = (0..cfg.n_players as u64).collect();
    let seeds = player_seeds.unwrap_or(&default);
    if seeds.len() != cfg.n_players {
        return Err(MfgError::InvalidParameter(format!("{} seeds for {} players", seeds.len(), cfg.n_players)));
    }
    let mut sc = game.scenario(run, seeds)?;
    let mut costs = Vec::with_capacity(cfg.n_players);
    for i in 0..cfg.n_players {
        let dev = match deviation {
            Some((p, d)) if p == i => d,
            _ => Deviation::Equilibrium,
        };
        costs.push(game.play(&sc, &dev, i)?.1);
    }
    if let Some((p, d)) = deviation {
        if keep_states && d != Deviation::Equilibrium {
            let (xs, _) = game.play(&sc, &d, p)?;
            for (row, x) in sc.states.iter_mut().zip(xs) {
                row[p] = x;
            }
        }
    }
    Ok(GameRun { costs, states: keep_states.then_some(sc.states), w: sc.w })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviationGap {
    pub deviation: Deviation,
    /// Mean of `J(equilibrium) - J(deviation)` for player 0.
    pub mean: f64,
    /// Half-width of the 95% confidence interval.
    pub ci: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashGap {
    pub n_players: usize,
    /// Largest positive part of the mean gains over the family.
    pub epsilon: f64,
    /// Confidence half-width of the deviation attaining `epsilon`.
    pub ci: f64,
    pub per_deviation: Vec<DeviationGap>,
}

/// Nash gap of player 0 against `family`, with common random numbers: each
/// run shares its Brownian path and initial positions across deviations.
pub fn nash_gap(cfg: &GameConfig, problem: &MfgProblem, sol: &StochasticMfgSolution, family: &[Deviation]) -> Result<NashGap> {
    if cfg.n_mc < 2 {
        return Err(MfgError::InvalidParameter("need at least two runs".into()));
    }
    let game = Game::new(cfg, problem, sol)?;
    let seeds: Vec<u64> = (0..cfg.n_players as u64).collect();
    let gains: Vec<Result<Vec<f64>>> = (0..cfg.n_mc)
        .into_par_iter()
        .map(|run| {
            let sc = game.scenario(run, &seeds)?;
            let base = game.play(&sc, &Deviation::Equilibrium, 0)?.1;
            family.iter().map(|d| Ok(base - game.play(&sc, d, 0)?.1)).collect()
        })
        .collect();
    let mut sums = vec![(0.0, 0.0); family.len()];
    for g in gains {
        for (s, v) in sums.iter_mut().zip(g?) {
            s.0 += v;
            s.1 += v * v;
        }
    }
    let n = cfg.n_mc as f64;
    let per_deviation: Vec<DeviationGap> = family
        .iter()
        .zip(sums)
        .map(|(&deviation, (s, s2))| {
            let mean = s / n;
            let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
            DeviationGap { deviation, mean, ci: 1.96 * (var / n).sqrt() }
        })
        .collect();
    let best = per_deviation
        .iter()
        .max_by(|a, b| a.mean.total_cmp(&b.mean))
        .ok_or_else(|| MfgError::InvalidParameter("empty deviation family".into()))?;
    Ok(NashGap { n_players: cfg.n_players, epsilon: best.mean.max(0.0), ci: best.ci, per_deviation })
}

/// Mean over runs of `d1` between the empirical law of the players at the
/// horizon and the solution density at the projected leaf, shifted by the
/// realized Brownian value.
pub fn empirical_law_gap(cfg: &GameConfig, problem: &MfgProblem, sol: &StochasticMfgSolution) -> Result<f64> {
    let game = Game::new(cfg, problem, sol)?;
    let seeds: Vec<u64> = (0..cfg.n_players as u64).collect();
    let sigma = sol.tree.sigma();
    let d: Vec<Result<f64>> = (0..cfg.n_mc)
        .into_par_iter()
        .map(|run| {
            let sc = game.scenario(run, &seeds)?;
            let n = game.steps();
            let leaf = sc.nodes[n];
            let shifted: Vec<f64> = sc.states[n].iter().map(|x| x - sigma * sc.w[n]).collect();
            let weights = vec![1.0 / shifted.len() as f64; shifted.len()];
            Ok(empirical_d1(&shifted, &weights, &sol.m[leaf]))
        })
        .collect();
    let mut total = 0.0;
    for v in d {
        total += v?;
    }
    Ok(total / cfg.n_mc as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::DensityField;
    use crate::hamiltonian::Coefficient;
    use crate::mfg::{solve_stochastic_mfg, Damping, FixedPointConfig, TerminalCost};
    use crate::noise::build_tree;

    fn setup(kappa: f64, g: Coefficient, beta: f64) -> (MfgProblem, StochasticMfgSolution) {
        let grid = SpatialGrid::new(-5.0, 5.0, 257).unwrap();
        let f = if kappa == 0.0 { CouplingF::Zero } else { CouplingF::Linear { kappa } };
        let p = MfgProblem {
            h: QuadraticHamiltonian::kinetic(),
            coupling: MonotoneCoupling::new(grid, f, 0.3, None, 10.0).unwrap(),
            terminal: TerminalCost::fixed(g),
            m0: DensityField::gaussian(grid, 0.0, 0.5).unwrap(),
        };
        let tree = build_tree(1.0, 2, 2, beta, true).unwrap();
        let cfg = FixedPointConfig { damping: Damping::Constant(0.5), tol: 1e-6, ..Default::default() };
        let s = solve_stochastic_mfg(&tree, &p, &cfg).unwrap();
        (p, s)
    }

    fn game(n: usize) -> GameConfig {
        GameConfig { n_players: n, euler_dt: 0.02, n_mc: 40, seed: 7 }
    }

    #[test]
    fn zero_costs_and_zero_feedback_cost_nothing() {
        let (p, s) = setup(0.0, Coefficient::Constant(0.0), 0.1);
        let run = simulate_game(&game(2), &p, &s, 0, None, Some((0, Deviation::Constant(0.0))), false).unwrap();
        assert!(run.costs.iter().all(|c| c.abs() < 1e-12), "{:?}", run.costs);
    }

    #[test]
    fn players_at_one_point_are_exchangeable() {
        let (p, s) = setup(0.5, Coefficient::Constant(0.0), 0.0);
        let seeds = [3u64; 4];
        let run = simulate_game(&game(4), &p, &s, 0, Some(&seeds), None, true).unwrap();
        assert!(run.costs.iter().all(|c| (c - run.costs[0]).abs() < 1e-14));
        for row in run.states.unwrap() {
            assert!(row.iter().all(|x| *x == row[0]));
        }
    }

    #[test]
    fn permuting_seeds_permutes_costs() {
        let (p, s) = setup(0.5, Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 }, 0.1);
        let a = simulate_game(&game(5), &p, &s, 1, Some(&[0, 1, 2, 3, 4]), None, false).unwrap();
        let b = simulate_game(&game(5), &p, &s, 1, Some(&[4, 3, 2, 1, 0]), None, false).unwrap();
        for i in 0..5 {
            assert!((a.costs[i] - b.costs[4 - i]).abs() < 1e-12);
        }
    }

    #[test]
    fn null_deviation_has_zero_gap() {
        let (p, s) = setup(0.5, Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 }, 0.1);
        let gap = nash_gap(&game(8), &p, &s, &[Deviation::Equilibrium]).unwrap();
        assert_eq!(gap.per_deviation[0].mean, 0.0);
        assert_eq!(gap.epsilon, 0.0);
    }

    #[test]
    fn constant_feedback_for_flat_value() {
        let mut h = QuadraticHamiltonian::kinetic();
        h.b = Coefficient::Constant(0.3);
        let (mut p, _) = setup(0.0, Coefficient::Constant(0.0), 0.1);
        p.h = h;
        let tree = build_tree(1.0, 2, 2, 0.1, true).unwrap();
        let s = solve_stochastic_mfg(&tree, &p, &FixedPointConfig::default()).unwrap();
        let fb = optimal_feedback(&s, &h);
        for x in [-1.0, 0.0, 0.7] {
            assert!((fb.on_tree(x, 0.3, 1) + 0.3).abs() < 1e-9);
        }
        assert!(fb.bound() >= 0.3);
    }
}
