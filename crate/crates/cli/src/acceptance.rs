//! Acceptance suite: fifteen checks at desk scale, each reported as one
//! pass/fail line with the measured quantities.

use mfg_core::hj::{shifted_terminal, ControlProblem};
use mfg_core::hamiltonian::ModulusSpec;
use mfg_core::mfg::{coupling_gap, Estimates};
use mfg_core::transport::{flow_lipschitz, transport_interval, Direction};
use mfg_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

#[derive(Debug, Clone, PartialEq)]
pub struct CriterionOutcome {
    pub id: usize,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CriterionOutcome {
    pub fn line(&self) -> String {
        format!(
            "[{}] {:>2} {:<28} {} ({:.2}s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.id,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

pub const NAMES: [&str; 15] = [
    "hopf_lax_oracle",
    "comparison",
    "regularity_bounds",
    "martingale_exactness",
    "mass_conservation",
    "bshj_cauchy_decay",
    "coupling_gap",
    "duality_inequality",
    "uniqueness",
    "control_representation",
    "maximum_principle",
    "filippov_transport",
    "zero_noise_reduction",
    "stability_estimate",
    "epsilon_nash_decrease",
];

type Check = Result<(bool, String)>;

pub fn run_criterion(id: usize, seed: u64) -> CriterionOutcome {
    let start = Instant::now();
    let res: Check = match id {
        1 => hopf_lax(),
        2 => comparison(seed),
        3 => regularity(),
        4 => martingale(),
        5 => mass(),
        6 => bshj_cauchy(),
        7 => coupling_decay(),
        8 => duality(),
        9 => uniqueness(),
        10 => control_representation(seed),
        11 => maximum_principle(seed),
        12 => filippov(seed),
        13 => zero_noise(),
        14 => stability(),
        15 => epsilon_nash(seed),
        _ => Err(MfgError::InvalidParameter(format!("no criterion {id}"))),
    };
    let (passed, detail) = res.unwrap_or_else(|e| (false, format!("error: {e}")));
    CriterionOutcome { id, name: NAMES.get(id.wrapping_sub(1)).copied().unwrap_or("unknown"), passed, detail, seconds: start.elapsed().as_secs_f64() }
}

pub fn run_all(seed: u64) -> Vec<CriterionOutcome> {
    (1..=15).map(|id| run_criterion(id, seed)).collect()
}

fn grid() -> SpatialGrid {
    SpatialGrid::new(-5.0, 5.0, 257).expect("valid grid")
}

fn cos(amp: f64, freq: f64) -> Coefficient {
    Coefficient::CosX { base: 0.0, amp, freq }
}

/// Coupled problem shared by several checks.
fn shared_problem() -> MfgProblem {
    let g = grid();
    MfgProblem {
        h: QuadraticHamiltonian::new(Coefficient::Constant(1.0), Coefficient::Constant(0.0), cos(0.2, 1.0), 2.0, 0.0)
            .expect("valid hamiltonian"),
        coupling: MonotoneCoupling::new(g, CouplingF::Linear { kappa: 0.5 }, 0.3, None, 10.0).expect("valid coupling"),
        terminal: TerminalCost::fixed(cos(0.5, 1.0)),
        m0: DensityField::gaussian(g, 0.0, 0.5).expect("valid density"),
    }
}

fn shared_tree() -> ScenarioTree {
    build_tree(1.0, 4, 2, 0.1, true).expect("valid tree")
}

fn fp_config(init: Initialization) -> FixedPointConfig {
    FixedPointConfig { damping: Damping::Adaptive(0.5), init, ..Default::default() }
}

fn shared_solution(init: Initialization) -> Result<StochasticMfgSolution> {
    solve_stochastic_mfg(&shared_tree(), &shared_problem(), &fp_config(init))
}

fn hopf_lax() -> Check {
    let g = grid();
    let start = Instant::now();
    let h = QuadraticHamiltonian::kinetic();
    let terminal = GridFunction::from_fn(g, f64::abs);
    let fr = h.freeze(&g, 0.0, 0.0);
    let k = hj::cfl_substeps(&fr, &g, &terminal.values, 1.0, 0.8);
    let u = solve_interval_hj(&terminal, &h, 0.0, 0.0, 1.0, k)?;
    let exact = |x: f64| if x.abs() >= 1.0 { x.abs() - 0.5 } else { 0.5 * x * x };
    let err = (0..g.n_points).fold(0.0_f64, |m, i| m.max((u.values[i] - exact(g.x(i))).abs()));
    let secs = start.elapsed().as_secs_f64();
    // The runtime stays out of the detail when it passes, keeping reports reproducible.
    let timing = if secs < 1.0 { "runtime under 1s".to_string() } else { format!("runtime {secs:.3}s exceeds 1s") };
    Ok((err <= 2.0 * g.h && secs < 1.0, format!("max error {err:.3e} <= 2h = {:.3e}, {timing}", 2.0 * g.h)))
}

fn comparison(seed: u64) -> Check {
    let g = grid();
    let tree = build_tree(1.0, 4, 2, 0.2, true)?;
    let h = QuadraticHamiltonian::new(
        Coefficient::SinX { base: 1.0, amp: 0.3, freq: 1.0 },
        Coefficient::Constant(0.2),
        cos(0.3, 1.0),
        2.0,
        0.0,
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut violations = 0;
    let mut worst = f64::INFINITY;
    for _ in 0..50 {
        let modes: Vec<(f64, f64, f64)> =
            (0..3).map(|_| (rng.random_range(-0.5..0.5), rng.random_range(0.5..2.0), rng.random_range(0.0..6.3))).collect();
        let (b, c, s, d) = (rng.random_range(0.0..1.0), rng.random_range(-2.0..2.0), rng.random_range(0.2..1.0), rng.random_range(0.0..0.2));
        let g2 = |x: f64| modes.iter().map(|(a, f, p)| a * (f * x + p).cos()).sum::<f64>();
        let g1 = |x: f64| g2(x) + b * (-(x - c) * (x - c) / (2.0 * s * s)).exp() + d;
        let u1 = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, g1))?;
        let u2 = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, g2))?;
        for node in 0..tree.node_count() {
            let m = u1.u_plus[node].iter().zip(&u2.u_plus[node]).fold(f64::INFINITY, |m, (a, b)| m.min(a - b));
            worst = worst.min(m);
            if m < -5.0 * g.h {
                violations += 1;
            }
        }
    }
    Ok((violations == 0, format!("{violations} violations over 50 pairs, min(u1 - u2) = {worst:.3e} >= -5h")))
}

fn spread(v: &[f64]) -> f64 {
    let hi = v.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let lo = v.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    (hi - lo) / hi.abs()
}

/// Relative residual of the least-squares line through `(x, y)`.
fn affine_residual(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let res = x.iter().zip(y).fold(0.0_f64, |m, (a, b)| m.max((b - (my + slope * (a - mx))).abs()));
    res / y.iter().fold(0.0_f64, |m, b| m.max(b.abs()))
}

fn regularity() -> Check {
    let g = grid();
    let h = QuadraticHamiltonian::kinetic();
    let terminal = |x: f64| 0.5 * (1.3 * x).cos();
    let (mut su, mut sdu, mut sm, mut ssc) = (vec![], vec![], vec![], vec![]);
    for n in [2, 4, 8] {
        let tree = build_tree(1.0, n, 2, 0.2, false)?;
        let s = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, terminal))?;
        su.push(s.diagnostics.iter().fold(0.0_f64, |m, d| m.max(d.sup_norm_u)));
        sdu.push(s.diagnostics.iter().fold(0.0_f64, |m, d| m.max(d.lip_u)));
        ssc.push(s.diagnostics.iter().fold(0.0_f64, |m, d| m.max(d.semiconc_u)));
        // The martingale at the horizon, in L¹ over scenarios and sup over x.
        let mut e = vec![0.0; g.n_points];
        for &l in tree.leaves() {
            for (acc, v) in e.iter_mut().zip(&s.m_upper[l]) {
                *acc += tree.nodes[l].prob * v.abs();
            }
        }
        sm.push(e.iter().fold(0.0_f64, |a, b| a.max(*b)));
    }
    let spreads = [spread(&su), spread(&sdu), spread(&sm), spread(&ssc)];
    let horizons = [0.5, 1.0, 2.0];
    let mut sc0 = vec![];
    for t in horizons {
        let tree = build_tree(t, 4, 2, 0.2, false)?;
        let s = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, terminal))?;
        sc0.push(s.diagnostics[0].semiconc_u);
    }
    let fit = affine_residual(&horizons, &sc0);
    let ok = spreads.iter().all(|s| *s <= 0.1) && fit <= 0.2;
    Ok((
        ok,
        format!(
            "spreads u {:.3} Du {:.3} M {:.3} semiconcavity {:.3} <= 0.1; semiconcavity at t=0 over T {:?} = [{:.3}, {:.3}, {:.3}], affine fit residual {fit:.3} <= 0.2",
            spreads[0], spreads[1], spreads[2], spreads[3], horizons, sc0[0], sc0[1], sc0[2]
        ),
    ))
}

fn martingale() -> Check {
    let sol = shared_solution(Initialization::Decoupled)?;
    let coupled = sol.u.martingale_defect(&sol.tree);
    let g = grid();
    let tree = build_tree(1.0, 6, 3, 0.3, false)?;
    let plain = solve_bshj(&tree, &shared_problem().h, &shifted_terminal(&tree, &g, |x| (0.5 * x).sin()))?.martingale_defect(&tree);
    let worst = coupled.max(plain);
    Ok((worst <= 1e-12, format!("max |E[dM | node]| = {worst:.2e} <= 1e-12 (coupled {coupled:.1e}, trinomial {plain:.1e})")))
}

fn mass() -> Check {
    let sol = shared_solution(Initialization::Decoupled)?;
    let g = grid();
    let mut defect = sol.max_mass_defect();
    for path in &sol.m_paths {
        for m in path {
            defect = defect.max((g.integrate(m) - 1.0).abs());
        }
    }
    let flux = sol.max_boundary_flux();
    Ok((defect <= 1e-8 && flux <= 1e-3, format!("max |mass - 1| = {defect:.2e} <= 1e-8, boundary flux {flux:.2e} <= 1e-3")))
}

fn bshj_cauchy() -> Check {
    let g = grid();
    let h = QuadraticHamiltonian::new(
        Coefficient::SinX { base: 1.0, amp: 0.2, freq: 1.0 },
        Coefficient::Constant(0.0),
        cos(0.3, 1.0),
        2.0,
        0.0,
    )?;
    let ns = [2, 4, 8, 16];
    let mut sols = vec![];
    for n in ns {
        let tree = build_tree(1.0, n, 2, 0.2, true)?;
        let s = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, |x| 0.5 * (1.3 * x).cos()))?;
        sols.push((tree, s));
    }
    let mut gaps = vec![];
    for w in sols.windows(2) {
        gaps.push(mfg::cauchy_gap(&w[0].0, &w[0].1.u_plus, &w[1].0, &w[1].1.u_plus, &g, 3.0)?);
    }
    let ratios: Vec<f64> = gaps.windows(2).map(|w| w[1] / w[0]).collect();
    let ok = ratios.iter().all(|r| *r <= 0.9);
    Ok((ok, format!("gaps N=2,4,8: {:.3e} {:.3e} {:.3e}, ratios {:.3} {:.3} <= 0.9", gaps[0], gaps[1], gaps[2], ratios[0], ratios[1])))
}

fn coupled_problem(b: Coefficient) -> Result<MfgProblem> {
    let g = grid();
    Ok(MfgProblem {
        h: QuadraticHamiltonian::new(Coefficient::Constant(1.0), b, cos(0.2, 1.0), 2.0, 0.0)?,
        coupling: MonotoneCoupling::new(g, CouplingF::Linear { kappa: 0.5 }, 0.3, None, 10.0)?,
        terminal: TerminalCost {
            g: cos(0.5, 1.0),
            coupling: Some(MonotoneCoupling::new(g, CouplingF::Linear { kappa: 0.2 }, 0.3, None, 10.0)?),
        },
        m0: DensityField::gaussian(g, 0.0, 0.5)?,
    })
}

fn coupling_gaps(p: &MfgProblem) -> Result<Vec<f64>> {
    let mut sols = vec![];
    for n in [2, 4, 8, 16] {
        sols.push(solve_stochastic_mfg(&build_tree(1.0, n, 2, 0.1, true)?, p, &fp_config(Initialization::Decoupled))?);
    }
    sols.windows(2).map(|w| coupling_gap(&w[0], &w[1], 3.0)).collect()
}

fn coupling_decay() -> Check {
    let auto = coupling_gaps(&coupled_problem(Coefficient::Constant(0.0))?)?;
    let decreasing = auto.windows(2).all(|w| w[1] < w[0]);
    let p = coupled_problem(Coefficient::SinT { base: 0.0, amp: 0.5, freq: 3.0 })?;
    let timed = coupling_gaps(&p)?;
    let g = grid();
    let spec = ModulusSpec { grid: &g, horizon: 1.0, beta: 0.1, coupling: Some(&p.coupling), sample_measures: &[] };
    let tm = time_modulus(&p.h, &spec, &[2, 4, 8], &[3.0]);
    let omega: Vec<f64> = [2, 4, 8].iter().map(|&n| tm.get(n, 3.0).unwrap_or(f64::NAN)).collect();
    let c = timed[0] / omega[0];
    let bounded = timed.iter().zip(&omega).all(|(gap, w)| *gap <= 2.0 * c * w);
    Ok((
        decreasing && bounded,
        format!(
            "autonomous gaps {:.3e} {:.3e} {:.3e} decreasing; time-varying gaps {:.3e} {:.3e} {:.3e} vs 2 C omega {:.3e} {:.3e} {:.3e}",
            auto[0],
            auto[1],
            auto[2],
            timed[0],
            timed[1],
            timed[2],
            2.0 * c * omega[0],
            2.0 * c * omega[1],
            2.0 * c * omega[2]
        ),
    ))
}

fn duality() -> Check {
    let a = shared_solution(Initialization::Frozen)?;
    let b = shared_solution(Initialization::Decoupled)?;
    let r = duality_residual(&a, &b)?;
    let tol = 5.0 * (grid().h + a.tree.horizon / a.tree.n_steps as f64);
    Ok((r <= tol, format!("assembled expectation {r:.3e} <= 5(h + T/N) = {tol:.3e}")))
}

fn uniqueness() -> Check {
    let a = shared_solution(Initialization::Frozen)?;
    let b = shared_solution(Initialization::Decoupled)?;
    let g = grid();
    let mut d1 = 0.0_f64;
    let mut du = 0.0_f64;
    for node in 0..a.tree.node_count() {
        d1 = d1.max(mfg_core::grid::d1_values(&g, &a.m[node].values, &b.m[node].values));
        du = du.max(a.u.u_plus[node].iter().zip(&b.u.u_plus[node]).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs())));
    }
    Ok((
        d1 <= 1e-3 && du <= 5.0 * g.h,
        format!("sup d1 {d1:.2e} <= 1e-3, sup |u1 - u2| {du:.2e} <= 5h (iterations {} and {})", a.iterations, b.iterations),
    ))
}

fn control_representation(seed: u64) -> Check {
    let sol = shared_solution(Initialization::Decoupled)?;
    let p = shared_problem();
    let g = grid();
    let problem = ControlProblem {
        tree: &sol.tree,
        h: &p.h,
        grid: &g,
        source: Some(&sol.source),
        terminal: &sol.terminal,
        euler_steps: 50,
    };
    let tree = &sol.tree;
    let feedback = |x: f64, t: f64, node: usize| sol.u.optimal_control(tree, &p.h, node, t, x);
    let probes = [-1.0, -0.5, 0.0, 0.5, 1.0];
    let est = control_value(&problem, &feedback, &probes, 10_000, seed)?;
    let base = 3.0 * g.h + 3.0 * tree.horizon / tree.n_steps as f64;
    let (mut worst, mut err) = (f64::NEG_INFINITY, 0.0_f64);
    for e in &est {
        let d = (e.mean - g.interpolate(sol.u.root_value(), e.x)).abs();
        err = err.max(d);
        worst = worst.max(d - base - e.ci);
    }
    let ci = est.iter().fold(0.0_f64, |m, e| m.max(e.ci));
    Ok((worst <= 0.0, format!("max |MC - u0| = {err:.3e}, margin to 3h + 3T/N + CI = {worst:.3e} <= 0, largest CI {ci:.2e}")))
}

fn maximum_principle(seed: u64) -> Check {
    let sol = shared_solution(Initialization::Decoupled)?;
    let p = shared_problem();
    let g = grid();
    let euler_steps = 50;
    let problem = ControlProblem {
        tree: &sol.tree,
        h: &p.h,
        grid: &g,
        source: Some(&sol.source),
        terminal: &sol.terminal,
        euler_steps,
    };
    let euler_dt = sol.tree.dt() / euler_steps as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut feed, mut cost) = (0.0_f64, 0.0_f64);
    for _ in 0..50 {
        let path = sol.tree.sample_path_with(&mut rng);
        let x0 = rng.random_range(-1.5..1.5);
        let c = costate_along_path(&problem, &sol.u, &path, x0)?;
        feed = feed.max(c.feedback_residual.iter().fold(0.0_f64, |m, r| m.max(r.abs())));
        cost = cost.max(c.pbar.iter().zip(&c.grad_u).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs())));
    }
    let (tf, tc) = (5.0 * g.h + 2.0 * euler_dt, 5.0 * g.h);
    Ok((
        feed <= tf && cost <= tc,
        format!("|gamma' + DpH(pbar)| {feed:.3e} <= {tf:.3e}, |pbar - Du| {cost:.3e} <= 5h = {tc:.3e}"),
    ))
}

fn filippov(seed: u64) -> Check {
    let g = grid();
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let m0 = DensityField::uniform(g, -1.0, 1.0)?;
    let t = 1.0;
    let drift = DriftField::from_fn(g, t, 1, sign);
    let rec = transport_interval(&m0.values, &drift, 1.0)?;
    let exact = DensityField::new(
        g,
        (0..g.n_points)
            .map(|i| {
                // Cell average of 1/2 on [-2, -1] and [1, 2].
                let (lo, hi) = (g.x(i) - 0.5 * g.h, g.x(i) + 0.5 * g.h);
                let cover = |a: f64, b: f64| (hi.min(b) - lo.max(a)).max(0.0);
                0.5 * (cover(-2.0, -1.0) + cover(1.0, 2.0)) / g.h
            })
            .collect(),
    )?;
    let l1 = DensityField::new(g, rec.last().to_vec())?.l1_distance(&exact)?;

    let starts: Vec<f64> = (0..41).map(|k| -2.0 + 0.1 * k as f64).collect();
    let mut ends = vec![];
    for &x in &starts {
        ends.push(filippov_flow(&sign, &g, x, t, 0.0, Direction::Backward, 1e-3)?.end());
    }
    let lip = flow_lipschitz(&starts, &ends);
    let c0 = drift.one_sided_constant();
    let lip_bound = 1.1 * (c0 * t).exp();

    // Zero noise on a non-recombining tree: both leaves carry the same flow.
    let tree = build_tree(t, 1, 2, 0.0, false)?;
    let n = 10_000;
    let ens = characteristics_ensemble(&tree, &vec![drift; tree.node_count()], &m0, n, seed, 1.0)?;
    let grid_m = DensityField::new(g, rec.last().to_vec())?;
    let d1 = ens.d1_to(tree.leaves()[0], &grid_m);
    let d1_tol = 5.0 * g.h + 1.0 / (n as f64).sqrt();
    Ok((
        l1 <= 3.0 * g.h && lip <= lip_bound && d1 <= d1_tol,
        format!(
            "L1 {l1:.3e} <= 3h = {:.3e}; backward Lipschitz {lip:.3} <= {lip_bound:.3}; particle d1 {d1:.3e} <= {d1_tol:.3e}",
            3.0 * g.h
        ),
    ))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0_f64, |m, (x, y)| m.max((x - y).abs()))
}

fn zero_noise() -> Check {
    let p = shared_problem();
    let cfg = fp_config(Initialization::Decoupled);
    let det = solve_deterministic_mfg(&p, (0.0, 1.0), 4, &cfg)?;
    let tree = build_tree(1.0, 4, 2, 0.0, true)?;
    let sto = solve_stochastic_mfg(&tree, &p, &cfg)?;
    let lat = &det.lattice;
    let mut worst = 0.0_f64;
    for node in &tree.nodes {
        let (id, e) = (node.id, node.epoch);
        worst = worst.max(max_diff(&sto.u.u_plus[id], &lat.u.u_plus[e]));
        worst = worst.max(max_diff(&sto.m[id].values, &lat.m[e].values));
        for dm in &sto.u.dm[id] {
            worst = worst.max(dm.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
        }
        if e < tree.n_steps {
            for (a, b) in sto.u.snapshots[id].iter().zip(&lat.u.snapshots[e]) {
                worst = worst.max(max_diff(a, b));
            }
            for (a, b) in sto.m_paths[id].iter().zip(&lat.m_paths[e]) {
                worst = worst.max(max_diff(a, b));
            }
            for (a, b) in sto.source[id].iter().zip(&lat.source[e]) {
                worst = worst.max(max_diff(a, b));
            }
        }
    }
    let same_shape = sto.substeps == lat.substeps && sto.iterations == lat.iterations;
    Ok((worst <= 1e-10 && same_shape, format!("max field difference {worst:.2e} <= 1e-10 (substeps {}, iterations {})", sto.substeps, sto.iterations)))
}

fn stability() -> Check {
    let g = grid();
    let run = |c: f64| -> Result<DeterministicMfgSolution> {
        let p = MfgProblem {
            h: QuadraticHamiltonian::kinetic(),
            coupling: MonotoneCoupling::new(g, CouplingF::Linear { kappa: 0.05 }, 0.005, None, 10.0)?,
            terminal: TerminalCost::fixed(Coefficient::Constant(0.0)),
            m0: DensityField::uniform(g, c - 0.5, c + 0.5)?,
        };
        solve_deterministic_mfg(&p, (0.0, 0.5), 2, &fp_config(Initialization::Decoupled))
    };
    let base = run(0.0)?;
    let mut c_fit = None;
    let mut ok = true;
    let mut parts = vec![];
    for c in [0.1, 0.2, 0.4] {
        let gap = stability_gap(&base, &run(c)?)?;
        let ratio = gap.lhs / gap.d1_initial;
        let cal = *c_fit.get_or_insert(ratio);
        ok &= gap.lhs <= 1.5 * cal * gap.d1_initial;
        parts.push(format!("c={c}: |du|^3 {:.3e}, d1 {:.3}, ratio/C {:.3}", gap.lhs, gap.d1_initial, ratio / cal));
    }
    Ok((ok, format!("{} (limit 1.5)", parts.join("; "))))
}

fn epsilon_nash(seed: u64) -> Check {
    let p = shared_problem();
    let sol = shared_solution(Initialization::Decoupled)?;
    let family = Deviation::standard_family();
    let gap = |p: &MfgProblem, s: &StochasticMfgSolution, n: usize| -> Result<NashGap> {
        nash_gap(&GameConfig { n_players: n, euler_dt: 0.02, n_mc: 2000, seed }, p, s, &family)
    };
    let small = gap(&p, &sol, 16)?;
    let large = gap(&p, &sol, 256)?;
    let decrease = large.epsilon + large.ci < small.epsilon - small.ci;

    let mut free = p.clone();
    free.coupling = MonotoneCoupling::zero(p.grid());
    let free_sol = solve_stochastic_mfg(&shared_tree(), &free, &fp_config(Initialization::Decoupled))?;
    let mut sane = true;
    let mut free_parts = vec![];
    for n in [16, 64, 256] {
        let g = gap(&free, &free_sol, n)?;
        sane &= g.epsilon <= g.ci;
        free_parts.push(format!("{:.1e}<={:.1e}", g.epsilon, g.ci));
    }
    Ok((
        decrease && sane,
        format!(
            "eps(16) = {:.3e} +- {:.1e}, eps(256) = {:.3e} +- {:.1e}; decoupled eps <= CI: {}",
            small.epsilon,
            small.ci,
            large.epsilon,
            large.ci,
            free_parts.join(" ")
        ),
    ))
}

/// Per-epoch estimates of a solution, for reporting.
pub fn estimate_rows(e: &Estimates) -> Vec<[f64; 3]> {
    e.u_sup.iter().zip(&e.m_sup).zip(&e.second_moment).map(|((a, b), c)| [*a, *b, *c]).collect()
}
