//! Runs one experiment and writes its artifacts: CSV tables, a summary table
//! and a flat `manifest.txt` run record. Nothing time- or host-dependent is
//! written, so reruns with the same config are byte-identical.

use crate::acceptance;
use crate::config::{ExperimentConfig, ExperimentKind};
use crate::error::{CliError, CliResult, InModule};
use crate::output::{checksum, write_bytes, Cell, Table};
use mfg_core::hamiltonian::ModulusSpec;
use mfg_core::hj::shifted_terminal;
use mfg_core::transport::{flow_lipschitz, transport_interval, Direction};
use mfg_core::*;
use std::path::{Path, PathBuf};

/// Environment variable that, when set, prefixes relative output directories.
pub const OUTPUT_ROOT_VAR: &str = "MFG_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub files: Vec<String>,
    pub summary: Vec<(String, String)>,
    /// False when a check carried by the experiment failed.
    pub passed: bool,
}

pub fn output_dir(cfg: &ExperimentConfig) -> PathBuf {
    let dir = PathBuf::from(&cfg.output_dir);
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if dir.is_relative() => PathBuf::from(root).join(dir),
        _ => dir,
    }
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<(String, String)>,
    summary: Vec<(String, String)>,
    passed: bool,
}

impl Artifacts {
    fn table(&mut self, name: &str, t: &Table) -> CliResult<()> {
        let bytes = t.to_bytes();
        write_bytes(&self.dir.join(name), &bytes)?;
        self.files.push((name.to_string(), checksum(&bytes)));
        Ok(())
    }

    fn note(&mut self, key: &str, value: impl Into<Cell>) {
        let text = match value.into() {
            Cell::Num(v) => crate::output::format_num(v),
            Cell::Int(v) => v.to_string(),
            Cell::Text(s) => s,
        };
        self.summary.push((key.to_string(), text));
    }

    fn check(&mut self, key: &str, ok: bool) {
        self.note(key, ok);
        self.passed &= ok;
    }
}

/// Runs the experiment described by `cfg`; `config_text` is hashed into the manifest.
pub fn run(cfg: &ExperimentConfig, config_text: &str) -> CliResult<RunOutcome> {
    let dir = output_dir(cfg);
    std::fs::create_dir_all(&dir).map_err(|e| CliError::Io { path: dir.display().to_string(), message: e.to_string() })?;
    let mut art = Artifacts { dir: dir.clone(), files: vec![], summary: vec![], passed: true };
    match cfg.kind {
        ExperimentKind::Bshj => bshj(cfg, &mut art)?,
        ExperimentKind::DeterministicMfg => deterministic(cfg, &mut art)?,
        ExperimentKind::StochasticMfg => stochastic(cfg, &mut art)?,
        ExperimentKind::Convergence => convergence(cfg, &mut art)?,
        ExperimentKind::Filippov => filippov(cfg, &mut art)?,
        ExperimentKind::Nplayer => nplayer(cfg, &mut art)?,
        ExperimentKind::Acceptance => acceptance_table(cfg, &mut art)?,
    }
    let mut summary = Table::new(&["metric", "value"]);
    for (k, v) in &art.summary {
        summary.push(vec![k.as_str().into(), v.as_str().into()]);
    }
    art.table("summary.csv", &summary)?;

    let mut manifest = format!(
        "kind = {}\nseed = {}\nconfig_sha256 = {}\nstatus = {}\n",
        cfg.kind.name(),
        cfg.seed,
        checksum(config_text.as_bytes()),
        if art.passed { "pass" } else { "fail" }
    );
    for (name, sum) in &art.files {
        manifest.push_str(&format!("file.{name} = {sum}\n"));
    }
    write_bytes(&dir.join("manifest.txt"), manifest.as_bytes())?;
    Ok(RunOutcome { dir, files: art.files.into_iter().map(|f| f.0).collect(), summary: art.summary, passed: art.passed })
}

/// Probability-weighted mean over the nodes of each epoch.
fn epoch_means(tree: &ScenarioTree, fields: &[&[f64]]) -> Vec<Vec<f64>> {
    tree.epochs
        .iter()
        .map(|nodes| {
            let mut acc = vec![0.0; fields[0].len()];
            for &n in nodes {
                let p = tree.nodes[n].prob;
                acc.iter_mut().zip(fields[n]).for_each(|(a, v)| *a += p * v);
            }
            acc
        })
        .collect()
}

fn epoch_table(tree: &ScenarioTree, grid: &SpatialGrid, fields: &[&[f64]], column: &str) -> Table {
    let mut t = Table::new(&["epoch", "t", "x", column]);
    for (e, v) in epoch_means(tree, fields).iter().enumerate() {
        for (i, y) in v.iter().enumerate() {
            t.push(vec![e.into(), tree.time(e).into(), grid.x(i).into(), (*y).into()]);
        }
    }
    t
}

fn node_table(tree: &ScenarioTree, grid: &SpatialGrid, fields: &[&[f64]], column: &str) -> Table {
    let mut t = Table::new(&["node", "epoch", "w", "prob", "x", column]);
    for node in &tree.nodes {
        for (i, y) in fields[node.id].iter().enumerate() {
            t.push(vec![node.id.into(), node.epoch.into(), node.w.into(), node.prob.into(), grid.x(i).into(), (*y).into()]);
        }
    }
    t
}

fn history_table(history: &[f64]) -> Table {
    let mut t = Table::new(&["iteration", "residual"]);
    for (k, r) in history.iter().enumerate() {
        t.push(vec![(k + 1).into(), (*r).into()]);
    }
    t
}

fn estimates_table(e: &mfg_core::mfg::Estimates) -> Table {
    let mut t = Table::new(&["epoch", "u_sup", "m_sup", "second_moment"]);
    for (k, row) in acceptance::estimate_rows(e).iter().enumerate() {
        t.push(vec![k.into(), row[0].into(), row[1].into(), row[2].into()]);
    }
    t
}

fn bshj(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let grid = cfg.grid().in_module("grid")?;
    let tree = cfg.tree(cfg.n_steps).in_module("noise")?;
    let h = cfg.hamiltonian().in_module("hamiltonian")?;
    let g = cfg.terminal;
    let horizon = cfg.horizon;
    let sol = solve_bshj(&tree, &h, &shifted_terminal(&tree, &grid, |x| g.eval(x, horizon))).in_module("hj")?;
    let u: Vec<&[f64]> = sol.u_plus.iter().map(Vec::as_slice).collect();
    art.table("u_nodes.csv", &node_table(&tree, &grid, &u, "u"))?;
    art.table("u_epoch.csv", &epoch_table(&tree, &grid, &u, "u"))?;
    let mut d = Table::new(&["node", "epoch", "sup_u", "lip_u", "semiconcavity_u"]);
    for n in &sol.diagnostics {
        d.push(vec![n.node.into(), n.epoch.into(), n.sup_norm_u.into(), n.lip_u.into(), n.semiconc_u.into()]);
    }
    art.table("diagnostics.csv", &d)?;
    art.note("nodes", tree.node_count());
    art.note("root_sup_u", sol.root_value().iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    let defect = sol.martingale_defect(&tree);
    art.note("martingale_defect", defect);
    art.check("martingale_ok", defect <= 1e-12);
    Ok(())
}

fn deterministic(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let p = cfg.problem().in_module("mfg")?;
    let sol = solve_deterministic_mfg(&p, (0.0, cfg.horizon), cfg.n_steps, &cfg.fixed_point()).in_module("mfg")?;
    let grid = p.grid();
    let tree = &sol.lattice.tree;
    let u: Vec<&[f64]> = sol.u.iter().map(|f| f.values.as_slice()).collect();
    let m: Vec<&[f64]> = sol.m.iter().map(|f| f.values.as_slice()).collect();
    art.table("u_epoch.csv", &epoch_table(tree, &grid, &u, "u"))?;
    art.table("m_epoch.csv", &epoch_table(tree, &grid, &m, "m"))?;
    art.table("history.csv", &history_table(&sol.lattice.history))?;
    art.table("estimates.csv", &estimates_table(&sol.estimates()))?;
    art.note("iterations", sol.iterations);
    art.note("residual", sol.fixed_point_residual);
    let defect = sol.lattice.max_mass_defect();
    art.note("max_mass_defect", defect);
    art.check("mass_ok", defect <= 1e-8);
    Ok(())
}

fn stochastic(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let p = cfg.problem().in_module("mfg")?;
    let tree = cfg.tree(cfg.n_steps).in_module("noise")?;
    let sol = solve_stochastic_mfg(&tree, &p, &cfg.fixed_point()).in_module("mfg")?;
    let grid = p.grid();
    let u: Vec<&[f64]> = sol.u.u_plus.iter().map(Vec::as_slice).collect();
    let m: Vec<&[f64]> = sol.m.iter().map(|f| f.values.as_slice()).collect();
    art.table("u_nodes.csv", &node_table(&tree, &grid, &u, "u"))?;
    art.table("m_nodes.csv", &node_table(&tree, &grid, &m, "m"))?;
    art.table("u_epoch.csv", &epoch_table(&tree, &grid, &u, "u"))?;
    art.table("m_epoch.csv", &epoch_table(&tree, &grid, &m, "m"))?;
    art.table("history.csv", &history_table(&sol.history))?;
    art.table("estimates.csv", &estimates_table(&sol.estimates()))?;
    art.note("iterations", sol.iterations);
    art.note("residual", sol.residual);
    art.note("substeps", sol.substeps);
    let (defect, flux, mart) = (sol.max_mass_defect(), sol.max_boundary_flux(), sol.u.martingale_defect(&tree));
    art.note("max_mass_defect", defect);
    art.note("max_boundary_flux", flux);
    art.note("martingale_defect", mart);
    art.check("mass_ok", defect <= 1e-8 && flux <= 1e-3);
    art.check("martingale_ok", mart <= 1e-12);
    Ok(())
}

fn convergence(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let p = cfg.problem().in_module("mfg")?;
    let fp = cfg.fixed_point();
    let mut sols = vec![];
    for &n in &cfg.n_list {
        let tree = cfg.tree(n).in_module("noise")?;
        sols.push(solve_stochastic_mfg(&tree, &p, &fp).in_module("mfg")?);
    }
    let other = FixedPointConfig {
        init: match cfg.init {
            Initialization::Decoupled => Initialization::Frozen,
            Initialization::Frozen => Initialization::Decoupled,
        },
        ..fp
    };
    let alt = solve_stochastic_mfg(&sols[0].tree, &p, &other).in_module("mfg")?;
    let grid = p.grid();
    let modulus = if p.h.is_autonomous() && !p.coupling.depends_on_t() {
        None
    } else {
        let spec = ModulusSpec { grid: &grid, horizon: cfg.horizon, beta: cfg.beta, coupling: Some(&p.coupling), sample_measures: &[] };
        Some(time_modulus(&p.h, &spec, &cfg.n_list, &[cfg.radius]))
    };
    let refs: Vec<&StochasticMfgSolution> = sols.iter().collect();
    let rep = convergence_diagnostics(&refs, cfg.radius, modulus.as_ref(), Some((&sols[0], &alt))).in_module("mfg")?;
    let mut t = Table::new(&["n_coarse", "n_fine", "coupling_gap", "cauchy_gap", "omega_coarse"]);
    for k in 0..rep.coupling_gap.len() {
        let omega = rep.omega.get(k).copied().unwrap_or(0.0);
        t.push(vec![rep.n_list[k].into(), rep.n_list[k + 1].into(), rep.coupling_gap[k].into(), rep.cauchy_gap[k].into(), omega.into()]);
    }
    art.table("convergence.csv", &t)?;
    let tol = 5.0 * (grid.h + cfg.horizon / cfg.n_list[0] as f64);
    art.note("duality_residual", rep.duality_residual);
    art.check("duality_ok", rep.duality_residual <= tol);
    art.check("gaps_decreasing", rep.gaps_decreasing());
    Ok(())
}

fn filippov(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let grid = cfg.grid().in_module("grid")?;
    let m0 = cfg.m0.build(grid).in_module("grid")?;
    let sign = |x: f64| if x > 0.0 { 1.0 } else if x < 0.0 { -1.0 } else { 0.0 };
    let drift = DriftField::from_fn(grid, cfg.horizon, cfg.n_steps, sign);
    let rec = transport_interval(&m0.values, &drift, cfg.cfl).in_module("transport")?;
    let mut dens = Table::new(&["t", "x", "m"]);
    let ds = cfg.horizon / cfg.n_steps as f64;
    for (j, snap) in rec.snapshots.iter().enumerate() {
        for (i, v) in snap.iter().enumerate() {
            dens.push(vec![(j as f64 * ds).into(), grid.x(i).into(), (*v).into()]);
        }
    }
    art.table("density.csv", &dens)?;

    let starts: Vec<f64> = (0..=40).map(|k| -2.0 + 0.1 * k as f64).collect();
    let mut flow = Table::new(&["x_at_horizon", "x_at_start"]);
    let mut ends = vec![];
    for &x in &starts {
        let e = filippov_flow(&sign, &grid, x, cfg.horizon, 0.0, Direction::Backward, 1e-3).in_module("transport")?.end();
        flow.push(vec![x.into(), e.into()]);
        ends.push(e);
    }
    art.table("backward_flow.csv", &flow)?;

    let tree = build_tree(cfg.horizon, 1, 2, 0.0, false).in_module("noise")?;
    let drift1 = DriftField::from_fn(grid, cfg.horizon, cfg.n_steps, sign);
    let ens = characteristics_ensemble(&tree, &vec![drift1; tree.node_count()], &m0, cfg.particles, cfg.seed, cfg.cfl)
        .in_module("transport")?;
    let last = DensityField::new(grid, rec.last().to_vec()).in_module("transport")?;
    let d1 = ens.d1_to(tree.leaves()[0], &last);
    let lip = flow_lipschitz(&starts, &ends);
    let bound = 1.1 * (drift.one_sided_constant() * cfg.horizon).exp();
    let (lo, hi) = (m0.values.iter().position(|v| *v > 0.0), m0.values.iter().rposition(|v| *v > 0.0));
    let vacuum = match (lo, hi) {
        (Some(lo), Some(hi)) => rec.last()[lo..=hi].iter().filter(|v| **v < 1e-6).count() as f64 * grid.h,
        _ => 0.0,
    };
    art.note("vacuum_width", vacuum);
    art.note("backward_lipschitz", lip);
    art.note("particle_d1", d1);
    art.check("lipschitz_ok", lip <= bound);
    art.check("particle_ok", d1 <= 5.0 * grid.h + 1.0 / (cfg.particles as f64).sqrt());
    Ok(())
}

fn nplayer(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let p = cfg.problem().in_module("mfg")?;
    let tree = cfg.tree(cfg.n_steps).in_module("noise")?;
    let sol = solve_stochastic_mfg(&tree, &p, &cfg.fixed_point()).in_module("mfg")?;
    let family = Deviation::standard_family();
    let mut nash = Table::new(&["n_players", "epsilon", "ci"]);
    let mut devs = Table::new(&["n_players", "deviation", "mean_gain", "ci"]);
    let mut gaps = vec![];
    for &n in &cfg.players {
        let game = GameConfig { n_players: n, euler_dt: cfg.euler_dt, n_mc: cfg.n_mc, seed: cfg.seed };
        let g = nash_gap(&game, &p, &sol, &family).in_module("nplayer")?;
        nash.push(vec![n.into(), g.epsilon.into(), g.ci.into()]);
        for d in &g.per_deviation {
            devs.push(vec![n.into(), d.deviation.label().into(), d.mean.into(), d.ci.into()]);
        }
        gaps.push(g);
    }
    art.table("nash.csv", &nash)?;
    art.table("deviations.csv", &devs)?;
    if let (Some(first), Some(last)) = (gaps.first(), gaps.last()) {
        if gaps.len() > 1 {
            art.check("epsilon_decrease", last.epsilon + last.ci < first.epsilon - first.ci);
        }
    }
    art.note("mfg_iterations", sol.iterations);
    Ok(())
}

fn acceptance_table(cfg: &ExperimentConfig, art: &mut Artifacts) -> CliResult<()> {
    let outcomes = acceptance::run_all(cfg.seed);
    let mut t = Table::new(&["id", "name", "passed", "detail"]);
    for o in &outcomes {
        println!("{}", o.line());
        t.push(vec![o.id.into(), o.name.into(), o.passed.into(), o.detail.clone().into()]);
    }
    art.table("acceptance.csv", &t)?;
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    art.note("criteria", outcomes.len());
    art.note("failed", failed);
    art.passed &= failed == 0;
    Ok(())
}

/// Reads `manifest.txt` of a finished run into ordered key-value pairs.
pub fn read_manifest(dir: &Path) -> CliResult<Vec<(String, String)>> {
    let path = dir.join("manifest.txt");
    let text = std::fs::read_to_string(&path).map_err(|_| CliError::MissingArtifact(path.display().to_string()))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once(" = "))
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect())
}
