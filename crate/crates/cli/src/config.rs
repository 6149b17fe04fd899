//! Flat `key = value` experiment configuration with dotted section keys.
//!
//! Blank lines are ignored and `#` starts a comment. Every key has a
//! default; unknown keys and malformed values are rejected with the key path.
//!
//! Coefficients are written `const:c`, `sinx:base,amp,freq`,
//! `cosx:base,amp,freq`, `sint:base,amp,freq` or `lint:base,slope`. Densities
//! are `gaussian:mean,std` or `uniform:a,b`. Damping is `harmonic`,
//! `constant:w` or `adaptive:w`.

use crate::error::CliError;
use mfg_core::*;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExperimentKind {
    Bshj,
    DeterministicMfg,
    StochasticMfg,
    Convergence,
    Filippov,
    Nplayer,
    Acceptance,
}

impl ExperimentKind {
    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::Bshj => "bshj",
            ExperimentKind::DeterministicMfg => "deterministic_mfg",
            ExperimentKind::StochasticMfg => "stochastic_mfg",
            ExperimentKind::Convergence => "convergence",
            ExperimentKind::Filippov => "filippov",
            ExperimentKind::Nplayer => "nplayer",
            ExperimentKind::Acceptance => "acceptance",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [
            ExperimentKind::Bshj,
            ExperimentKind::DeterministicMfg,
            ExperimentKind::StochasticMfg,
            ExperimentKind::Convergence,
            ExperimentKind::Filippov,
            ExperimentKind::Nplayer,
            ExperimentKind::Acceptance,
        ]
        .into_iter()
        .find(|k| k.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DensitySpec {
    Gaussian { mean: f64, std: f64 },
    Uniform { a: f64, b: f64 },
}

impl DensitySpec {
    pub fn build(&self, grid: SpatialGrid) -> Result<DensityField> {
        match *self {
            DensitySpec::Gaussian { mean, std } => DensityField::gaussian(grid, mean, std),
            DensitySpec::Uniform { a, b } => DensityField::uniform(grid, a, b),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    pub output_dir: String,
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
    pub horizon: f64,
    pub n_steps: usize,
    pub branching: usize,
    pub beta: f64,
    pub recombining: bool,
    pub n_list: Vec<usize>,
    pub a: Coefficient,
    pub b: Coefficient,
    pub f: Coefficient,
    pub c0: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub potential_amp: f64,
    pub potential_freq: f64,
    pub kernel_sigma: f64,
    pub alpha: Option<f64>,
    pub terminal: Coefficient,
    pub terminal_kappa: f64,
    pub m0: DensitySpec,
    pub max_iters: usize,
    pub tol: f64,
    pub damping: Damping,
    pub init: Initialization,
    pub cfl: f64,
    pub radius: f64,
    pub players: Vec<usize>,
    pub n_mc: usize,
    pub euler_dt: f64,
    pub particles: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            kind: ExperimentKind::StochasticMfg,
            seed: 7,
            output_dir: "out".into(),
            x_min: -5.0,
            x_max: 5.0,
            n_points: 257,
            horizon: 1.0,
            n_steps: 4,
            branching: 2,
            beta: 0.1,
            recombining: true,
            n_list: vec![2, 4, 8],
            a: Coefficient::Constant(1.0),
            b: Coefficient::Constant(0.0),
            f: Coefficient::Constant(0.0),
            c0: 2.0,
            lambda: 0.0,
            kappa: 0.5,
            potential_amp: 0.0,
            potential_freq: 1.0,
            kernel_sigma: 0.3,
            alpha: None,
            terminal: Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 },
            terminal_kappa: 0.0,
            m0: DensitySpec::Gaussian { mean: 0.0, std: 0.5 },
            max_iters: 200,
            tol: 1e-6,
            damping: Damping::Adaptive(0.5),
            init: Initialization::Decoupled,
            cfl: 1.0,
            radius: 3.0,
            players: vec![16, 64, 256],
            n_mc: 1000,
            euler_dt: 0.02,
            particles: 10_000,
        }
    }
}

fn err(key: &str, message: impl Into<String>) -> CliError {
    CliError::Config { key: key.to_string(), message: message.into() }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, CliError> {
    v.parse().map_err(|_| err(key, format!("cannot parse '{v}'")))
}

fn nums(key: &str, v: &str, n: usize) -> std::result::Result<Vec<f64>, CliError> {
    let out: Vec<f64> = v.split(',').map(|s| num(key, s.trim())).collect::<std::result::Result<_, _>>()?;
    if out.len() != n {
        return Err(err(key, format!("expected {n} numbers, got {}", out.len())));
    }
    Ok(out)
}

fn usizes(key: &str, v: &str) -> std::result::Result<Vec<usize>, CliError> {
    let out: Vec<usize> = v.split(',').map(|s| num(key, s.trim())).collect::<std::result::Result<_, _>>()?;
    if out.is_empty() {
        return Err(err(key, "empty list"));
    }
    Ok(out)
}

pub fn parse_coefficient(key: &str, v: &str) -> std::result::Result<Coefficient, CliError> {
    let (tag, args) = v.split_once(':').ok_or_else(|| err(key, format!("expected tag:args, got '{v}'")))?;
    Ok(match tag.trim() {
        "const" => Coefficient::Constant(num(key, args.trim())?),
        "sinx" | "cosx" | "sint" => {
            let p = nums(key, args, 3)?;
            let (base, amp, freq) = (p[0], p[1], p[2]);
            match tag.trim() {
                "sinx" => Coefficient::SinX { base, amp, freq },
                "cosx" => Coefficient::CosX { base, amp, freq },
                _ => Coefficient::SinT { base, amp, freq },
            }
        }
        "lint" => {
            let p = nums(key, args, 2)?;
            Coefficient::LinearT { base: p[0], slope: p[1] }
        }
        other => return Err(err(key, format!("unknown coefficient '{other}'"))),
    })
}

fn parse_density(key: &str, v: &str) -> std::result::Result<DensitySpec, CliError> {
    let (tag, args) = v.split_once(':').ok_or_else(|| err(key, format!("expected tag:args, got '{v}'")))?;
    let p = nums(key, args, 2)?;
    match tag.trim() {
        "gaussian" => Ok(DensitySpec::Gaussian { mean: p[0], std: p[1] }),
        "uniform" => Ok(DensitySpec::Uniform { a: p[0], b: p[1] }),
        other => Err(err(key, format!("unknown density '{other}'"))),
    }
}

fn parse_damping(key: &str, v: &str) -> std::result::Result<Damping, CliError> {
    if v == "harmonic" {
        return Ok(Damping::Harmonic);
    }
    match v.split_once(':') {
        Some(("constant", w)) => Ok(Damping::Constant(num(key, w.trim())?)),
        Some(("adaptive", w)) => Ok(Damping::Adaptive(num(key, w.trim())?)),
        _ => Err(err(key, format!("unknown damping '{v}'"))),
    }
}

fn parse_bool(key: &str, v: &str) -> std::result::Result<bool, CliError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got '{v}'"))),
    }
}

/// Splits the text into `key -> value`, rejecting malformed and repeated lines.
pub fn parse_pairs(text: &str) -> std::result::Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| err(&format!("line {}", i + 1), "expected key = value"))?;
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(err(&format!("line {}", i + 1), "empty key"));
        }
        if map.insert(k.to_string(), v.to_string()).is_some() {
            return Err(err(k, "repeated key"));
        }
    }
    Ok(map)
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> std::result::Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| err("<file>", format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> std::result::Result<Self, CliError> {
        let mut c = Self::default();
        for (k, v) in parse_pairs(text)? {
            let (k, v) = (k.as_str(), v.as_str());
            match k {
                "kind" => c.kind = ExperimentKind::parse(v).ok_or_else(|| err(k, format!("unknown kind '{v}'")))?,
                "seed" => c.seed = num(k, v)?,
                "output.dir" => c.output_dir = v.to_string(),
                "grid.x_min" => c.x_min = num(k, v)?,
                "grid.x_max" => c.x_max = num(k, v)?,
                "grid.n_points" => c.n_points = num(k, v)?,
                "noise.horizon" => c.horizon = num(k, v)?,
                "noise.n_steps" => c.n_steps = num(k, v)?,
                "noise.branching" => c.branching = num(k, v)?,
                "noise.beta" => c.beta = num(k, v)?,
                "noise.recombining" => c.recombining = parse_bool(k, v)?,
                "noise.n_list" => c.n_list = usizes(k, v)?,
                "hamiltonian.a" => c.a = parse_coefficient(k, v)?,
                "hamiltonian.b" => c.b = parse_coefficient(k, v)?,
                "hamiltonian.f" => c.f = parse_coefficient(k, v)?,
                "hamiltonian.c0" => c.c0 = num(k, v)?,
                "hamiltonian.lambda" => c.lambda = num(k, v)?,
                "coupling.kappa" => c.kappa = num(k, v)?,
                "coupling.potential_amp" => c.potential_amp = num(k, v)?,
                "coupling.potential_freq" => c.potential_freq = num(k, v)?,
                "coupling.sigma" => c.kernel_sigma = num(k, v)?,
                "coupling.alpha" => c.alpha = Some(num(k, v)?),
                "mfg.terminal" => c.terminal = parse_coefficient(k, v)?,
                "mfg.terminal_kappa" => c.terminal_kappa = num(k, v)?,
                "mfg.m0" => c.m0 = parse_density(k, v)?,
                "mfg.max_iters" => c.max_iters = num(k, v)?,
                "mfg.tol" => c.tol = num(k, v)?,
                "mfg.damping" => c.damping = parse_damping(k, v)?,
                "mfg.init" => {
                    c.init = match v {
                        "decoupled" => Initialization::Decoupled,
                        "frozen" => Initialization::Frozen,
                        _ => return Err(err(k, format!("expected decoupled or frozen, got '{v}'"))),
                    }
                }
                "mfg.cfl" => c.cfl = num(k, v)?,
                "mfg.radius" => c.radius = num(k, v)?,
                "game.players" => c.players = usizes(k, v)?,
                "game.n_mc" => c.n_mc = num(k, v)?,
                "game.euler_dt" => c.euler_dt = num(k, v)?,
                "filippov.particles" => c.particles = num(k, v)?,
                _ => return Err(err(k, "unknown key")),
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Range checks that do not need any computation.
    pub fn validate(&self) -> std::result::Result<(), CliError> {
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(err(key, msg)) };
        check(self.x_max > self.x_min, "grid.x_max", "must exceed grid.x_min")?;
        check(self.n_points >= 3, "grid.n_points", "must be at least 3")?;
        check(self.horizon > 0.0 && self.horizon.is_finite(), "noise.horizon", "must be positive")?;
        check(self.n_steps >= 1, "noise.n_steps", "must be at least 1")?;
        check(matches!(self.branching, 2 | 3), "noise.branching", "must be 2 or 3")?;
        check(self.beta >= 0.0 && self.beta.is_finite(), "noise.beta", "must be nonnegative")?;
        check(self.n_list.iter().all(|&n| n >= 1), "noise.n_list", "entries must be positive")?;
        check(self.c0 > 1.0, "hamiltonian.c0", "must exceed 1")?;
        check(self.lambda >= 0.0, "hamiltonian.lambda", "must be nonnegative")?;
        check(self.kappa >= 0.0, "coupling.kappa", "must be nonnegative")?;
        check(self.kernel_sigma > 0.0, "coupling.sigma", "must be positive")?;
        check(self.alpha.is_none_or(|a| a > 0.0), "coupling.alpha", "must be positive")?;
        check(self.terminal_kappa >= 0.0, "mfg.terminal_kappa", "must be nonnegative")?;
        check(self.max_iters >= 1, "mfg.max_iters", "must be at least 1")?;
        check(self.tol > 0.0, "mfg.tol", "must be positive")?;
        let w = match self.damping {
            Damping::Harmonic => 1.0,
            Damping::Constant(w) | Damping::Adaptive(w) => w,
        };
        check(w > 0.0 && w <= 1.0, "mfg.damping", "weight must lie in (0, 1]")?;
        check(self.cfl > 0.0 && self.cfl <= 1.0, "mfg.cfl", "must lie in (0, 1]")?;
        check(self.radius > 0.0, "mfg.radius", "must be positive")?;
        check(self.players.iter().all(|&n| n >= 2), "game.players", "entries must be at least 2")?;
        check(self.n_mc >= 2, "game.n_mc", "must be at least 2")?;
        check(self.euler_dt > 0.0, "game.euler_dt", "must be positive")?;
        check(self.particles >= 1, "filippov.particles", "must be positive")?;
        Ok(())
    }

    pub fn grid(&self) -> Result<SpatialGrid> {
        SpatialGrid::new(self.x_min, self.x_max, self.n_points)
    }

    pub fn tree(&self, n_steps: usize) -> Result<ScenarioTree> {
        build_tree(self.horizon, n_steps, self.branching, self.beta, self.recombining)
    }

    pub fn hamiltonian(&self) -> Result<QuadraticHamiltonian> {
        QuadraticHamiltonian::new(self.a, self.b, self.f, self.c0, self.lambda)
    }

    fn coupling_f(kappa: f64, amp: f64, freq: f64) -> CouplingF {
        if amp != 0.0 {
            CouplingF::LinearPotential { kappa, amp, freq }
        } else if kappa == 0.0 {
            CouplingF::Zero
        } else {
            CouplingF::Linear { kappa }
        }
    }

    pub fn problem(&self) -> Result<MfgProblem> {
        let g = self.grid()?;
        let f = Self::coupling_f(self.kappa, self.potential_amp, self.potential_freq);
        let coupling = MonotoneCoupling::new(g, f, self.kernel_sigma, self.alpha, self.c0)?;
        let terminal_coupling = if self.terminal_kappa > 0.0 {
            Some(MonotoneCoupling::new(g, CouplingF::Linear { kappa: self.terminal_kappa }, self.kernel_sigma, self.alpha, self.c0)?)
        } else {
            None
        };
        Ok(MfgProblem {
            h: self.hamiltonian()?,
            coupling,
            terminal: TerminalCost { g: self.terminal, coupling: terminal_coupling },
            m0: self.m0.build(g)?,
        })
    }

    pub fn fixed_point(&self) -> FixedPointConfig {
        FixedPointConfig {
            max_iters: self.max_iters,
            tol: self.tol,
            damping: self.damping,
            init: self.init,
            cfl: self.cfl,
            ..Default::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_an_empty_file() {
        let c = ExperimentConfig::parse("# nothing\n\n").unwrap();
        assert_eq!(c, ExperimentConfig::default());
    }

    #[test]
    fn values_are_read_by_dotted_key() {
        let c = ExperimentConfig::parse(
            "kind = bshj\nnoise.beta = 0.25\nhamiltonian.a = sinx:1,0.2,1\nmfg.m0 = uniform:-1,1\nmfg.damping = constant:0.3\nnoise.n_list = 2, 4",
        )
        .unwrap();
        assert_eq!(c.kind, ExperimentKind::Bshj);
        assert_eq!(c.beta, 0.25);
        assert_eq!(c.a, Coefficient::SinX { base: 1.0, amp: 0.2, freq: 1.0 });
        assert_eq!(c.m0, DensitySpec::Uniform { a: -1.0, b: 1.0 });
        assert_eq!(c.damping, Damping::Constant(0.3));
        assert_eq!(c.n_list, vec![2, 4]);
    }

    #[test]
    fn trailing_comments_are_ignored() {
        let c = ExperimentConfig::parse("noise.branching = 3   # trinomial\n  # indented comment\n").unwrap();
        assert_eq!(c.branching, 3);
    }

    #[test]
    fn unknown_key_names_the_key() {
        match ExperimentConfig::parse("grid.spacing = 3") {
            Err(CliError::Config { key, .. }) => assert_eq!(key, "grid.spacing"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_values_name_the_key() {
        for (text, key) in [
            ("noise.beta = -1", "noise.beta"),
            ("hamiltonian.b = tan:1", "hamiltonian.b"),
            ("mfg.m0 = gaussian:0", "mfg.m0"),
            ("noise.branching = 4", "noise.branching"),
            ("seed = x", "seed"),
            ("seed = 1\nseed = 2", "seed"),
        ] {
            match ExperimentConfig::parse(text) {
                Err(CliError::Config { key: k, .. }) => assert_eq!(k, key, "{text}"),
                other => panic!("{text}: unexpected {other:?}"),
            }
        }
    }
}
