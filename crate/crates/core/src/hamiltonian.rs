//! Hamiltonians of the form `H(p, x) = a(x)/2 p² + B(x) p + f(x)`.
//!
//! Coefficients are named presets evaluated at `x + shift`, where the shift is
//! the Brownian displacement `sqrt(2 beta) W` carried by a tree node. A
//! Hamiltonian frozen at one time and one node is precomputed on the grid.

use crate::coupling::MonotoneCoupling;
use crate::error::{MfgError, Result};
use crate::grid::{DensityField, SpatialGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Coefficient {
    Constant(f64),
    /// `base + amp sin(freq x)`
    SinX { base: f64, amp: f64, freq: f64 },
    /// `base + amp cos(freq x)`
    CosX { base: f64, amp: f64, freq: f64 },
    /// `base + amp sin(freq t)`
    SinT { base: f64, amp: f64, freq: f64 },
    /// `base + slope t`
    LinearT { base: f64, slope: f64 },
}

impl Coefficient {
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        match *self {
            Coefficient::Constant(c) => c,
            Coefficient::SinX { base, amp, freq } => base + amp * (freq * x).sin(),
            Coefficient::CosX { base, amp, freq } => base + amp * (freq * x).cos(),
            Coefficient::SinT { base, amp, freq } => base + amp * (freq * t).sin(),
            Coefficient::LinearT { base, slope } => base + slope * t,
        }
    }

    pub fn dx(&self, x: f64, _t: f64) -> f64 {
        match *self {
            Coefficient::SinX { amp, freq, .. } => amp * freq * (freq * x).cos(),
            Coefficient::CosX { amp, freq, .. } => -amp * freq * (freq * x).sin(),
            _ => 0.0,
        }
    }

    pub fn dxx(&self, x: f64, _t: f64) -> f64 {
        match *self {
            Coefficient::SinX { amp, freq, .. } => -amp * freq * freq * (freq * x).sin(),
            Coefficient::CosX { amp, freq, .. } => -amp * freq * freq * (freq * x).cos(),
            _ => 0.0,
        }
    }

    pub fn depends_on_x(&self) -> bool {
        matches!(self, Coefficient::SinX { .. } | Coefficient::CosX { .. })
    }

    pub fn depends_on_t(&self) -> bool {
        matches!(self, Coefficient::SinT { .. } | Coefficient::LinearT { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticHamiltonian {
    pub a: Coefficient,
    pub b: Coefficient,
    pub f: Coefficient,
    pub c0: f64,
    pub lambda: f64,
}

impl QuadraticHamiltonian {
    pub fn new(a: Coefficient, b: Coefficient, f: Coefficient, c0: f64, lambda: f64) -> Result<Self> {
        if c0 <= 1.0 || !c0.is_finite() {
            return Err(MfgError::InvalidParameter(format!("C0 must exceed 1, got {c0}")));
        }
        if lambda < 0.0 {
            return Err(MfgError::InvalidParameter(format!("lambda must be nonnegative, got {lambda}")));
        }
        Ok(Self { a, b, f, c0, lambda })
    }

    /// `H = p²/2`.
    pub fn kinetic() -> Self {
        Self {
            a: Coefficient::Constant(1.0),
            b: Coefficient::Constant(0.0),
            f: Coefficient::Constant(0.0),
            c0: 2.0,
            lambda: 0.0,
        }
    }

    pub fn is_autonomous(&self) -> bool {
        !(self.a.depends_on_t() || self.b.depends_on_t() || self.f.depends_on_t())
    }

    pub fn depends_on_x(&self) -> bool {
        self.a.depends_on_x() || self.b.depends_on_x() || self.f.depends_on_x()
    }

    #[inline]
    pub fn coefficients(&self, x: f64, t: f64, shift: f64) -> (f64, f64, f64) {
        let y = x + shift;
        (self.a.eval(y, t), self.b.eval(y, t), self.f.eval(y, t))
    }

    /// Value and exact `D_p H` at `(p, x)`, time `t`, node shift `shift`.
    pub fn eval_h(&self, p: f64, x: f64, t: f64, shift: f64) -> (f64, f64) {
        let (a, b, f) = self.coefficients(x, t, shift);
        (0.5 * a * p * p + b * p + f, a * p + b)
    }

    /// `D_x H`.
    pub fn eval_h_dx(&self, p: f64, x: f64, t: f64, shift: f64) -> f64 {
        let y = x + shift;
        0.5 * self.a.dx(y, t) * p * p + self.b.dx(y, t) * p + self.f.dx(y, t)
    }

    /// Kinetic part of the Lagrangian, `(alpha + B)² / (2a)`.
    pub fn legendre(&self, alpha: f64, x: f64, t: f64, shift: f64) -> Result<f64> {
        let (a, b, _) = self.coefficients(x, t, shift);
        if a <= 0.0 {
            return Err(MfgError::StructureViolation(format!("a = {a} at x = {x}")));
        }
        Ok((alpha + b) * (alpha + b) / (2.0 * a))
    }

    /// Full Lagrangian of `H`, including the potential: `legendre - f`.
    pub fn running_cost(&self, alpha: f64, x: f64, t: f64, shift: f64) -> f64 {
        let (a, b, f) = self.coefficients(x, t, shift);
        (alpha + b) * (alpha + b) / (2.0 * a) - f
    }

    /// `D_x` of [`Self::running_cost`].
    pub fn running_cost_dx(&self, alpha: f64, x: f64, t: f64, shift: f64) -> f64 {
        let y = x + shift;
        let a = self.a.eval(y, t);
        let v = alpha + self.b.eval(y, t);
        v * self.b.dx(y, t) / a - v * v * self.a.dx(y, t) / (2.0 * a * a) - self.f.dx(y, t)
    }

    pub fn freeze(&self, grid: &SpatialGrid, t: f64, shift: f64) -> FrozenHamiltonian {
        let n = grid.n_points;
        let mut fr = FrozenHamiltonian {
            a: Vec::with_capacity(n),
            b: Vec::with_capacity(n),
            f: Vec::with_capacity(n),
            a_mid: Vec::with_capacity(n - 1),
            b_mid: Vec::with_capacity(n - 1),
        };
        for i in 0..n {
            let (a, b, f) = self.coefficients(grid.x(i), t, shift);
            fr.a.push(a);
            fr.b.push(b);
            fr.f.push(f);
        }
        for i in 0..n - 1 {
            let (a, b, _) = self.coefficients(grid.midpoint(i), t, shift);
            fr.a_mid.push(a);
            fr.b_mid.push(b);
        }
        fr
    }
}

/// Coefficients sampled at the nodes and cell midpoints for one time and node.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenHamiltonian {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub f: Vec<f64>,
    pub a_mid: Vec<f64>,
    pub b_mid: Vec<f64>,
}

impl FrozenHamiltonian {
    #[inline]
    pub fn h(&self, i: usize, p: f64) -> f64 {
        0.5 * self.a[i] * p * p + self.b[i] * p + self.f[i]
    }

    #[inline]
    pub fn dp(&self, i: usize, p: f64) -> f64 {
        self.a[i] * p + self.b[i]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub a_min: f64,
    pub a_max: f64,
    pub b_sup: f64,
    pub f_sup: f64,
    /// Largest finite-difference first and second x-derivative of a, B, f.
    pub derivative_sup: f64,
    pub h_sup: f64,
    pub dp_sup: f64,
    pub dpx_sup: f64,
    pub dpp_sup: f64,
    /// Infimum of the semiconcavity quadratic form over the samples, with the
    /// optimal q taken in closed form and `z = ±1`.
    pub form_infimum: f64,
    pub bounds_ok: bool,
    pub derivatives_ok: bool,
    pub convex_ok: bool,
    pub form_finite: bool,
}

impl StructureReport {
    pub fn passed(&self) -> bool {
        self.bounds_ok && self.derivatives_ok && self.convex_ok && self.form_finite
    }
}

/// Samples the structure conditions on the grid nodes, the given times and
/// node shifts, and momenta `|p| <= r`.
pub fn check_structure(
    h: &QuadraticHamiltonian,
    grid: &SpatialGrid,
    times: &[f64],
    shifts: &[f64],
    r: f64,
) -> StructureReport {
    let c0 = h.c0;
    let fd = 1e-4;
    let n_p = 21;
    let mut rep = StructureReport {
        a_min: f64::INFINITY,
        a_max: f64::NEG_INFINITY,
        b_sup: 0.0,
        f_sup: 0.0,
        derivative_sup: 0.0,
        h_sup: 0.0,
        dp_sup: 0.0,
        dpx_sup: 0.0,
        dpp_sup: 0.0,
        form_infimum: f64::INFINITY,
        bounds_ok: true,
        derivatives_ok: true,
        convex_ok: true,
        form_finite: true,
    };
    let times = if times.is_empty() { &[0.0][..] } else { times };
    let shifts = if shifts.is_empty() { &[0.0][..] } else { shifts };
    for &t in times {
        for &s in shifts {
            for i in 0..grid.n_points {
                let x = grid.x(i);
                let (a, b, f) = h.coefficients(x, t, s);
                rep.a_min = rep.a_min.min(a);
                rep.a_max = rep.a_max.max(a);
                rep.b_sup = rep.b_sup.max(b.abs());
                rep.f_sup = rep.f_sup.max(f.abs());
                for c in [&h.a, &h.b, &h.f] {
                    let y = x + s;
                    let d1 = (c.eval(y + fd, t) - c.eval(y - fd, t)) / (2.0 * fd);
                    let d2 = (c.eval(y + fd, t) - 2.0 * c.eval(y, t) + c.eval(y - fd, t)) / (fd * fd);
                    rep.derivative_sup = rep.derivative_sup.max(d1.abs()).max(d2.abs());
                }
                let y = x + s;
                let (ax, bx, fx) = (h.a.dx(y, t), h.b.dx(y, t), h.f.dx(y, t));
                let (axx, bxx, fxx) = (h.a.dxx(y, t), h.b.dxx(y, t), h.f.dxx(y, t));
                let _ = fx;
                rep.dpp_sup = rep.dpp_sup.max(a.abs());
                for k in 0..n_p {
                    let p = -r + 2.0 * r * k as f64 / (n_p - 1) as f64;
                    let (val, dp) = h.eval_h(p, x, t, s);
                    rep.h_sup = rep.h_sup.max(val.abs());
                    rep.dp_sup = rep.dp_sup.max(dp.abs());
                    rep.dpx_sup = rep.dpx_sup.max((ax * p + bx).abs());
                    let form = if a > 0.0 {
                        let c = ax * p + bx;
                        h.lambda * (0.5 * a * p * p - f) - c * c / a + 0.5 * axx * p * p + bxx * p + fxx
                    } else {
                        f64::NEG_INFINITY
                    };
                    rep.form_infimum = rep.form_infimum.min(form);
                }
            }
        }
    }
    rep.bounds_ok = rep.a_min >= 1.0 / c0 && rep.a_max <= c0 && rep.b_sup <= c0 && rep.f_sup <= c0;
    rep.derivatives_ok = rep.derivative_sup <= 10.0 * c0;
    rep.convex_ok = rep.a_min > 0.0;
    rep.form_finite = rep.form_infimum.is_finite();
    rep
}

/// Table of time-continuity moduli, indexed by number of epochs and radius.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeModulus {
    pub n_list: Vec<usize>,
    pub r_list: Vec<f64>,
    /// `omega[i][j]` for `n_list[i]` and `r_list[j]`.
    pub omega: Vec<Vec<f64>>,
}

impl TimeModulus {
    pub fn get(&self, n: usize, r: f64) -> Option<f64> {
        let i = self.n_list.iter().position(|&k| k == n)?;
        let j = self.r_list.iter().position(|&q| q == r)?;
        Some(self.omega[i][j])
    }
}

/// Input of [`time_modulus`] beyond the Hamiltonian itself.
pub struct ModulusSpec<'a> {
    pub grid: &'a SpatialGrid,
    pub horizon: f64,
    pub beta: f64,
    pub coupling: Option<&'a MonotoneCoupling>,
    pub sample_measures: &'a [DensityField],
}

/// Sup over `|s - t| <= T/N`, grid points and `|p| <= R` of the coefficient
/// oscillation, plus the coupling oscillation over the sample measures, plus
/// the oscillation induced by one tree increment of the Brownian shift.
pub fn time_modulus(h: &QuadraticHamiltonian, spec: &ModulusSpec, n_list: &[usize], r_list: &[f64]) -> TimeModulus {
    let n_max = n_list.iter().copied().max().unwrap_or(1).max(1);
    let delta = spec.horizon / (16 * n_max) as f64;
    let n_t = 16 * n_max;
    let grid = spec.grid;
    let mut omega = Vec::with_capacity(n_list.len());
    for &n in n_list {
        let max_lag = ((16 * n_max) / n.max(1)).max(1);
        let mut row = Vec::with_capacity(r_list.len());
        for &r in r_list {
            let mut w: f64 = 0.0;
            if !h.is_autonomous() {
                for k in 0..=n_t {
                    let t = k as f64 * delta;
                    for lag in 1..=max_lag {
                        if k + lag > n_t {
                            break;
                        }
                        let s = (k + lag) as f64 * delta;
                        for i in 0..grid.n_points {
                            let x = grid.x(i);
                            let (a1, b1, f1) = h.coefficients(x, t, 0.0);
                            let (a2, b2, f2) = h.coefficients(x, s, 0.0);
                            w = w.max(quad_sup(0.5 * (a2 - a1), b2 - b1, f2 - f1, r));
                        }
                    }
                }
            }
            if let Some(c) = spec.coupling {
                if c.depends_on_t() {
                    for m in spec.sample_measures {
                        for k in 0..=n_t {
                            let t = k as f64 * delta;
                            let ft = c.eval_coupling(m, t, 0.0);
                            for lag in 1..=max_lag {
                                if k + lag > n_t {
                                    break;
                                }
                                let fs = c.eval_coupling(m, (k + lag) as f64 * delta, 0.0);
                                if let (Ok(a), Ok(b)) = (&ft, &fs) {
                                    w = w.max(a.max_abs_diff(b).unwrap_or(0.0));
                                }
                            }
                        }
                    }
                }
            }
            if spec.beta > 0.0 && h.depends_on_x() {
                let step = (2.0 * spec.beta).sqrt() * (spec.horizon / n as f64).sqrt();
                let mut lip: f64 = 0.0;
                for k in 0..=n_t {
                    let t = k as f64 * delta;
                    for i in 0..grid.n_points {
                        let y = grid.x(i);
                        lip = lip.max(quad_sup(0.5 * h.a.dx(y, t), h.b.dx(y, t), h.f.dx(y, t), r));
                    }
                }
                w += lip * step;
            }
            row.push(w);
        }
        omega.push(row);
    }
    TimeModulus { n_list: n_list.to_vec(), r_list: r_list.to_vec(), omega }
}

/// `max_{|p| <= r} |q p² + l p + c|`.
fn quad_sup(q: f64, l: f64, c: f64, r: f64) -> f64 {
    let g = |p: f64| (q * p * p + l * p + c).abs();
    let mut m = g(r).max(g(-r));
    if q != 0.0 {
        let v = -l / (2.0 * q);
        if v.abs() <= r {
            m = m.max(g(v));
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ham(a: Coefficient, b: Coefficient, f: Coefficient) -> QuadraticHamiltonian {
        QuadraticHamiltonian::new(a, b, f, 3.0, 0.0).unwrap()
    }

    #[test]
    fn eval_examples() {
        let h = QuadraticHamiltonian::kinetic();
        assert_eq!(h.eval_h(2.0, 0.3, 0.0, 0.0), (2.0, 2.0));
        let h = ham(Coefficient::Constant(2.0), Coefficient::Constant(1.0), Coefficient::Constant(0.0));
        assert_eq!(h.eval_h(1.0, -4.0, 0.5, 0.0), (2.0, 3.0));
        let h = ham(
            Coefficient::SinX { base: 2.0, amp: 1.0, freq: 1.0 },
            Coefficient::CosX { base: 0.0, amp: 0.5, freq: 2.0 },
            Coefficient::SinX { base: 0.0, amp: 0.3, freq: 1.0 },
        );
        let x = 0.7;
        let (v, dp) = h.eval_h(0.0, x, 0.0, 0.0);
        assert_eq!(v, 0.3 * x.sin());
        assert_eq!(dp, 0.5 * (2.0 * x).cos());
    }

    #[test]
    fn legendre_examples() {
        let h = ham(Coefficient::Constant(2.0), Coefficient::Constant(1.0), Coefficient::Constant(0.0));
        assert_eq!(h.legendre(3.0, 0.0, 0.0, 0.0).unwrap(), 4.0);
        let k = QuadraticHamiltonian::kinetic();
        assert_eq!(k.legendre(0.0, 1.0, 0.0, 0.0).unwrap(), 0.0);
        let bad = QuadraticHamiltonian {
            a: Coefficient::SinX { base: 1.0, amp: 1.0, freq: 1.0 },
            ..QuadraticHamiltonian::kinetic()
        };
        let x = -std::f64::consts::FRAC_PI_2;
        assert!(matches!(bad.legendre(1.0, x, 0.0, 0.0), Err(MfgError::StructureViolation(_))));
    }

    #[test]
    fn fenchel_identity_on_random_samples() {
        let h = ham(
            Coefficient::SinX { base: 2.0, amp: 0.8, freq: 1.3 },
            Coefficient::CosX { base: 0.2, amp: 0.5, freq: 0.7 },
            Coefficient::SinT { base: 0.1, amp: 0.4, freq: 2.0 },
        );
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let p: f64 = rng.random_range(-5.0..5.0);
            let x: f64 = rng.random_range(-5.0..5.0);
            let t: f64 = rng.random_range(0.0..2.0);
            let (val, dp) = h.eval_h(p, x, t, 0.0);
            let (a, _, f) = h.coefficients(x, t, 0.0);
            let l = h.legendre(-dp, x, t, 0.0).unwrap();
            assert!((l - (p * dp - val + f)).abs() < 1e-12 * (1.0 + l.abs()));
            assert!((l - 0.5 * a * p * p).abs() < 1e-12 * (1.0 + l.abs()));
        }
    }

    #[test]
    fn dp_matches_finite_difference() {
        let h = ham(
            Coefficient::SinX { base: 2.0, amp: 0.8, freq: 1.3 },
            Coefficient::CosX { base: 0.2, amp: 0.5, freq: 0.7 },
            Coefficient::Constant(0.3),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 1e-5;
        for _ in 0..200 {
            let p: f64 = rng.random_range(-3.0..3.0);
            let x: f64 = rng.random_range(-5.0..5.0);
            let fd = (h.eval_h(p + d, x, 0.0, 0.0).0 - h.eval_h(p - d, x, 0.0, 0.0).0) / (2.0 * d);
            assert!((fd - h.eval_h(p, x, 0.0, 0.0).1).abs() < 1e-8);
        }
    }

    #[test]
    fn running_cost_dx_matches_finite_difference() {
        let h = ham(
            Coefficient::SinX { base: 2.0, amp: 0.8, freq: 1.3 },
            Coefficient::CosX { base: 0.2, amp: 0.5, freq: 0.7 },
            Coefficient::SinX { base: 0.0, amp: 0.4, freq: 0.9 },
        );
        let d = 1e-6;
        for &(al, x) in &[(0.3, 0.1), (-1.2, 2.0), (2.0, -3.3)] {
            let fd = (h.running_cost(al, x + d, 0.0, 0.0) - h.running_cost(al, x - d, 0.0, 0.0)) / (2.0 * d);
            assert!((fd - h.running_cost_dx(al, x, 0.0, 0.0)).abs() < 1e-7);
        }
    }

    #[test]
    fn structure_constant_case() {
        let g = SpatialGrid::new(-5.0, 5.0, 65).unwrap();
        let rep = check_structure(&QuadraticHamiltonian::kinetic(), &g, &[0.0], &[0.0], 3.0);
        assert!(rep.passed());
        assert_eq!(rep.form_infimum, 0.0);
    }

    #[test]
    fn structure_sinusoidal_a() {
        // Oracle: with B = f = 0 and lambda = 0 the form minimized over q is
        // -(a' p)²/a + a'' p²/2, whose infimum over |p| <= R and x is at
        // |p| = R; evaluated here by brute force on a fine x grid.
        let g = SpatialGrid::new(-5.0, 5.0, 257).unwrap();
        let h = ham(
            Coefficient::SinX { base: 2.0, amp: 1.0, freq: 1.0 },
            Coefficient::Constant(0.0),
            Coefficient::Constant(0.0),
        );
        let r = 2.0;
        let rep = check_structure(&h, &g, &[0.0], &[0.0], r);
        assert!(rep.passed());
        let oracle = g
            .nodes()
            .iter()
            .map(|&x| {
                let a = 2.0 + x.sin();
                -(x.cos() * r).powi(2) / a - 0.5 * x.sin() * r * r
            })
            .fold(f64::INFINITY, f64::min);
        assert!((rep.form_infimum - oracle).abs() < 1e-12);
        assert!(rep.form_infimum > -10.0);
    }

    #[test]
    fn structure_flags_vanishing_a() {
        let g = SpatialGrid::new(-5.0, 5.0, 257).unwrap();
        let h = QuadraticHamiltonian {
            a: Coefficient::SinX { base: 1.0, amp: 1.0, freq: 1.0 },
            ..QuadraticHamiltonian::kinetic()
        };
        let rep = check_structure(&h, &g, &[0.0], &[0.0], 1.0);
        assert!(!rep.bounds_ok);
        assert!(!rep.passed());
    }

    fn modulus(h: &QuadraticHamiltonian, n_list: &[usize]) -> Vec<f64> {
        let g = SpatialGrid::new(-2.0, 2.0, 33).unwrap();
        let spec = ModulusSpec { grid: &g, horizon: 1.0, beta: 0.0, coupling: None, sample_measures: &[] };
        time_modulus(h, &spec, n_list, &[2.0]).omega.iter().map(|r| r[0]).collect()
    }

    #[test]
    fn modulus_autonomous_is_zero() {
        let h = ham(Coefficient::SinX { base: 2.0, amp: 1.0, freq: 1.0 }, Coefficient::Constant(0.5), Coefficient::Constant(0.0));
        assert!(modulus(&h, &[1, 2, 4, 8]).iter().all(|w| *w == 0.0));
    }

    #[test]
    fn modulus_linear_drift_scales_as_inverse_n() {
        // B(t) = t: |H_s - H_t| = |s - t| |p|, so omega = R T / N exactly.
        let h = ham(Coefficient::Constant(1.0), Coefficient::LinearT { base: 0.0, slope: 1.0 }, Coefficient::Constant(0.0));
        let w = modulus(&h, &[1, 2, 4, 8]);
        for (k, n) in [1.0, 2.0, 4.0, 8.0].iter().enumerate() {
            assert!((w[k] - 2.0 / n).abs() < 1e-12, "{w:?}");
        }
    }

    #[test]
    fn modulus_sinusoidal_a_halves() {
        let h = ham(Coefficient::SinT { base: 1.0, amp: 0.5, freq: 1.0 }, Coefficient::Constant(0.0), Coefficient::Constant(0.0));
        let w = modulus(&h, &[2, 4, 8, 16]);
        for k in 0..3 {
            assert!(w[k + 1] <= w[k]);
            let ratio = w[k + 1] / w[k];
            assert!((ratio - 0.5).abs() < 0.05, "ratio {ratio}");
        }
    }
}
