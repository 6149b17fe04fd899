//! Uniform one-dimensional grids, grid functions and probability densities.
//!
//! All integrals use the trapezoidal rule, so the end nodes carry half a cell.
//! Wasserstein-1 distances are computed as the L¹ distance of the cumulative
//! distribution functions, which is exact in one dimension.

use crate::error::{MfgError, Result};

/// Mass tolerance for a valid density.
pub const MASS_TOL: f64 = 1e-10;
/// Mass that may leave the domain before a shift is rejected.
pub const MAX_LEAKAGE: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    pub x_min: f64,
    pub x_max: f64,
    pub n_points: usize,
    pub h: f64,
}

impl SpatialGrid {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self> {
        if n_points < 3 {
            return Err(MfgError::DegenerateGrid(format!("n_points = {n_points} < 3")));
        }
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(MfgError::DegenerateGrid(format!("bad interval [{x_min}, {x_max}]")));
        }
        let h = (x_max - x_min) / (n_points - 1) as f64;
        Ok(Self { x_min, x_max, n_points, h })
    }

    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.h
    }

    /// Midpoint between node `i` and node `i + 1`.
    #[inline]
    pub fn midpoint(&self, i: usize) -> f64 {
        self.x_min + (i as f64 + 0.5) * self.h
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_points).map(|i| self.x(i)).collect()
    }

    /// Trapezoidal quadrature weight of node `i`.
    #[inline]
    pub fn weight(&self, i: usize) -> f64 {
        if i == 0 || i + 1 == self.n_points {
            0.5 * self.h
        } else {
            self.h
        }
    }

    pub fn integrate(&self, values: &[f64]) -> f64 {
        values.iter().enumerate().map(|(i, v)| self.weight(i) * v).sum()
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Cell index and barycentric weight of `x`, clamped to the grid.
    pub fn locate(&self, x: f64) -> (usize, f64) {
        let s = ((x - self.x_min) / self.h).clamp(0.0, (self.n_points - 1) as f64);
        let i = (s.floor() as usize).min(self.n_points - 2);
        (i, s - i as f64)
    }

    /// Piecewise-linear interpolation of node values, constant beyond the ends.
    pub fn interpolate(&self, values: &[f64], x: f64) -> f64 {
        let (i, w) = self.locate(x);
        (1.0 - w) * values[i] + w * values[i + 1]
    }

    /// Derivative of the piecewise-linear interpolant on the cell containing `x`.
    pub fn cell_slope(&self, values: &[f64], x: f64) -> f64 {
        let (i, _) = self.locate(x);
        (values[i + 1] - values[i]) / self.h
    }

    /// Indices of the nodes inside the closed ball of radius `r` around 0.
    pub fn ball(&self, r: f64) -> std::ops::Range<usize> {
        let lo = ((-r - self.x_min) / self.h - 1e-9).ceil().max(0.0) as usize;
        let hi = (((r - self.x_min) / self.h + 1e-9).floor() as usize).min(self.n_points - 1);
        lo..hi + 1
    }

    pub fn same_as(&self, other: &SpatialGrid) -> bool {
        self == other
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_points {
            return Err(MfgError::GridMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(MfgError::InvalidParameter("grid function has non-finite values".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: SpatialGrid, f: impl Fn(f64) -> f64) -> Self {
        let values = (0..grid.n_points).map(|i| f(grid.x(i))).collect();
        Self { grid, values }
    }

    pub fn constant(grid: SpatialGrid, c: f64) -> Self {
        Self { grid, values: vec![c; grid.n_points] }
    }

    pub fn at(&self, x: f64) -> f64 {
        self.grid.interpolate(&self.values, x)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Sup norm restricted to the ball of radius `r`.
    pub fn sup_norm_on(&self, r: f64) -> f64 {
        self.values[self.grid.ball(r)].iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Centered difference in the interior, one-sided at the ends.
    pub fn gradient(&self) -> Vec<f64> {
        let n = self.grid.n_points;
        let h = self.grid.h;
        let v = &self.values;
        (0..n)
            .map(|i| {
                if i == 0 {
                    (v[1] - v[0]) / h
                } else if i == n - 1 {
                    (v[n - 1] - v[n - 2]) / h
                } else {
                    (v[i + 1] - v[i - 1]) / (2.0 * h)
                }
            })
            .collect()
    }

    pub fn max_abs_diff(&self, other: &GridFunction) -> Result<f64> {
        if !self.grid.same_as(&other.grid) {
            return Err(MfgError::GridMismatch);
        }
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Norms {
    pub sup_norm: f64,
    pub lip_constant: f64,
    /// Largest second difference quotient; may be negative.
    pub semiconcavity_constant: f64,
}

pub fn norms(u: &GridFunction) -> Result<Norms> {
    norms_of(&u.grid, &u.values)
}

pub fn norms_of(grid: &SpatialGrid, v: &[f64]) -> Result<Norms> {
    let n = v.len();
    if n < 3 || grid.n_points < 3 {
        return Err(MfgError::DegenerateGrid(format!("{n} values")));
    }
    let h = grid.h;
    let sup_norm = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    let lip_constant = v.windows(2).fold(0.0_f64, |m, w| m.max((w[1] - w[0]).abs() / h));
    let semiconcavity_constant = v
        .windows(3)
        .map(|w| (w[2] - 2.0 * w[1] + w[0]) / (h * h))
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(Norms { sup_norm, lip_constant, semiconcavity_constant })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub grid: SpatialGrid,
    pub values: Vec<f64>,
}

impl DensityField {
    /// Validates nonnegativity and unit mass.
    pub fn new(grid: SpatialGrid, values: Vec<f64>) -> Result<Self> {
        check_values(&grid, &values)?;
        let mass = grid.integrate(&values);
        if (mass - 1.0).abs() > MASS_TOL {
            return Err(MfgError::InvalidDensity(format!("mass {mass} differs from 1")));
        }
        Ok(Self { grid, values })
    }

    /// Rescales nonnegative values to unit mass.
    pub fn normalized(grid: SpatialGrid, mut values: Vec<f64>) -> Result<Self> {
        check_values(&grid, &values)?;
        let mass = grid.integrate(&values);
        if mass <= 0.0 {
            return Err(MfgError::InvalidDensity("zero mass".into()));
        }
        values.iter_mut().for_each(|v| *v /= mass);
        Ok(Self { grid, values })
    }

    /// Uniform law on `[a, b]`, sampled by cell averages so the edges are exact.
    pub fn uniform(grid: SpatialGrid, a: f64, b: f64) -> Result<Self> {
        if b <= a {
            return Err(MfgError::InvalidDensity(format!("empty interval [{a}, {b}]")));
        }
        let h = grid.h;
        let values = (0..grid.n_points)
            .map(|i| {
                let x = grid.x(i);
                let lo = (x - 0.5 * h).max(a);
                let hi = (x + 0.5 * h).min(b);
                (hi - lo).max(0.0) / h / (b - a)
            })
            .collect();
        Self::normalized(grid, values)
    }

    pub fn gaussian(grid: SpatialGrid, mean: f64, std: f64) -> Result<Self> {
        if std <= 0.0 {
            return Err(MfgError::InvalidDensity("nonpositive standard deviation".into()));
        }
        let values = (0..grid.n_points)
            .map(|i| {
                let z = (grid.x(i) - mean) / std;
                (-0.5 * z * z).exp()
            })
            .collect();
        Self::normalized(grid, values)
    }

    pub fn mass(&self) -> f64 {
        self.grid.integrate(&self.values)
    }

    pub fn mean(&self) -> f64 {
        let g = &self.grid;
        self.values.iter().enumerate().map(|(i, v)| g.weight(i) * g.x(i) * v).sum()
    }

    pub fn second_moment(&self) -> f64 {
        let g = &self.grid;
        self.values
            .iter()
            .enumerate()
            .map(|(i, v)| g.weight(i) * g.x(i) * g.x(i) * v)
            .sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.second_moment() - m * m
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(*v))
    }

    /// Cumulative distribution at the nodes (trapezoidal).
    pub fn cdf(&self) -> Vec<f64> {
        let h = self.grid.h;
        let mut out = Vec::with_capacity(self.values.len());
        let mut acc = 0.0;
        out.push(0.0);
        for w in self.values.windows(2) {
            acc += 0.5 * h * (w[0] + w[1]);
            out.push(acc);
        }
        out
    }

    /// Convex combination `(1 - w) self + w other`.
    pub fn blend(&self, other: &DensityField, w: f64) -> Result<DensityField> {
        if !self.grid.same_as(&other.grid) {
            return Err(MfgError::GridMismatch);
        }
        let values = self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (1.0 - w) * a + w * b)
            .collect();
        Ok(DensityField { grid: self.grid, values })
    }

    pub fn l1_distance(&self, other: &DensityField) -> Result<f64> {
        if !self.grid.same_as(&other.grid) {
            return Err(MfgError::GridMismatch);
        }
        let diff: Vec<f64> = self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).collect();
        Ok(self.grid.integrate(&diff))
    }
}

fn check_values(grid: &SpatialGrid, values: &[f64]) -> Result<()> {
    if values.len() != grid.n_points {
        return Err(MfgError::GridMismatch);
    }
    if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(MfgError::InvalidDensity("negative or non-finite value".into()));
    }
    Ok(())
}

/// Wasserstein-1 distance between two densities on the same grid.
pub fn d1_distance(m1: &DensityField, m2: &DensityField) -> Result<f64> {
    if !m1.grid.same_as(&m2.grid) {
        return Err(MfgError::GridMismatch);
    }
    Ok(d1_values(&m1.grid, &m1.values, &m2.values))
}

/// [`d1_distance`] on raw density values.
pub fn d1_values(grid: &SpatialGrid, a: &[f64], b: &[f64]) -> f64 {
    let h = grid.h;
    let (mut ca, mut cb) = (0.0, 0.0);
    let mut prev = 0.0_f64;
    let mut acc = 0.0;
    for i in 1..a.len() {
        ca += 0.5 * h * (a[i - 1] + a[i]);
        cb += 0.5 * h * (b[i - 1] + b[i]);
        let d = (ca - cb).abs();
        acc += 0.5 * h * (prev + d);
        prev = d;
    }
    acc
}

/// Translates `m` by `c` and renormalizes; returns the field and the leaked mass.
pub fn push_forward_shift_with_leak(m: &DensityField, c: f64) -> Result<(DensityField, f64)> {
    let g = m.grid;
    if c == 0.0 {
        return Ok((m.clone(), 0.0));
    }
    let values: Vec<f64> = (0..g.n_points)
        .map(|i| {
            let y = g.x(i) - c;
            if g.contains(y) {
                g.interpolate(&m.values, y)
            } else {
                0.0
            }
        })
        .collect();
    let mass = g.integrate(&values);
    let leak = (1.0 - mass).abs();
    if leak > MAX_LEAKAGE {
        return Err(MfgError::DomainTooSmall(format!("shift by {c} leaks mass {leak:e}")));
    }
    Ok((DensityField::normalized(g, values)?, leak))
}

/// Image of `m` under `x -> x + c`.
pub fn push_forward_shift(m: &DensityField, c: f64) -> Result<DensityField> {
    push_forward_shift_with_leak(m, c).map(|(d, _)| d)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid() -> SpatialGrid {
        SpatialGrid::new(-5.0, 5.0, 257).unwrap()
    }

    #[test]
    fn degenerate_grid_rejected() {
        assert!(matches!(SpatialGrid::new(0.0, 1.0, 2), Err(MfgError::DegenerateGrid(_))));
        assert!(SpatialGrid::new(1.0, 0.0, 5).is_err());
    }

    #[test]
    fn nodes_are_exact() {
        let g = grid();
        assert_eq!(g.h, 10.0 / 256.0);
        assert_eq!(g.x(128), 0.0);
        assert_eq!(g.x(256), 5.0);
    }

    #[test]
    fn norms_of_constant() {
        let u = GridFunction::constant(grid(), -3.0);
        let n = norms(&u).unwrap();
        assert_eq!((n.sup_norm, n.lip_constant, n.semiconcavity_constant), (3.0, 0.0, 0.0));
    }

    #[test]
    fn norms_of_kinks() {
        let g = grid();
        let up = norms(&GridFunction::from_fn(g, f64::abs)).unwrap();
        assert!((up.semiconcavity_constant - 2.0 / g.h).abs() < 1e-9);
        let down = norms(&GridFunction::from_fn(g, |x| -x.abs())).unwrap();
        assert!(down.semiconcavity_constant <= 1e-9);
        assert!((down.lip_constant - 1.0).abs() < 1e-12);
    }

    #[test]
    fn d1_identity_and_translation() {
        let g = grid();
        let a = DensityField::uniform(g, 0.0, 1.0).unwrap();
        assert_eq!(d1_distance(&a, &a).unwrap(), 0.0);
        for c in [0.3, 0.5, 1.25] {
            let b = DensityField::uniform(g, c, 1.0 + c).unwrap();
            let d = d1_distance(&a, &b).unwrap();
            assert!((d - c).abs() <= g.h, "c = {c}, d1 = {d}");
        }
    }

    #[test]
    fn d1_of_two_bumps() {
        // Independent oracle: the CDF of a tent of half-width h centered on a
        // node is exact under the trapezoid rule, so the CDFs differ by one on
        // [h/2, 1 - h/2] up to the smoothed edges. Frozen value: 1.
        let g = grid();
        let tent = |c: f64| {
            let i = ((c - g.x_min) / g.h).round() as usize;
            let mut v = vec![0.0; g.n_points];
            v[i] = 1.0 / g.h;
            DensityField::new(g, v).unwrap()
        };
        let d = d1_distance(&tent(0.0), &tent(1.0)).unwrap();
        let i1 = ((1.0 - g.x_min) / g.h).round() as usize;
        let expected = g.x(i1) - 0.0;
        assert!((d - expected).abs() < 1e-12);
        assert!((d - 1.0).abs() <= 2.0 * g.h);
    }

    #[test]
    fn shift_zero_is_identity() {
        let m = DensityField::gaussian(grid(), 0.0, 0.5).unwrap();
        assert_eq!(push_forward_shift(&m, 0.0).unwrap(), m);
    }

    #[test]
    fn shift_of_gaussian_moves_by_c() {
        let g = grid();
        let m = DensityField::gaussian(g, 0.0, 0.4).unwrap();
        let s = push_forward_shift(&m, 1.0).unwrap();
        let d = d1_distance(&m, &s).unwrap();
        assert!((d - 1.0).abs() <= 2.0 * g.h);
        assert!((s.mean() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn shift_of_uniform() {
        let g = grid();
        let m = DensityField::uniform(g, -1.0, 1.0).unwrap();
        let s = push_forward_shift(&m, 0.5).unwrap();
        let target = DensityField::uniform(g, -0.5, 1.5).unwrap();
        assert!(s.l1_distance(&target).unwrap() <= 2.0 * g.h);
    }

    #[test]
    fn shift_out_of_domain_fails() {
        let g = grid();
        let m = DensityField::uniform(g, 3.0, 4.5).unwrap();
        assert!(matches!(push_forward_shift(&m, 1.0), Err(MfgError::DomainTooSmall(_))));
    }

    #[test]
    fn invalid_density_rejected() {
        let g = grid();
        assert!(DensityField::new(g, vec![1.0; g.n_points]).is_err());
        let mut v = vec![0.0; g.n_points];
        v[3] = -1.0;
        assert!(DensityField::normalized(g, v).is_err());
    }

    #[test]
    fn mismatched_grids() {
        let a = DensityField::uniform(grid(), 0.0, 1.0).unwrap();
        let g2 = SpatialGrid::new(-5.0, 5.0, 129).unwrap();
        let b = DensityField::uniform(g2, 0.0, 1.0).unwrap();
        assert_eq!(d1_distance(&a, &b), Err(MfgError::GridMismatch));
    }

    #[test]
    fn ball_indices() {
        let g = grid();
        let r = g.ball(3.0);
        assert!((g.x(r.start) + 3.0).abs() < g.h && g.x(r.start) >= -3.0);
        assert!(g.x(r.end - 1) <= 3.0 && g.x(r.end - 1) > 3.0 - g.h);
    }
}
