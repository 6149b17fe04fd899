//! Nonlocal couplings `F(x, m) = f(., m * rho) * rho` with a truncated Gaussian
//! kernel, and their monotonicity diagnostics.
//!
//! Convolutions use trapezoidal weights on the density and zero padding
//! outside the grid. Because the kernel is even, the discrete convolution is
//! self-adjoint and the pairing identity
//! `∫ (F(m1) - F(m2)) (m1 - m2) = ∫ (f(s1) - f(s2)) (s1 - s2)` holds exactly.

use crate::error::{MfgError, Result};
use crate::grid::{d1_distance, DensityField, GridFunction, SpatialGrid};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CouplingF {
    Zero,
    /// `kappa s`
    Linear { kappa: f64 },
    /// `kappa s + amp cos(freq x)`
    LinearPotential { kappa: f64, amp: f64, freq: f64 },
}

impl CouplingF {
    #[inline]
    pub fn eval(&self, x: f64, _t: f64, s: f64) -> f64 {
        match *self {
            CouplingF::Zero => 0.0,
            CouplingF::Linear { kappa } => kappa * s,
            CouplingF::LinearPotential { kappa, amp, freq } => kappa * s + amp * (freq * x).cos(),
        }
    }

    /// Bounds of `∂f/∂s`.
    pub fn slope_bounds(&self) -> (f64, f64) {
        match *self {
            CouplingF::Zero => (0.0, 0.0),
            CouplingF::Linear { kappa } | CouplingF::LinearPotential { kappa, .. } => (kappa, kappa),
        }
    }

    /// Bound of `|f(x, s)|` for `0 <= s <= s_max`.
    pub fn sup_bound(&self, s_max: f64) -> f64 {
        match *self {
            CouplingF::Zero => 0.0,
            CouplingF::Linear { kappa } => kappa.abs() * s_max,
            CouplingF::LinearPotential { kappa, amp, .. } => kappa.abs() * s_max + amp.abs(),
        }
    }

    pub fn is_zero(&self) -> bool {
        matches!(self, CouplingF::Zero)
    }
}

/// Truncated Gaussian of width `sigma` cut at `4 sigma`, sampled on grid offsets.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    pub sigma: f64,
    pub half_width: usize,
    /// Values at offsets `-half_width..=half_width`, with `h Σ w = 1`.
    pub weights: Vec<f64>,
}

impl Kernel {
    pub fn gaussian(grid: &SpatialGrid, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(MfgError::InvalidParameter(format!("kernel width {sigma}")));
        }
        let half_width = (4.0 * sigma / grid.h).floor() as usize;
        let support = 2 * half_width + 1;
        if support > grid.n_points {
            return Err(MfgError::KernelTooWide { support, n_points: grid.n_points });
        }
        let mut weights: Vec<f64> = (0..support)
            .map(|k| {
                let z = (k as f64 - half_width as f64) * grid.h / sigma;
                (-0.5 * z * z).exp()
            })
            .collect();
        let mass: f64 = weights.iter().sum::<f64>() * grid.h;
        weights.iter_mut().for_each(|w| *w /= mass);
        Ok(Self { sigma, half_width, weights })
    }

    #[inline]
    pub fn at_offset(&self, d: isize) -> f64 {
        let j = d + self.half_width as isize;
        if j < 0 || j as usize >= self.weights.len() {
            0.0
        } else {
            self.weights[j as usize]
        }
    }

    /// Kernel value at an arbitrary displacement, by linear interpolation.
    pub fn at(&self, dx: f64, h: f64) -> f64 {
        let s = dx / h + self.half_width as f64;
        if s < 0.0 || s > (self.weights.len() - 1) as f64 {
            return 0.0;
        }
        let i = (s.floor() as usize).min(self.weights.len() - 2);
        let w = s - i as f64;
        (1.0 - w) * self.weights[i] + w * self.weights[i + 1]
    }

    pub fn sup(&self) -> f64 {
        self.weights.iter().fold(0.0, |m, w| m.max(*w))
    }

    /// Discrete total variation, the L¹ norm of the derivative.
    pub fn total_variation(&self) -> f64 {
        self.weights.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>() + self.weights[0] + self.weights[self.weights.len() - 1]
    }

    /// Lipschitz constant of `rho * rho` on the grid.
    pub fn self_convolution_lip(&self, h: f64) -> f64 {
        let n = self.weights.len();
        let mut rr = vec![0.0; 2 * n - 1];
        for i in 0..n {
            for j in 0..n {
                rr[i + j] += h * self.weights[i] * self.weights[j];
            }
        }
        rr.windows(2).fold(0.0, |m, w| m.max((w[1] - w[0]).abs() / h))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneCoupling {
    pub grid: SpatialGrid,
    pub f: CouplingF,
    pub kernel: Kernel,
    /// Target strong monotonicity constant.
    pub alpha: f64,
    pub c0: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MonotonicityGap {
    pub pairing: f64,
    pub l2sq: f64,
    /// `pairing / l2sq`, or infinity when `l2sq` vanishes.
    pub ratio: f64,
}

impl MonotoneCoupling {
    /// `alpha = None` selects the constant from the convolution chain.
    pub fn new(grid: SpatialGrid, f: CouplingF, sigma: f64, alpha: Option<f64>, c0: f64) -> Result<Self> {
        let kernel = Kernel::gaussian(&grid, sigma)?;
        let mut c = Self { grid, f, kernel, alpha: 0.0, c0 };
        c.alpha = alpha.unwrap_or_else(|| c.chain_constant());
        if c.alpha < 0.0 {
            return Err(MfgError::InvalidParameter(format!("alpha = {}", c.alpha)));
        }
        Ok(c)
    }

    pub fn zero(grid: SpatialGrid) -> Self {
        let kernel = Kernel { sigma: 0.0, half_width: 0, weights: vec![1.0 / grid.h] };
        Self { grid, f: CouplingF::Zero, kernel, alpha: 0.0, c0: 0.0 }
    }

    pub fn is_zero(&self) -> bool {
        self.f.is_zero()
    }

    pub fn depends_on_t(&self) -> bool {
        false
    }

    /// `alpha_slope`: the largest `a <= 1` with `a <= ∂f/∂s <= 1/a`.
    pub fn alpha_slope(&self) -> f64 {
        let (lo, hi) = self.f.slope_bounds();
        if lo <= 0.0 {
            return 0.0;
        }
        lo.min(1.0 / hi).min(1.0)
    }

    /// `alpha_slope³ / max(|rho|∞, 1)²`.
    pub fn chain_constant(&self) -> f64 {
        let s = self.kernel.sup().max(1.0);
        self.alpha_slope().powi(3) / (s * s)
    }

    /// Bound on `|D_x F|` over all probability measures.
    pub fn lipschitz_bound(&self) -> f64 {
        self.f.sup_bound(self.kernel.sup()) * self.kernel.total_variation()
    }

    /// Constant `C` with `|F(m1) - F(m2)|∞ <= C d1(m1, m2)^{1/3}`, from the
    /// 1-D interpolation inequality `|g|∞³ <= 3/2 |g'|∞ |g|₂²`.
    pub fn holder_constant(&self) -> f64 {
        let a = self.chain_constant();
        if a <= 0.0 {
            return f64::INFINITY;
        }
        let l = self.lipschitz_bound();
        (6.0 * l * l / a).cbrt()
    }

    /// `(m * rho)` at the nodes.
    pub fn smooth(&self, m: &[f64]) -> Vec<f64> {
        let g = &self.grid;
        let n = g.n_points;
        let j = self.kernel.half_width as isize;
        (0..n)
            .map(|i| {
                let lo = (i as isize - j).max(0) as usize;
                let hi = ((i as isize + j) as usize).min(n - 1);
                (lo..=hi)
                    .map(|k| g.weight(k) * m[k] * self.kernel.at_offset(i as isize - k as isize))
                    .sum()
            })
            .collect()
    }

    /// Coupling values at the nodes for raw density values.
    pub fn eval_values(&self, m: &[f64], t: f64, shift: f64) -> Vec<f64> {
        if self.is_zero() {
            return vec![0.0; self.grid.n_points];
        }
        let g = &self.grid;
        let s = self.smooth(m);
        let fv: Vec<f64> = (0..g.n_points).map(|k| self.f.eval(g.x(k) + shift, t, s[k])).collect();
        self.smooth(&fv)
    }

    pub fn eval_coupling(&self, m: &DensityField, t: f64, shift: f64) -> Result<GridFunction> {
        if !m.grid.same_as(&self.grid) {
            return Err(MfgError::GridMismatch);
        }
        GridFunction::new(self.grid, self.eval_values(&m.values, t, shift))
    }

    pub fn monotonicity_gap(&self, m1: &DensityField, m2: &DensityField, t: f64, shift: f64) -> Result<MonotonicityGap> {
        let f1 = self.eval_coupling(m1, t, shift)?;
        let f2 = self.eval_coupling(m2, t, shift)?;
        let g = &self.grid;
        let mut pairing = 0.0;
        let mut l2sq = 0.0;
        for i in 0..g.n_points {
            let df = f1.values[i] - f2.values[i];
            pairing += g.weight(i) * df * (m1.values[i] - m2.values[i]);
            l2sq += g.weight(i) * df * df;
        }
        let ratio = if l2sq > 1e-14 { pairing / l2sq } else { f64::INFINITY };
        Ok(MonotonicityGap { pairing, l2sq, ratio })
    }

    /// `(|F(m1) - F(m2)|∞, C d1^{1/3})`.
    pub fn holder_in_m(&self, m1: &DensityField, m2: &DensityField, t: f64, shift: f64) -> Result<(f64, f64)> {
        let f1 = self.eval_coupling(m1, t, shift)?;
        let f2 = self.eval_coupling(m2, t, shift)?;
        let sup_diff = f1.max_abs_diff(&f2)?;
        let d1 = d1_distance(m1, m2)?;
        Ok((sup_diff, self.holder_constant() * d1.cbrt()))
    }
}
