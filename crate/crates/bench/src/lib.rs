//! Shared fixtures for the solver benchmarks in `benches/`.

use mfg_core::*;

pub fn grid() -> SpatialGrid {
    SpatialGrid::new(-5.0, 5.0, 257).expect("valid grid")
}

/// Crowd-averse game with a cosine terminal cost and a Gaussian initial law.
pub fn crowd_problem(kappa: f64) -> MfgProblem {
    let g = grid();
    MfgProblem {
        h: QuadraticHamiltonian::new(
            Coefficient::Constant(1.0),
            Coefficient::Constant(0.0),
            Coefficient::CosX { base: 0.0, amp: 0.2, freq: 1.0 },
            2.0,
            0.0,
        )
        .expect("valid hamiltonian"),
        coupling: MonotoneCoupling::new(g, CouplingF::Linear { kappa }, 0.3, None, 10.0).expect("valid coupling"),
        terminal: TerminalCost::fixed(Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 }),
        m0: DensityField::gaussian(g, 0.0, 0.5).expect("valid density"),
    }
}

pub fn adaptive() -> FixedPointConfig {
    FixedPointConfig { damping: Damping::Adaptive(0.5), ..Default::default() }
}
