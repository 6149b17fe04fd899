//! Property tests for the invariants of each solver module.

use mfg_core::hj::shifted_terminal;
use mfg_core::transport::{mollify, transport_interval};
use mfg_core::*;
use proptest::prelude::*;

fn grid() -> SpatialGrid {
    SpatialGrid::new(-5.0, 5.0, 257).unwrap()
}

/// Normalized mixture of two Gaussians with the given parameters.
fn mixture(g: SpatialGrid, p: (f64, f64, f64, f64, f64)) -> DensityField {
    let (m1, s1, m2, s2, w) = p;
    let v = (0..g.n_points)
        .map(|i| {
            let x = g.x(i);
            w * (-(x - m1).powi(2) / (2.0 * s1 * s1)).exp() / s1 + (1.0 - w) * (-(x - m2).powi(2) / (2.0 * s2 * s2)).exp() / s2
        })
        .collect();
    DensityField::normalized(g, v).unwrap()
}

fn mixture_params() -> impl Strategy<Value = (f64, f64, f64, f64, f64)> {
    (-1.5..1.5f64, 0.2..0.8f64, -1.5..1.5f64, 0.2..0.8f64, 0.0..1.0f64)
}

fn coefficient() -> impl Strategy<Value = Coefficient> {
    prop_oneof![
        (-1.0..1.0f64).prop_map(Coefficient::Constant),
        (-0.5..0.5f64, 0.0..0.4f64, 0.2..2.0f64).prop_map(|(base, amp, freq)| Coefficient::SinX { base, amp, freq }),
        (-0.5..0.5f64, 0.0..0.4f64, 0.2..2.0f64).prop_map(|(base, amp, freq)| Coefficient::CosX { base, amp, freq }),
    ]
}

fn hamiltonian() -> impl Strategy<Value = QuadraticHamiltonian> {
    (0.0..0.4f64, 0.2..2.0f64, coefficient(), coefficient())
        .prop_map(|(amp, freq, b, f)| QuadraticHamiltonian::new(Coefficient::SinX { base: 1.0, amp, freq }, b, f, 2.0, 0.0).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn d1_triangle_inequality(a in mixture_params(), b in mixture_params(), c in mixture_params()) {
        let g = grid();
        let (ma, mb, mc) = (mixture(g, a), mixture(g, b), mixture(g, c));
        let ab = d1_distance(&ma, &mb).unwrap();
        let bc = d1_distance(&mb, &mc).unwrap();
        let ac = d1_distance(&ma, &mc).unwrap();
        prop_assert!(ac <= ab + bc + 1e-9);
    }

    #[test]
    fn shift_round_trip_is_close(p in mixture_params(), c in -1.0..1.0f64) {
        let g = grid();
        let m = mixture(g, p);
        let back = push_forward_shift(&push_forward_shift(&m, c).unwrap(), -c).unwrap();
        prop_assert!(m.l1_distance(&back).unwrap() <= 4.0 * g.h);
    }

    #[test]
    fn norms_ignore_constants(amp in 0.1..2.0f64, freq in 0.2..3.0f64, c in -10.0..10.0f64) {
        let g = grid();
        let u = GridFunction::from_fn(g, |x| amp * (freq * x).sin());
        let v = GridFunction::from_fn(g, |x| amp * (freq * x).sin() + c);
        let (nu, nv) = (norms(&u).unwrap(), norms(&v).unwrap());
        prop_assert!((nu.lip_constant - nv.lip_constant).abs() <= 1e-9 * (1.0 + nu.lip_constant));
        prop_assert!((nu.semiconcavity_constant - nv.semiconcavity_constant).abs() <= 1e-6 * (1.0 + nu.semiconcavity_constant));
        prop_assert!((nv.sup_norm - nu.sup_norm).abs() <= c.abs() + 1e-12);
    }

    #[test]
    fn lipschitz_interpolation_bound(amp in 0.1..2.0f64, freq in 0.7..3.0f64, phase in 0.0..6.3f64) {
        // Bounded semiconcave functions on the line have a controlled slope. The
        // grid sees a full period, so its sup and semiconcavity match the line's.
        let g = grid();
        let u = GridFunction::from_fn(g, |x| amp * (freq * x + phase).cos());
        let n = norms(&u).unwrap();
        let k = n.semiconcavity_constant.max(0.0);
        let bound = 2.0 * (n.sup_norm * k).sqrt() + 2.0 * g.h * k;
        prop_assert!(n.lip_constant <= bound + 1e-12, "{} > {}", n.lip_constant, bound);
    }

    #[test]
    fn fenchel_identity(h in hamiltonian(), alpha in -3.0..3.0f64, q in -5.0..5.0f64, x in -4.0..4.0f64) {
        let (a, b, _) = h.coefficients(x, 0.0, 0.0);
        let l = h.legendre(alpha, x, 0.0, 0.0).unwrap();
        let p = -(alpha + b) / a;
        let kinetic = |p: f64| 0.5 * a * p * p + b * p;
        prop_assert!((l - (-p * alpha - kinetic(p))).abs() <= 1e-12 * (1.0 + l.abs()));
        prop_assert!(-q * alpha - kinetic(q) <= l + 1e-12 * (1.0 + l.abs()));
    }

    #[test]
    fn dp_matches_difference_quotient(h in hamiltonian(), p in -3.0..3.0f64, x in -4.0..4.0f64) {
        let d = 1e-5;
        let fd = (h.eval_h(p + d, x, 0.0, 0.0).0 - h.eval_h(p - d, x, 0.0, 0.0).0) / (2.0 * d);
        prop_assert!((fd - h.eval_h(p, x, 0.0, 0.0).1).abs() <= 1e-8);
    }

    #[test]
    fn hamiltonian_is_convex(h in hamiltonian(), p1 in -3.0..3.0f64, p2 in -3.0..3.0f64, x in -4.0..4.0f64) {
        let v = |p: f64| h.eval_h(p, x, 0.0, 0.0).0;
        prop_assert!(v(0.5 * (p1 + p2)) <= 0.5 * (v(p1) + v(p2)) + 1e-12);
    }

    #[test]
    fn coupling_pairing_is_symmetric_and_nonnegative(a in mixture_params(), b in mixture_params(), sigma in 0.1..0.5f64) {
        let g = grid();
        let c = MonotoneCoupling::new(g, CouplingF::Linear { kappa: 1.0 }, sigma, None, 10.0).unwrap();
        let (m1, m2) = (mixture(g, a), mixture(g, b));
        let p12 = c.monotonicity_gap(&m1, &m2, 0.0, 0.0).unwrap().pairing;
        let p21 = c.monotonicity_gap(&m2, &m1, 0.0, 0.0).unwrap().pairing;
        prop_assert_eq!(p12, p21);
        prop_assert!(p12 >= -1e-12);
    }

    #[test]
    fn transport_conserves_mass(p in mixture_params(), amp in 0.0..1.5f64, freq in 0.3..2.0f64, dt in 0.1..1.0f64) {
        let g = grid();
        let m = mixture(g, p);
        let drift = DriftField::from_fn(g, dt, 3, |x| amp * (freq * x).sin());
        let rec = transport_interval(&m.values, &drift, 1.0).unwrap();
        for s in &rec.snapshots {
            prop_assert!(s.iter().all(|v| *v >= 0.0));
            prop_assert!(g.integrate(s) <= 1.0 + 1e-12);
        }
        prop_assert!((g.integrate(rec.last()) + rec.outflow - 1.0).abs() <= 1e-10);
        prop_assert!(rec.mass_error <= 1e-10);
    }

    #[test]
    fn mollified_field_keeps_one_sided_constant(slope in -2.0..2.0f64, jump in 0.0..2.0f64) {
        // Piecewise linear field with an upward jump at 0: one-sided constant max(-slope, 0).
        let b = move |x: f64| slope * x + if x > 0.0 { jump } else { 0.0 };
        let eps = 0.05;
        let be = mollify(&b, eps);
        let c = (-slope).max(0.0);
        for k in 0..200 {
            let x = -2.0 + 0.02 * k as f64;
            let y = x + 0.013;
            prop_assert!((be(y) - be(x)) * (y - x) >= -c * (y - x) * (y - x) - 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn time_modulus_is_nonincreasing_in_n(amp in 0.0..1.0f64, freq in 0.5..6.0f64, slope in -1.0..1.0f64, r in 0.5..4.0f64) {
        let g = SpatialGrid::new(-5.0, 5.0, 65).unwrap();
        let h = QuadraticHamiltonian::new(
            Coefficient::Constant(1.0),
            Coefficient::SinT { base: 0.0, amp, freq },
            Coefficient::LinearT { base: 0.0, slope },
            2.0,
            0.0,
        )
        .unwrap();
        let spec = hamiltonian::ModulusSpec { grid: &g, horizon: 1.0, beta: 0.0, coupling: None, sample_measures: &[] };
        let tm = time_modulus(&h, &spec, &[2, 4, 8], &[r]);
        let w: Vec<f64> = tm.omega.iter().map(|row| row[0]).collect();
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        prop_assert!(w.windows(2).all(|p| p[1] <= p[0] + 1e-15), "{w:?}");
    }

    #[test]
    fn tree_increments_are_martingale(n in 1usize..6, branching in 2usize..4, beta in 0.0..1.0f64, recombining: bool) {
        let tree = build_tree(1.0, n, branching, beta, recombining).unwrap();
        for node in &tree.nodes {
            if node.children.is_empty() {
                continue;
            }
            let mean: f64 = node.children.iter().map(|&(c, q)| q * tree.nodes[c].w).sum();
            let var: f64 = node.children.iter().map(|&(c, q)| q * (tree.nodes[c].w - node.w).powi(2)).sum();
            let total: f64 = node.children.iter().map(|&(_, q)| q).sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!((mean - node.w).abs() <= 1e-12);
            prop_assert!((var - tree.dt()).abs() <= 1e-12);
        }
        let second: f64 = tree.leaves().iter().map(|&l| tree.nodes[l].prob * tree.nodes[l].w.powi(2)).sum();
        prop_assert!((second - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn bshj_martingale_and_comparison(h in hamiltonian(), beta in 0.0..0.4f64, amp in 0.1..1.0f64, lift in 0.0..0.5f64) {
        let g = grid();
        let tree = build_tree(1.0, 3, 2, beta, true).unwrap();
        let lower = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, |x| amp * (0.7 * x).cos())).unwrap();
        let upper = solve_bshj(&tree, &h, &shifted_terminal(&tree, &g, |x| amp * (0.7 * x).cos() + lift * (-x * x).exp())).unwrap();
        prop_assert!(lower.martingale_defect(&tree) <= 1e-12);
        for node in 0..tree.node_count() {
            prop_assert!(upper.u_plus[node].iter().zip(&lower.u_plus[node]).all(|(a, b)| a >= &(b - 5.0 * g.h)));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn mfg_densities_keep_unit_mass(kappa in 0.0..0.5f64, mean in -1.0..1.0f64, beta in 0.0..0.3f64) {
        let g = grid();
        let p = MfgProblem {
            h: QuadraticHamiltonian::kinetic(),
            coupling: MonotoneCoupling::new(g, CouplingF::Linear { kappa }, 0.3, None, 10.0).unwrap(),
            terminal: TerminalCost::fixed(Coefficient::CosX { base: 0.0, amp: 0.5, freq: 1.0 }),
            m0: DensityField::gaussian(g, mean, 0.5).unwrap(),
        };
        let tree = build_tree(1.0, 2, 2, beta, true).unwrap();
        let cfg = FixedPointConfig { damping: Damping::Adaptive(0.5), ..Default::default() };
        let s = solve_stochastic_mfg(&tree, &p, &cfg).unwrap();
        prop_assert!(s.residual <= cfg.tol);
        for m in &s.m {
            prop_assert!((m.mass() - 1.0).abs() <= 1e-8);
            prop_assert!(m.values.iter().all(|v| *v >= 0.0));
        }
    }
}
