use cml_core::bvdiag::{absolute_value, lipschitz_multiply, total_mass_norm, variation, GridDensity2};
use cml_core::lattice::{apply_coupling, step, Coupling, LatticeConfig, LatticeState};
use cml_core::observable::{birkhoff_sum, Observable};
use cml_core::sitemap::{transfer_apply, PCDensity, SiteMap};
use cml_core::spectral::{build_ulam, lambda_curve, UlamBuild, DEFAULT_FD_STEP};
use cml_core::Complex64;
use proptest::prelude::*;

fn density() -> impl Strategy<Value = PCDensity> {
    (1usize..40).prop_flat_map(|m| {
        prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), m)
            .prop_map(|v| PCDensity::on_uniform(v.into_iter().map(|(a, b)| Complex64::new(a, b)).collect()))
    })
}

fn uneven_density() -> impl Strategy<Value = PCDensity> {
    (2usize..20).prop_flat_map(|m| {
        (
            prop::collection::vec(0.01f64..1.0, m),
            prop::collection::vec(-3.0f64..3.0, m),
        )
            .prop_map(|(w, v)| {
                let total: f64 = w.iter().sum();
                let mut grid = vec![0.0];
                let mut acc = 0.0;
                for x in &w[..w.len() - 1] {
                    acc += x / total;
                    grid.push(acc);
                }
                grid.push(1.0);
                PCDensity::new(grid, v.into_iter().map(|x| Complex64::new(x, 0.0)).collect()).unwrap()
            })
    })
}

fn aligned_real_density(multiple: usize) -> impl Strategy<Value = PCDensity> {
    (1usize..30).prop_flat_map(move |k| {
        prop::collection::vec(-2.0f64..2.0, k * multiple).prop_map(|v| PCDensity::from_real(&v))
    })
}

fn sites(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn modulus_does_not_increase_variation(d in density()) {
        prop_assert!(variation(&absolute_value(&d)) <= variation(&d) + 1e-12);
    }

    #[test]
    fn mass_norm_is_at_most_half_variation(d in density()) {
        prop_assert!(total_mass_norm(&d) <= 0.5 * variation(&d) + 1e-12);
    }

    #[test]
    fn mass_norm_bound_on_uneven_grids(d in uneven_density()) {
        prop_assert!(total_mass_norm(&d) <= 0.5 * variation(&d) + 1e-12);
    }

    #[test]
    fn lipschitz_multiplier_bound(d in density(), a in -2.0f64..2.0, b in -2.0f64..2.0, w in 0.1f64..30.0) {
        let u: Vec<f64> = (0..d.cells()).map(|j| a + b * (w * d.center(j)).cos()).collect();
        let (ud, bound) = lipschitz_multiply(&d, &u, b.abs() * w);
        prop_assert!(variation(&ud) <= bound + 1e-12, "{} > {}", variation(&ud), bound);
    }

    #[test]
    fn variation_is_a_seminorm(d in density(), re in -4.0f64..4.0, im in -4.0f64..4.0, shift in -3.0f64..3.0) {
        let c = Complex64::new(re, im);
        let mut scaled = d.clone();
        scaled.values_mut().iter_mut().for_each(|v| *v *= c);
        prop_assert!((variation(&scaled) - c.norm() * variation(&d)).abs() <= 1e-10 * (1.0 + variation(&d)));
        let mut other = d.clone();
        other.values_mut().iter_mut().enumerate().for_each(|(j, v)| *v = Complex64::new(shift * j as f64, 1.0) - *v * 0.5);
        let mut sum = d.clone();
        sum.values_mut().iter_mut().zip(other.values()).for_each(|(v, o)| *v += o);
        prop_assert!(variation(&sum) <= variation(&d) + variation(&other) + 1e-10);
    }

    #[test]
    fn grid2_variation_bounds_mass(v in prop::collection::vec(-3.0f64..3.0, 36)) {
        let g = GridDensity2::from_real(6, 6, &v);
        prop_assert!(g.total_mass_norm() <= 0.5 * g.variation() + 1e-12);
        for axis in 0..2 {
            prop_assert!(variation(&g.marginal(axis)) <= g.axis_variation(axis) + 1e-12);
        }
    }

    #[test]
    fn transfer_conserves_mass(d in aligned_real_density(3)) {
        let pd = transfer_apply(&SiteMap::zigzag3(), &d).unwrap();
        prop_assert!((pd.mass() - d.mass()).norm() <= 1e-12);
    }

    #[test]
    fn transfer_conserves_mass_zigzag5(d in aligned_real_density(5)) {
        let pd = transfer_apply(&SiteMap::zigzag(5), &d).unwrap();
        prop_assert!((pd.mass() - d.mass()).norm() <= 1e-12);
    }

    #[test]
    fn transfer_preserves_positivity(v in prop::collection::vec(0.0f64..4.0, 27)) {
        let pd = transfer_apply(&SiteMap::zigzag3(), &PCDensity::from_real(&v)).unwrap();
        prop_assert!(pd.values().iter().all(|x| x.re >= 0.0 && x.im == 0.0));
    }

    // ∫ (P d) φ = ∫ d (φ ∘ τ); the right side by composite midpoint quadrature
    // on a grid fine enough that φ ∘ τ is constant on every subcell.
    #[test]
    fn transfer_is_dual_to_composition(d in aligned_real_density(3), seed_phi in prop::collection::vec(-1.0f64..1.0, 243)) {
        let map = SiteMap::zigzag3();
        let m = d.cells();
        let phi: Vec<f64> = seed_phi[..m].to_vec();
        let pd = transfer_apply(&map, &d).unwrap();
        let lhs: f64 = (0..m).map(|j| pd.values()[j].re * phi[j] * pd.width(j)).sum();
        let sub = 6;
        let h = 1.0 / (m * sub) as f64;
        let rhs: f64 = (0..m * sub)
            .map(|q| {
                let x = (q as f64 + 0.5) * h;
                let y = map.apply(x);
                d.value_at(x).re * phi[((y * m as f64) as usize).min(m - 1)] * h
            })
            .sum();
        prop_assert!((lhs - rhs).abs() <= 1e-10, "{lhs} vs {rhs}");
    }

    #[test]
    fn diffusive_coupling_preserves_mean(x in sites(24), eps in 0.0f64..0.05) {
        let cfg = LatticeConfig::new(1, 24, SiteMap::zigzag3(), Coupling::Diffusive, eps, 1).unwrap();
        let y = apply_coupling(&cfg, &LatticeState::new(x.clone()).unwrap());
        let (a, b): (f64, f64) = (x.iter().sum(), y.sites().iter().sum());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn diffusive_coupling_preserves_mean_2d(x in sites(36), eps in 0.0f64..0.05) {
        let cfg = LatticeConfig::new(2, 6, SiteMap::zigzag3(), Coupling::Diffusive, eps, 1).unwrap();
        let y = apply_coupling(&cfg, &LatticeState::new(x.clone()).unwrap());
        let (a, b): (f64, f64) = (x.iter().sum(), y.sites().iter().sum());
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn step_commutes_with_translations(x in sites(36), s0 in -6i64..6, s1 in -6i64..6, eps in 0.0f64..0.05) {
        let cfg = LatticeConfig::new(2, 6, SiteMap::zigzag3(), Coupling::Diffusive, eps, 1).unwrap();
        let s = LatticeState::new(x).unwrap();
        let a = step(&cfg, &s).translated(cfg.torus(), &[s0, s1]);
        let b = step(&cfg, &s.translated(cfg.torus(), &[s0, s1]));
        prop_assert_eq!(a.sites(), b.sites());
    }

    #[test]
    fn step_is_pure(x in sites(16), eps in 0.0f64..0.05) {
        let cfg = LatticeConfig::diffusive(16, SiteMap::zigzag3(), eps).unwrap();
        let s = LatticeState::new(x).unwrap();
        let (a, b) = (step(&cfg, &s), step(&cfg, &s));
        prop_assert_eq!(a.sites(), b.sites());
    }

    #[test]
    fn birkhoff_sums_are_additive(x in sites(8), n in 1usize..200, m in 1usize..200) {
        let cfg = LatticeConfig::diffusive(8, SiteMap::zigzag3(), 0.02).unwrap();
        let f = Observable::product(&cfg, &[0], &[1]).with_offset(0.25);
        let s = LatticeState::new(x).unwrap();
        let mut tn = s.clone();
        for _ in 0..n {
            tn = step(&cfg, &tn);
        }
        let lhs = birkhoff_sum(&f, &cfg, &s, n + m);
        let rhs = birkhoff_sum(&f, &cfg, &s, n) + birkhoff_sum(&f, &cfg, &tn, m);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (n + m) as f64);
    }

    #[test]
    fn coboundary_sums_stay_bounded(x in sites(8), n in 1usize..2000) {
        let cfg = LatticeConfig::diffusive(8, SiteMap::zigzag3(), 0.03).unwrap();
        let u = Observable::cos_coordinate(&cfg, &[2]);
        let f = Observable::coboundary(&u, &cfg);
        let s = birkhoff_sum(&f, &cfg, &LatticeState::new(x).unwrap(), n);
        prop_assert!(s.abs() <= 2.0 + 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn monte_carlo_ulam_is_column_stochastic(eps in 0.0f64..0.05, n in 2usize..12, seed in 0u64..1000) {
        let cfg = LatticeConfig::diffusive(5, SiteMap::zigzag3(), eps).unwrap();
        let op = build_ulam(&cfg, 1, n, UlamBuild::MonteCarlo { samples_per_cell: 40, seed }).unwrap();
        for j in 0..op.dim() {
            let col: Vec<(usize, f64)> = op.column(j).collect();
            prop_assert!(col.iter().all(|e| e.1 > 0.0));
            prop_assert!((col.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn twisted_eigenvalue_is_subunitary_and_symmetric(eps in 0.0f64..0.05, tmax in 0.5f64..3.0) {
        let cfg = LatticeConfig::diffusive(5, SiteMap::zigzag3(), eps).unwrap();
        let op = build_ulam(&cfg, 1, 27, UlamBuild::MonteCarlo { samples_per_cell: 200, seed: 4 }).unwrap();
        let f = op.center_observable(&Observable::coordinate(&cfg, &[0]), 1e-14).unwrap();
        let grid: Vec<f64> = (-8..=8).map(|i| tmax * i as f64 / 8.0).collect();
        let curve = lambda_curve(&op, &f, &grid, DEFAULT_FD_STEP, 1e-12).unwrap();
        for (i, l) in curve.lambda.iter().enumerate() {
            prop_assert!(l.norm() <= 1.0 + 1e-6);
            let mirror = curve.lambda[grid.len() - 1 - i];
            prop_assert!((mirror - l.conj()).norm() <= 1e-8);
        }
    }
}
