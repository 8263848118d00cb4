//! Property tests for the structural invariants.

use proptest::prelude::*;

use nalgebra::{DMatrix, DVector};
use rkb_core::config::{build_from_doc, ConfigDoc};
use rkb_core::gexp::{concave_dual, GeneratorSpec};
use rkb_core::mmse::{dual_objective, FiniteConvexOperator, FiniteSpace, Partition};
use rkb_core::model::{ModelCoefficients, TimeGrid, TimeVarying};
use rkb_core::opt::project_simplex;
use rkb_core::sim::{mixture_theta, simulate_paths, ThetaPath};

fn scalar_config(
    b: f64,
    q: f64,
    r: f64,
    x0: f64,
    horizon: f64,
    steps: usize,
    mu: f64,
) -> String {
    format!(
        "n = 1\nm = 1\nB = {b}\nH = 1.0\nb = 0.0\nh = 0.0\nQ = {q}\nR = {r}\nx0 = {x0}\nT = {horizon}\nN = {steps}\nmu = {mu}\nepsilon = 0.5\n"
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn config_parse_serialize_round_trips(
        b in -2.0f64..2.0,
        q in 0.1f64..3.0,
        r in 0.5f64..3.0,
        x0 in -1.0f64..1.0,
        horizon in 0.5f64..2.0,
        steps in 2usize..64,
        mu in 0.0f64..1.0,
    ) {
        let text = scalar_config(b, q, r, x0, horizon, steps, mu);
        let doc = ConfigDoc::parse(&text).unwrap();
        let round = ConfigDoc::parse(&doc.to_toml_string().unwrap()).unwrap();
        prop_assert_eq!(&doc, &round);
        let (model_a, grid_a, ..) = build_from_doc(&doc).unwrap();
        let (model_b, grid_b, ..) = build_from_doc(&round).unwrap();
        prop_assert_eq!(model_a, model_b);
        prop_assert_eq!(grid_a, grid_b);
    }

    #[test]
    fn simplex_projection_is_feasible_and_idempotent(v in proptest::collection::vec(-5.0f64..5.0, 1..8)) {
        let p = project_simplex(&v);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let pp = project_simplex(&p);
        for (a, b) in p.iter().zip(&pp) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn grid_time_and_index_are_inverse(steps in 2usize..2000, horizon in 0.1f64..10.0, k_frac in 0.0f64..1.0) {
        let grid = TimeGrid::new(horizon, steps).unwrap();
        let k = ((steps as f64) * k_frac) as usize;
        prop_assert_eq!(grid.index_at(grid.time(k)), Some(k));
    }

    #[test]
    fn hyperbolic_dual_midpoint_concavity(
        kappa in 0.2f64..2.0,
        a1 in -0.5f64..0.5,
        a2 in -0.5f64..0.5,
        b1 in -0.5f64..0.5,
        b2 in -0.5f64..0.5,
    ) {
        let dual = concave_dual(&GeneratorSpec::hyperbolic(kappa, 1, 1), 33);
        let scale = 0.9 * kappa / (2.0f64).sqrt() / 0.5;
        let (a1, a2, b1, b2) = (a1 * scale, a2 * scale, b1 * scale, b2 * scale);
        let mid = dual.value(0.0, &[(a1 + b1) / 2.0], &[(a2 + b2) / 2.0]);
        let avg = 0.5 * (dual.value(0.0, &[a1], &[a2]) + dual.value(0.0, &[b1], &[b2]));
        prop_assert!(mid >= avg - 1e-12);
    }

    #[test]
    fn generator_spot_checks_pass_for_builtins(kappa in 0.0f64..3.0, seed in 0u64..1000) {
        for gen in [
            GeneratorSpec::zero(1, 1),
            GeneratorSpec::scaled_norm(kappa, 1, 1),
            GeneratorSpec::hyperbolic(kappa, 1, 1),
        ] {
            prop_assert!(gen.spot_check(seed, 64).is_empty());
        }
    }
}

fn small_operator(
    prob: &[f64],
    raw_densities: &[Vec<f64>],
    raw_penalties: &[f64],
) -> FiniteConvexOperator {
    let total: f64 = prob.iter().sum();
    let prob: Vec<f64> = prob.iter().map(|p| p / total).collect();
    let space = FiniteSpace::new(prob.clone()).unwrap();
    let densities: Vec<Vec<f64>> = raw_densities
        .iter()
        .map(|raw| {
            let mean: f64 = raw.iter().zip(&prob).map(|(f, p)| f * p).sum();
            raw.iter().map(|f| f / mean).collect()
        })
        .collect();
    let min = raw_penalties.iter().cloned().fold(f64::INFINITY, f64::min);
    let penalties: Vec<f64> = raw_penalties.iter().map(|a| a - min).collect();
    FiniteConvexOperator::new(space, densities, penalties, 2.0).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn rho_is_monotone_translation_invariant_and_convex(
        prob in proptest::collection::vec(0.1f64..1.0, 4),
        d2 in proptest::collection::vec(0.05f64..3.0, 4),
        a2 in 0.0f64..0.5,
        xi in proptest::collection::vec(-2.0f64..2.0, 4),
        bump in proptest::collection::vec(0.0f64..1.5, 4),
        c in -2.0f64..2.0,
        lambda in 0.0f64..1.0,
        zeta in proptest::collection::vec(-2.0f64..2.0, 4),
    ) {
        let op = small_operator(&prob, &[vec![1.0; 4], d2], &[0.0, a2]);
        let rho_xi = op.rho_eval(&xi).unwrap();

        // monotonicity
        let larger: Vec<f64> = xi.iter().zip(&bump).map(|(x, b)| x + b).collect();
        prop_assert!(op.rho_eval(&larger).unwrap() >= rho_xi - 1e-12);

        // constant invariance
        let shifted: Vec<f64> = xi.iter().map(|x| x + c).collect();
        prop_assert!((op.rho_eval(&shifted).unwrap() - (rho_xi + c)).abs() < 1e-10);

        // convexity
        let mixed: Vec<f64> = xi
            .iter()
            .zip(&zeta)
            .map(|(x, z)| lambda * x + (1.0 - lambda) * z)
            .collect();
        let rhs = lambda * rho_xi + (1.0 - lambda) * op.rho_eval(&zeta).unwrap();
        prop_assert!(op.rho_eval(&mixed).unwrap() <= rhs + 1e-10);
    }

    #[test]
    fn mmse_dual_objective_is_midpoint_concave(
        prob in proptest::collection::vec(0.1f64..1.0, 4),
        d2 in proptest::collection::vec(0.05f64..3.0, 4),
        d3 in proptest::collection::vec(0.05f64..3.0, 4),
        a2 in 0.0f64..0.5,
        a3 in 0.0f64..0.5,
        xi in proptest::collection::vec(-2.0f64..2.0, 4),
        la in proptest::collection::vec(0.01f64..1.0, 3),
        lb in proptest::collection::vec(0.01f64..1.0, 3),
    ) {
        let op = small_operator(&prob, &[vec![1.0; 4], d2, d3], &[0.0, a2, a3]);
        let partition = Partition::from_labels(&[0, 0, 1, 1]).unwrap();
        let norm = |v: &[f64]| -> Vec<f64> {
            let s: f64 = v.iter().sum();
            v.iter().map(|x| x / s).collect()
        };
        let la = norm(&la);
        let lb = norm(&lb);
        let mid: Vec<f64> = la.iter().zip(&lb).map(|(a, b)| 0.5 * (a + b)).collect();
        let h_mid = dual_objective(&op, &xi, &partition, &mid);
        let h_avg = 0.5
            * (dual_objective(&op, &xi, &partition, &la)
                + dual_objective(&op, &xi, &partition, &lb));
        prop_assert!(h_mid >= h_avg - 1e-10);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mixture_theta_respects_the_shared_bound(
        a1 in -0.5f64..0.5,
        a2 in -0.5f64..0.5,
        b1 in -0.5f64..0.5,
        b2 in -0.5f64..0.5,
        lambda in 0.05f64..0.95,
        seed in 0u64..50,
    ) {
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let model = ModelCoefficients::new(
            &grid,
            TimeVarying::Constant(DMatrix::from_element(1, 1, 0.0)),
            TimeVarying::Constant(DMatrix::from_element(1, 1, 1.0)),
            TimeVarying::Constant(DVector::zeros(1)),
            TimeVarying::Constant(DVector::zeros(1)),
            TimeVarying::Constant(DMatrix::from_element(1, 1, 1.0)),
            TimeVarying::Constant(DMatrix::from_element(1, 1, 1.0)),
            DVector::zeros(1),
        )
        .unwrap();
        let batch = simulate_paths(&model, &grid, &ThetaPath::zero(1, 1), 16, seed, 0.0).unwrap();
        let ta = ThetaPath::constant(vec![a1], vec![a2]);
        let tb = ThetaPath::constant(vec![b1], vec![b2]);
        let bound = a1.abs().max(a2.abs()).max(b1.abs()).max(b2.abs());
        let mix = mixture_theta(&ta, &tb, lambda, &batch).unwrap();
        for pt in &mix.per_path {
            for v in pt.theta1.iter().chain(&pt.theta2) {
                prop_assert!(v.abs() <= bound + 1e-12);
            }
        }
    }
}
