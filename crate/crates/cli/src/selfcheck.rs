//! Bundled invariant suite: fast sanity checks across the numeric stack,
//! one pass/fail line per check.

use rkb_core::config::RunSettings;
use rkb_core::gexp::{concave_dual, penalty_deterministic, GeneratorSpec};
use rkb_core::kalman::{classical_filter, riccati_solve, ObservationPath};
use rkb_core::mmse::{conditional_mmse, FiniteConvexOperator, FiniteSpace, Partition};
use rkb_core::model::{AmbiguityBound, ModelCoefficients, TimeGrid};
use rkb_core::robust::{robust_filter, RobustProblem};
use rkb_core::sim::{
    density_path, girsanov_moment_check, mean_se, simulate_paths, DeterministicTheta, ThetaPath,
};

pub const BUNDLED_CONFIG: &str = include_str!("../../../configs/scalar.toml");

struct Tally {
    passed: usize,
    failed: usize,
}

impl Tally {
    fn record(&mut self, name: &str, ok: bool, detail: String) {
        if ok {
            self.passed += 1;
            println!("ok    {name}: {detail}");
        } else {
            self.failed += 1;
            println!("FAIL  {name}: {detail}");
        }
    }
}

pub fn run(
    model: &ModelCoefficients,
    grid: &TimeGrid,
    ambiguity: &AmbiguityBound,
    settings: &RunSettings,
) -> bool {
    let mut tally = Tally { passed: 0, failed: 0 };
    let seed = settings.seed.unwrap_or(42);

    // Riccati closed form on the reference problem
    {
        let sol = riccati_solve(model, grid);
        let p_end = sol.p[grid.steps()][(0, 0)];
        let err = (p_end - grid.horizon().tanh()).abs();
        tally.record("riccati-closed-form", err <= 1e-6, format!("|P(T) - tanh T| = {err:.2e}"));
    }

    // Girsanov exponential-moment bound, equality case
    {
        let chk = girsanov_moment_check(1.0, 2.0, 1.0, 20_000, seed);
        let ok = (chk.estimate - chk.lower_bound).abs() <= 4.0 * chk.std_error;
        tally.record(
            "girsanov-moment",
            ok,
            format!("estimate {:.6} vs bound {:.6} (se {:.1e})", chk.estimate, chk.lower_bound, chk.std_error),
        );
    }

    // density martingale property at the horizon
    {
        let batch = simulate_paths(model, grid, &ThetaPath::zero(1, 1), 10_000, seed, 0.0)
            .expect("reference batch");
        let theta = ThetaPath::constant(vec![0.4], vec![-0.3]);
        let dens = density_path(&theta, &batch).expect("density path");
        let finals: Vec<f64> = dens.iter().map(|p| p[grid.steps()]).collect();
        let (mean, se) = mean_se(&finals);
        let ok = (mean - 1.0).abs() <= 4.0 * se;
        tally.record("density-martingale", ok, format!("mean {mean:.5} (se {se:.1e})"));
    }

    // robust filter reduces to the classical filter at mu = 0
    {
        let batch =
            simulate_paths(model, grid, &ThetaPath::zero(1, 1), 1, seed, 0.0).expect("one path");
        let obs = ObservationPath::from_sample(&batch.paths[0], grid, 1);
        let classical = classical_filter(model, grid, &obs).expect("classical filter");
        let robust =
            robust_filter(model, grid, &ThetaPath::zero(1, 1), &obs).expect("robust filter");
        let ok = classical.x_hat == robust.x_hat;
        tally.record("classical-reduction", ok, "bitwise equality with theta = 0".into());
    }

    // saddle certification on the bundled generator
    {
        let gen = GeneratorSpec::hyperbolic(1.0, 1, 1);
        let dual = concave_dual(&gen, 33);
        let mu = ambiguity.mu.min(0.99 * dual.box_radius());
        match RobustProblem::new(model, *grid, &dual, mu, grid.horizon()) {
            Ok(problem) => match problem.certify_saddle(seed) {
                Ok(saddle) => {
                    let ok = saddle.gap >= -settings.gap_tol
                        && saddle.weak_duality_violation <= 1e-9;
                    tally.record(
                        "saddle-certificate",
                        ok,
                        format!(
                            "lower {:.6} upper {:.6} gap {:.3e}",
                            saddle.lower_value, saddle.upper_value, saddle.gap
                        ),
                    );
                }
                Err(e) => tally.record("saddle-certificate", false, e.to_string()),
            },
            Err(e) => tally.record("saddle-certificate", false, e.to_string()),
        }
    }

    // penalty closed form for the hyperbolic dual
    {
        let dual = concave_dual(&GeneratorSpec::hyperbolic(1.0, 1, 1), 33);
        let theta = DeterministicTheta::constant(vec![0.0], vec![0.6]);
        let alpha = penalty_deterministic(&dual, grid, &theta, grid.steps())
            .expect("penalty in domain");
        let expected = -0.2 * grid.horizon();
        let ok = (alpha - expected).abs() <= 1e-10;
        tally.record("penalty-closed-form", ok, format!("alpha = {alpha:.12}"));
    }

    // finite-space MMSE hand example
    {
        let space = FiniteSpace::new(vec![0.5, 0.5]).expect("space");
        let op = FiniteConvexOperator::new(
            space,
            vec![vec![1.0, 1.0], vec![1.5, 0.5]],
            vec![0.0, 0.1],
            2.0,
        )
        .expect("operator");
        let rho = op.rho_eval(&[1.0, 0.0]).expect("rho");
        let partition = Partition::trivial(2);
        let solved = conditional_mmse(&op, &[1.0, 0.0], &partition).expect("solve");
        let ok = (rho - 0.65).abs() <= 1e-12
            && (solved.value - 0.25).abs() <= 1e-8
            && solved.saddle_gap <= 1e-8;
        tally.record(
            "finite-mmse",
            ok,
            format!("rho {rho:.4} value {:.6} gap {:.1e}", solved.value, solved.saddle_gap),
        );
    }

    println!("selfcheck: {} passed, {} failed", tally.passed, tally.failed);
    tally.failed == 0
}
