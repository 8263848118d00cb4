//! System coefficients, time grid, ambiguity bound, and input validation.
//!
//! Coefficients are piecewise-constant on the grid: `at(k)` returns the value
//! on `[t_k, t_{k+1})`. All downstream per-step integrals are exact for this
//! representation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg;

/// Uniform grid `t_k = k T / N` on `[0, T]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(Error::InvalidGrid(format!("horizon T = {horizon} must be positive")));
        }
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("step count N = {steps} must be >= 2")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points `N + 1`.
    pub fn num_points(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.horizon / self.steps as f64
    }

    /// Grid index of `t`, if `t` lies on the grid (relative tolerance 1e-9).
    pub fn index_at(&self, t: f64) -> Option<usize> {
        let k = (t / self.dt()).round();
        if k < 0.0 || k > self.steps as f64 {
            return None;
        }
        let k = k as usize;
        if (self.time(k) - t).abs() <= 1e-9 * self.horizon.max(1.0) {
            Some(k)
        } else {
            None
        }
    }
}

/// A coefficient that is either constant in time or given per grid step.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeVarying<T> {
    Constant(T),
    PerStep(Vec<T>),
}

impl<T> TimeVarying<T> {
    pub fn at(&self, step: usize) -> &T {
        match self {
            TimeVarying::Constant(v) => v,
            TimeVarying::PerStep(vs) => &vs[step],
        }
    }

    pub fn step_count(&self) -> Option<usize> {
        match self {
            TimeVarying::Constant(_) => None,
            TimeVarying::PerStep(vs) => Some(vs.len()),
        }
    }
}

/// Linear system data: signal `dx = (Bx + b) dt + dw`, observation
/// `dm = (Hx + h) dt + dv`, with noise intensities `Q` and `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCoefficients {
    n: usize,
    m: usize,
    sys: TimeVarying<DMatrix<f64>>,
    obs: TimeVarying<DMatrix<f64>>,
    sys_bias: TimeVarying<DVector<f64>>,
    obs_bias: TimeVarying<DVector<f64>>,
    q_cov: TimeVarying<DMatrix<f64>>,
    r_cov: TimeVarying<DMatrix<f64>>,
    x0: DVector<f64>,
}

fn check_dims<T, F: Fn(&T) -> (usize, usize)>(
    field: &str,
    coeff: &TimeVarying<T>,
    expected: (usize, usize),
    steps: usize,
    shape: F,
) -> Result<()> {
    let check_one = |v: &T| -> Result<()> {
        let got = shape(v);
        if got != expected {
            return Err(Error::DimensionMismatch {
                field: field.to_string(),
                expected: format!("{}x{}", expected.0, expected.1),
                got: format!("{}x{}", got.0, got.1),
            });
        }
        Ok(())
    };
    match coeff {
        TimeVarying::Constant(v) => check_one(v),
        TimeVarying::PerStep(vs) => {
            if vs.len() != steps {
                return Err(Error::DimensionMismatch {
                    field: field.to_string(),
                    expected: format!("{steps} per-step entries"),
                    got: format!("{}", vs.len()),
                });
            }
            vs.iter().try_for_each(check_one)
        }
    }
}

impl ModelCoefficients {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        grid: &TimeGrid,
        sys: TimeVarying<DMatrix<f64>>,
        obs: TimeVarying<DMatrix<f64>>,
        sys_bias: TimeVarying<DVector<f64>>,
        obs_bias: TimeVarying<DVector<f64>>,
        q_cov: TimeVarying<DMatrix<f64>>,
        r_cov: TimeVarying<DMatrix<f64>>,
        x0: DVector<f64>,
    ) -> Result<Self> {
        let n = x0.len();
        let m = obs.at(0).nrows();
        if n == 0 || m == 0 {
            return Err(Error::DimensionMismatch {
                field: "x0/H".into(),
                expected: "positive dimensions".into(),
                got: format!("n = {n}, m = {m}"),
            });
        }
        let steps = grid.steps();
        check_dims("B", &sys, (n, n), steps, |v| (v.nrows(), v.ncols()))?;
        check_dims("H", &obs, (m, n), steps, |v| (v.nrows(), v.ncols()))?;
        check_dims("b", &sys_bias, (n, 1), steps, |v| (v.len(), 1))?;
        check_dims("h", &obs_bias, (m, 1), steps, |v| (v.len(), 1))?;
        check_dims("Q", &q_cov, (n, n), steps, |v| (v.nrows(), v.ncols()))?;
        check_dims("R", &r_cov, (m, m), steps, |v| (v.nrows(), v.ncols()))?;
        Ok(Self { n, m, sys, obs, sys_bias, obs_bias, q_cov, r_cov, x0 })
    }

    /// Signal dimension.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Observation dimension.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn sys_at(&self, k: usize) -> &DMatrix<f64> {
        self.sys.at(k)
    }

    pub fn obs_at(&self, k: usize) -> &DMatrix<f64> {
        self.obs.at(k)
    }

    pub fn sys_bias_at(&self, k: usize) -> &DVector<f64> {
        self.sys_bias.at(k)
    }

    pub fn obs_bias_at(&self, k: usize) -> &DVector<f64> {
        self.obs_bias.at(k)
    }

    pub fn q_at(&self, k: usize) -> &DMatrix<f64> {
        self.q_cov.at(k)
    }

    pub fn r_at(&self, k: usize) -> &DMatrix<f64> {
        self.r_cov.at(k)
    }

    pub fn x0(&self) -> &DVector<f64> {
        &self.x0
    }

    /// True when every coefficient is a single time-constant value.
    pub fn is_time_invariant(&self) -> bool {
        self.sys.step_count().is_none()
            && self.obs.step_count().is_none()
            && self.sys_bias.step_count().is_none()
            && self.obs_bias.step_count().is_none()
            && self.q_cov.step_count().is_none()
            && self.r_cov.step_count().is_none()
    }
}

/// Bound `mu` on each component of the uncertainty parameter, and the
/// exponent parameter of the estimator space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AmbiguityBound {
    pub mu: f64,
    pub epsilon: f64,
}

impl AmbiguityBound {
    pub fn new(mu: f64, epsilon: f64) -> Result<Self> {
        if !(mu >= 0.0) || !mu.is_finite() {
            return Err(Error::InvalidAmbiguity(format!("mu = {mu} must be >= 0")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::InvalidAmbiguity(format!(
                "epsilon = {epsilon} must lie in (0, 1)"
            )));
        }
        Ok(Self { mu, epsilon })
    }
}

/// Numeric limits used by [`validate`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationLimits {
    /// Lower bound on the smallest eigenvalue of every `R(t_k)`.
    pub delta_r: f64,
    /// Upper bound on the absolute value of every coefficient entry.
    pub coeff_bound: f64,
    /// Symmetry / PSD slack for `Q` and `R`.
    pub sym_tol: f64,
}

impl Default for ValidationLimits {
    fn default() -> Self {
        Self { delta_r: 1e-10, coeff_bound: 1e6, sym_tol: 1e-10 }
    }
}

/// A single validation failure with its location and magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub step: Option<usize>,
    pub magnitude: f64,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.step {
            Some(k) => write!(f, "{} (step {}): {}", self.field, k, self.message),
            None => write!(f, "{}: {}", self.field, self.message),
        }
    }
}

fn steps_to_check<T>(coeff: &TimeVarying<T>, grid: &TimeGrid) -> Vec<usize> {
    match coeff.step_count() {
        None => vec![0],
        Some(_) => (0..grid.steps()).collect(),
    }
}

/// Checks every model invariant and reports violations; never fails.
pub fn validate(
    model: &ModelCoefficients,
    grid: &TimeGrid,
    limits: &ValidationLimits,
) -> Vec<Violation> {
    let mut out = Vec::new();

    let mut bound_check = |field: &str, step: Option<usize>, max_abs: f64| {
        if !max_abs.is_finite() || max_abs > limits.coeff_bound {
            out.push(Violation {
                field: field.to_string(),
                step,
                magnitude: max_abs,
                message: format!("entry magnitude {max_abs:e} exceeds bound {:e}", limits.coeff_bound),
            });
        }
    };

    for k in steps_to_check(&model.sys, grid) {
        bound_check("B", Some(k), linalg::max_abs(model.sys_at(k)));
    }
    for k in steps_to_check(&model.obs, grid) {
        bound_check("H", Some(k), linalg::max_abs(model.obs_at(k)));
    }
    for k in steps_to_check(&model.sys_bias, grid) {
        bound_check("b", Some(k), model.sys_bias_at(k).amax());
    }
    for k in steps_to_check(&model.obs_bias, grid) {
        bound_check("h", Some(k), model.obs_bias_at(k).amax());
    }
    bound_check("x0", None, model.x0().amax());

    for k in steps_to_check(&model.q_cov, grid) {
        let q = model.q_at(k);
        let asym = linalg::asymmetry(q);
        if asym > limits.sym_tol * linalg::max_abs(q).max(1.0) {
            out.push(Violation {
                field: "Q".into(),
                step: Some(k),
                magnitude: asym,
                message: format!("not symmetric (max |Q - Q^T| = {asym:e})"),
            });
        }
        let min_eig = linalg::min_sym_eigenvalue(q);
        if min_eig < -limits.sym_tol {
            out.push(Violation {
                field: "Q".into(),
                step: Some(k),
                magnitude: min_eig,
                message: format!("not positive semidefinite (eigenvalue {min_eig})"),
            });
        }
    }

    for k in steps_to_check(&model.r_cov, grid) {
        let r = model.r_at(k);
        let asym = linalg::asymmetry(r);
        if asym > limits.sym_tol * linalg::max_abs(r).max(1.0) {
            out.push(Violation {
                field: "R".into(),
                step: Some(k),
                magnitude: asym,
                message: format!("not symmetric (max |R - R^T| = {asym:e})"),
            });
        }
        let min_eig = linalg::min_sym_eigenvalue(r);
        if min_eig < limits.delta_r {
            out.push(Violation {
                field: "R".into(),
                step: Some(k),
                magnitude: min_eig,
                message: format!(
                    "not uniformly positive definite (min eigenvalue {min_eig:e} < delta_R = {:e})",
                    limits.delta_r
                ),
            });
        }
    }

    out
}
