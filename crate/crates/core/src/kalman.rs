//! Classical continuous-time Kalman-Bucy filter: Riccati solver, filter SDE,
//! and a textbook discrete-time oracle used for cross-checks.
//!
//! The error-variance ODE is integrated with a classical 4th-order one-step
//! method (it is deterministic, so high order is cheap), while the filter SDE
//! uses an Euler step aligned with the simulation grid so that filtered paths
//! stay consistent with simulated increments.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::linalg::{inv_spd, matvec_into, symmetrize};
use crate::model::{ModelCoefficients, TimeGrid};
use crate::sim::{SamplePath, ThetaPath};

/// Solution `P(t_k)` of the error-variance Riccati equation, with the
/// per-step gains `K_k = P_k H_k' R_k^{-1}` cached for filtering.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub grid: TimeGrid,
    /// `P` at every grid point, symmetric PSD, `P(0) = 0`.
    pub p: Vec<DMatrix<f64>>,
    /// Filter gain on `[t_k, t_{k+1})`.
    pub gains: Vec<DMatrix<f64>>,
    /// Cached `R^{-1}` per step.
    pub r_inv: Vec<DMatrix<f64>>,
}

impl RiccatiSolution {
    /// Trace of `P` at a grid index.
    pub fn trace_at(&self, k: usize) -> f64 {
        self.p[k].trace()
    }
}

/// Integrates `dP/dt = B P + P B' - P H' R^{-1} H P + Q`, `P(0) = 0`.
///
/// Requires a validated model (`R` uniformly positive definite); bounded
/// coefficients rule out blow-up on the horizon.
pub fn riccati_solve(model: &ModelCoefficients, grid: &TimeGrid) -> RiccatiSolution {
    let n = model.n();
    let steps = grid.steps();
    let dt = grid.dt();

    let r_inv: Vec<DMatrix<f64>> = if model.is_time_invariant() {
        vec![inv_spd(model.r_at(0)).expect("R must be positive definite"); 1]
    } else {
        (0..steps)
            .map(|k| inv_spd(model.r_at(k)).expect("R must be positive definite"))
            .collect()
    };
    let r_inv_at = |k: usize| if r_inv.len() == 1 { &r_inv[0] } else { &r_inv[k] };

    let mut p = Vec::with_capacity(steps + 1);
    p.push(DMatrix::zeros(n, n));

    let rhs = |k: usize, pm: &DMatrix<f64>| -> DMatrix<f64> {
        let b = model.sys_at(k);
        let h = model.obs_at(k);
        let bp = b * pm;
        let hp = h * pm;
        &bp + bp.transpose() - hp.transpose() * r_inv_at(k) * &hp + model.q_at(k)
    };

    for k in 0..steps {
        let pk = &p[k];
        let k1 = rhs(k, pk);
        let k2 = rhs(k, &(pk + &k1 * (dt / 2.0)));
        let k3 = rhs(k, &(pk + &k2 * (dt / 2.0)));
        let k4 = rhs(k, &(pk + &k3 * dt));
        let mut next = pk + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
        symmetrize(&mut next);
        p.push(next);
    }

    let gains = (0..steps)
        .map(|k| &p[k] * model.obs_at(k).transpose() * r_inv_at(k))
        .collect();

    RiccatiSolution { grid: *grid, p, gains, r_inv: r_inv.clone() }
}

/// An observation trajectory on the model grid.
#[derive(Debug, Clone)]
pub struct ObservationPath {
    pub grid: TimeGrid,
    pub m_dim: usize,
    /// `(N + 1) * m`, starting at zero.
    pub values: Vec<f64>,
}

impl ObservationPath {
    pub fn new(grid: TimeGrid, m_dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.num_points() * m_dim {
            return Err(Error::GridMismatch(format!(
                "observation path has {} values, expected {}",
                values.len(),
                grid.num_points() * m_dim
            )));
        }
        Ok(Self { grid, m_dim, values })
    }

    pub fn from_sample(path: &SamplePath, grid: &TimeGrid, m_dim: usize) -> Self {
        Self { grid: *grid, m_dim, values: path.m_obs.clone() }
    }

    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k * self.m_dim..(k + 1) * self.m_dim]
    }
}

/// Filter output: the estimator path, the error variance it was run with,
/// and the innovation increments.
#[derive(Debug, Clone)]
pub struct FilterOutput {
    /// `(N + 1) * n`, `x_hat(0) = x0`.
    pub x_hat: Vec<f64>,
    /// Error variance at every grid point.
    pub p: Vec<DMatrix<f64>>,
    /// Innovation increments, `N * m`.
    pub innovations: Vec<f64>,
}

impl FilterOutput {
    pub fn x_hat_at(&self, k: usize, n: usize) -> &[f64] {
        &self.x_hat[k * n..(k + 1) * n]
    }
}

/// Shared Euler driver for the filter SDE with a drift shift `theta`.
///
/// `dx_hat = (B x_hat + b - theta1) dt + K dI`,
/// `dI = dm - (H x_hat + h - theta2) dt`.
///
/// Z-adapted shifts only: a signal-feedback theta is rejected. The classical
/// filter is exactly this driver with `theta = 0`.
pub fn filter_with(
    model: &ModelCoefficients,
    grid: &TimeGrid,
    riccati: &RiccatiSolution,
    theta: &ThetaPath,
    obs: &ObservationPath,
) -> Result<FilterOutput> {
    if theta.is_signal_feedback() {
        return Err(Error::NotAdapted);
    }
    let (n, m) = (model.n(), model.m());
    if obs.m_dim != m || obs.grid != *grid {
        return Err(Error::GridMismatch("observation path does not match the model grid".into()));
    }
    let (tn, tm) = theta.dims();
    if (tn, tm) != (n, m) {
        return Err(Error::DimensionMismatch {
            field: "theta".into(),
            expected: format!("({n}, {m})"),
            got: format!("({tn}, {tm})"),
        });
    }
    if let ThetaPath::Deterministic(d) = theta {
        d.check_steps(grid.steps())?;
    }

    let steps = grid.steps();
    let dt = grid.dt();
    let mut x_hat = vec![0.0; (steps + 1) * n];
    x_hat[..n].copy_from_slice(model.x0().as_slice());
    let mut innovations = vec![0.0; steps * m];

    let mut th1 = vec![0.0; n];
    let mut th2 = vec![0.0; m];
    let mut drift = vec![0.0; n];
    let mut pred = vec![0.0; m];
    let mut corr = vec![0.0; n];

    for k in 0..steps {
        let t = grid.time(k);
        let x_k = k * n;
        {
            let x_now = &x_hat[x_k..x_k + n];
            theta.eval_into(k, t, x_now, obs.at(k), &mut th1, &mut th2);
        }

        matvec_into(model.sys_at(k), &x_hat[x_k..x_k + n], &mut drift);
        matvec_into(model.obs_at(k), &x_hat[x_k..x_k + n], &mut pred);
        let b_k = model.sys_bias_at(k);
        let h_k = model.obs_bias_at(k);
        let m_now = obs.at(k);
        let m_next = &obs.values[(k + 1) * m..(k + 2) * m];

        for j in 0..m {
            innovations[k * m + j] =
                (m_next[j] - m_now[j]) - (pred[j] + h_k[j] - th2[j]) * dt;
        }
        matvec_into(&riccati.gains[k], &innovations[k * m..(k + 1) * m], &mut corr);
        for i in 0..n {
            x_hat[x_k + n + i] = x_hat[x_k + i] + (drift[i] + b_k[i] - th1[i]) * dt + corr[i];
        }
    }

    Ok(FilterOutput { x_hat, p: riccati.p.clone(), innovations })
}

/// Classical Kalman-Bucy filter (`theta = 0`).
pub fn classical_filter(
    model: &ModelCoefficients,
    grid: &TimeGrid,
    obs: &ObservationPath,
) -> Result<FilterOutput> {
    let riccati = riccati_solve(model, grid);
    filter_with(model, grid, &riccati, &ThetaPath::zero(model.n(), model.m()), obs)
}

/// Textbook discrete-time predict/update Kalman recursion on the
/// Euler-discretized system. Independent oracle for [`classical_filter`].
pub fn discrete_kalman_oracle(
    model: &ModelCoefficients,
    grid: &TimeGrid,
    obs: &ObservationPath,
) -> Result<Vec<f64>> {
    let (n, m) = (model.n(), model.m());
    if obs.m_dim != m || obs.grid != *grid {
        return Err(Error::GridMismatch("observation path does not match the model grid".into()));
    }
    let steps = grid.steps();
    let dt = grid.dt();

    let mut x = model.x0().clone();
    let mut sigma = DMatrix::<f64>::zeros(n, n);
    let mut out = vec![0.0; (steps + 1) * n];
    out[..n].copy_from_slice(x.as_slice());

    for k in 0..steps {
        let b = model.sys_at(k);
        let h = model.obs_at(k);
        let bv = model.sys_bias_at(k);
        let hv = model.obs_bias_at(k);

        // Update with the increment dm_k, a measurement of x_k with
        // design H dt and noise covariance R dt.
        let c = h * dt;
        let s = &c * &sigma * c.transpose() + model.r_at(k) * dt;
        let s_inv = inv_spd(&s).expect("innovation covariance must be positive definite");
        let gain = &sigma * c.transpose() * s_inv;
        let m_now = obs.at(k);
        let m_next = &obs.values[(k + 1) * m..(k + 2) * m];
        let mut innov = nalgebra::DVector::<f64>::zeros(m);
        let mut pred = vec![0.0; m];
        matvec_into(h, x.as_slice(), &mut pred);
        for j in 0..m {
            innov[j] = (m_next[j] - m_now[j]) - (pred[j] + hv[j]) * dt;
        }
        x += &gain * &innov;
        let mut post = &sigma - &gain * &c * &sigma;
        symmetrize(&mut post);

        // Predict one Euler step.
        let phi = DMatrix::<f64>::identity(n, n) + b * dt;
        x = &phi * &x + bv * dt;
        sigma = &phi * post * phi.transpose() + model.q_at(k) * dt;
        symmetrize(&mut sigma);

        out[(k + 1) * n..(k + 2) * n].copy_from_slice(x.as_slice());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelCoefficients, TimeGrid, TimeVarying};
    use crate::sim::{simulate_paths, ThetaPath};
    use approx::assert_relative_eq;
    use nalgebra::{DMatrix, DVector};

    fn scalar_model(b: f64, h: f64, q: f64, r: f64, x0: f64, grid: &TimeGrid) -> ModelCoefficients {
        ModelCoefficients::new(
            grid,
            TimeVarying::Constant(DMatrix::from_element(1, 1, b)),
            TimeVarying::Constant(DMatrix::from_element(1, 1, h)),
            TimeVarying::Constant(DVector::zeros(1)),
            TimeVarying::Constant(DVector::zeros(1)),
            TimeVarying::Constant(DMatrix::from_element(1, 1, q)),
            TimeVarying::Constant(DMatrix::from_element(1, 1, r)),
            DVector::from_element(1, x0),
        )
        .unwrap()
    }

    #[test]
    fn riccati_matches_tanh_closed_form() {
        // B = 0, H = Q = R = 1: dP = (1 - P^2) dt, so P(t) = tanh(t).
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let model = scalar_model(0.0, 1.0, 1.0, 1.0, 0.0, &grid);
        let sol = riccati_solve(&model, &grid);
        let err = (sol.p[1000][(0, 0)] - 1.0f64.tanh()).abs();
        assert!(err <= 1e-6, "error {err}");
        for k in [0, 250, 500, 1000] {
            let t = grid.time(k);
            assert_relative_eq!(sol.p[k][(0, 0)], t.tanh(), epsilon = 1e-8);
        }
    }

    #[test]
    fn riccati_zero_forcing_stays_zero() {
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let model = scalar_model(0.3, 1.0, 0.0, 1.0, 0.0, &grid);
        let sol = riccati_solve(&model, &grid);
        assert!(sol.p.iter().all(|p| p[(0, 0)].abs() < 1e-14));
    }

    #[test]
    fn riccati_without_observation_is_a_quadrature() {
        // H = 0, B = 0: P(t) = Q t.
        let grid = TimeGrid::new(2.0, 200).unwrap();
        let model = scalar_model(0.0, 0.0, 0.7, 1.0, 0.0, &grid);
        let sol = riccati_solve(&model, &grid);
        for k in [50, 100, 200] {
            assert_relative_eq!(sol.p[k][(0, 0)], 0.7 * grid.time(k), epsilon = 1e-10);
        }
    }

    #[test]
    fn riccati_is_monotone_in_q() {
        let grid = TimeGrid::new(1.0, 200).unwrap();
        let lo = riccati_solve(&scalar_model(0.2, 1.0, 0.5, 1.0, 0.0, &grid), &grid);
        let hi = riccati_solve(&scalar_model(0.2, 1.0, 1.5, 1.0, 0.0, &grid), &grid);
        for k in 0..=200 {
            assert!(hi.p[k][(0, 0)] >= lo.p[k][(0, 0)] - 1e-12);
        }
    }

    #[test]
    fn zero_gain_filter_solves_the_drift_ode() {
        // H = 0 kills the correction term; x_hat solves dx = (B x + b) dt.
        let grid = TimeGrid::new(1.0, 400).unwrap();
        let model = scalar_model(0.5, 0.0, 1.0, 1.0, 1.0, &grid);
        let obs = ObservationPath::new(grid, 1, vec![0.0; grid.num_points()]).unwrap();
        let out = classical_filter(&model, &grid, &obs).unwrap();
        // Euler solution of dx = 0.5 x dt from 1.0.
        let mut euler = 1.0;
        for _ in 0..400 {
            euler += 0.5 * euler * grid.dt();
        }
        assert_relative_eq!(out.x_hat[400], euler, epsilon = 1e-12);
        assert_eq!(out.x_hat[0], 1.0);
    }

    #[test]
    fn signal_feedback_parameters_are_rejected_as_not_adapted() {
        use std::sync::Arc;
        let grid = TimeGrid::new(1.0, 50).unwrap();
        let model = scalar_model(0.0, 1.0, 1.0, 1.0, 0.0, &grid);
        let riccati = riccati_solve(&model, &grid);
        let obs = ObservationPath::new(grid, 1, vec![0.0; grid.num_points()]).unwrap();
        let theta = ThetaPath::SignalFeedback {
            n: 1,
            m: 1,
            eval: Arc::new(|_t, x: &[f64], t1: &mut [f64], _t2: &mut [f64]| {
                t1[0] = 0.1 * x[0];
            }),
        };
        assert!(matches!(
            filter_with(&model, &grid, &riccati, &theta, &obs),
            Err(crate::error::Error::NotAdapted)
        ));
    }

    #[test]
    fn observation_feedback_parameters_are_adapted_and_accepted() {
        use std::sync::Arc;
        let grid = TimeGrid::new(1.0, 100).unwrap();
        let model = scalar_model(0.0, 1.0, 1.0, 1.0, 0.0, &grid);
        let batch = simulate_paths(&model, &grid, &ThetaPath::zero(1, 1), 1, 8, 0.0).unwrap();
        let obs = ObservationPath::from_sample(&batch.paths[0], &grid, 1);
        let riccati = riccati_solve(&model, &grid);
        let theta = ThetaPath::ObservationFeedback {
            n: 1,
            m: 1,
            eval: Arc::new(|_t, m: &[f64], t1: &mut [f64], t2: &mut [f64]| {
                t1[0] = 0.2 * m[0].clamp(-1.0, 1.0);
                t2[0] = 0.0;
            }),
        };
        let out = filter_with(&model, &grid, &riccati, &theta, &obs).unwrap();
        assert_eq!(out.x_hat[0], 0.0);
        assert!(out.x_hat.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn continuous_and_discrete_filters_agree_to_first_order() {
        let grid = TimeGrid::new(1.0, 1000).unwrap();
        let model = scalar_model(0.2, 1.0, 1.0, 1.0, 0.3, &grid);
        let batch = simulate_paths(&model, &grid, &ThetaPath::zero(1, 1), 1, 77, 0.0).unwrap();
        let obs = ObservationPath::from_sample(&batch.paths[0], &grid, 1);
        let cont = classical_filter(&model, &grid, &obs).unwrap();
        let disc = discrete_kalman_oracle(&model, &grid, &obs).unwrap();
        assert_eq!(disc[0], cont.x_hat[0]);
        let max_diff = cont
            .x_hat
            .iter()
            .zip(&disc)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 20.0 * grid.dt(), "diff {max_diff}");
    }
}
