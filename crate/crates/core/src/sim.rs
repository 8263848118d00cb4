//! Path simulation under any prior, Girsanov density paths, and the
//! moment-bound / mixture checks.
//!
//! Conventions. The driving noises are standard Brownian motions `w`, `v`;
//! the model injects them through `Q^{1/2}`, `R^{1/2}`. A prior with
//! parameter `theta = (theta1, theta2)` shifts the drifts:
//!
//! ```text
//! dx = (B x + b - theta1) dt + Q^{1/2} dw,   x(0) = x0,
//! dm = (H x + h - theta2) dt + R^{1/2} dv,   m(0) = 0,
//! ```
//!
//! with `w`, `v` standard under that prior. Its density against the
//! reference measure is the exponential martingale computed on the
//! standardized increments,
//!
//! ```text
//! f(t) = exp(-∫ theta1' dw - 1/2 ∫ ‖theta1‖² ds - ∫ theta2' dv - 1/2 ∫ ‖theta2‖² ds).
//! ```
//!
//! Direct simulation under a prior and reweighting of reference paths by
//! `f` are both exposed so they can cross-validate.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{matvec_into, sqrt_psd};
use crate::model::{ModelCoefficients, TimeGrid, TimeVarying};

/// SplitMix64 finalizer; decorrelates per-path seeds.
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for one path. Independent of the total path count, so enlarging a
/// batch reproduces its prefix bitwise.
pub fn path_rng(seed: u64, path_index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(path_index)))
}

/// Deterministic piecewise-constant uncertainty parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct DeterministicTheta {
    n: usize,
    m: usize,
    theta1: TimeVarying<Vec<f64>>,
    theta2: TimeVarying<Vec<f64>>,
}

impl DeterministicTheta {
    pub fn zero(n: usize, m: usize) -> Self {
        Self {
            n,
            m,
            theta1: TimeVarying::Constant(vec![0.0; n]),
            theta2: TimeVarying::Constant(vec![0.0; m]),
        }
    }

    pub fn constant(theta1: Vec<f64>, theta2: Vec<f64>) -> Self {
        Self { n: theta1.len(), m: theta2.len(), theta1: TimeVarying::Constant(theta1), theta2: TimeVarying::Constant(theta2) }
    }

    /// Per-step values; both lists must have one entry per grid step.
    pub fn per_step(theta1: Vec<Vec<f64>>, theta2: Vec<Vec<f64>>) -> Result<Self> {
        if theta1.is_empty() || theta1.len() != theta2.len() {
            return Err(Error::GridMismatch(format!(
                "theta1 has {} steps, theta2 has {}",
                theta1.len(),
                theta2.len()
            )));
        }
        let n = theta1[0].len();
        let m = theta2[0].len();
        if theta1.iter().any(|v| v.len() != n) || theta2.iter().any(|v| v.len() != m) {
            return Err(Error::GridMismatch("ragged theta entries".into()));
        }
        Ok(Self { n, m, theta1: TimeVarying::PerStep(theta1), theta2: TimeVarying::PerStep(theta2) })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn theta1_at(&self, step: usize) -> &[f64] {
        self.theta1.at(step)
    }

    pub fn theta2_at(&self, step: usize) -> &[f64] {
        self.theta2.at(step)
    }

    pub fn is_zero(&self) -> bool {
        let all_zero = |tv: &TimeVarying<Vec<f64>>| match tv {
            TimeVarying::Constant(v) => v.iter().all(|&x| x == 0.0),
            TimeVarying::PerStep(vs) => vs.iter().all(|v| v.iter().all(|&x| x == 0.0)),
        };
        all_zero(&self.theta1) && all_zero(&self.theta2)
    }

    pub fn max_abs(&self) -> f64 {
        let fold = |tv: &TimeVarying<Vec<f64>>| match tv {
            TimeVarying::Constant(v) => v.iter().fold(0.0f64, |a, x| a.max(x.abs())),
            TimeVarying::PerStep(vs) => {
                vs.iter().flatten().fold(0.0f64, |a, x| a.max(x.abs()))
            }
        };
        fold(&self.theta1).max(fold(&self.theta2))
    }

    pub fn check_steps(&self, steps: usize) -> Result<()> {
        for tv in [&self.theta1, &self.theta2] {
            if let Some(len) = tv.step_count() {
                if len != steps {
                    return Err(Error::GridMismatch(format!(
                        "theta has {len} steps, grid has {steps}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Feedback evaluator: `(t, state, theta1_out, theta2_out)`.
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], &mut [f64], &mut [f64]) + Send + Sync>;

/// An uncertainty-parameter path with its adaptedness tag.
#[derive(Clone)]
pub enum ThetaPath {
    Deterministic(DeterministicTheta),
    /// `theta(t)` evaluated from the observation available at `t`; Z-adapted.
    ObservationFeedback { n: usize, m: usize, eval: FeedbackFn },
    /// `theta(t)` evaluated from the signal at `t`; not Z-adapted.
    SignalFeedback { n: usize, m: usize, eval: FeedbackFn },
}

impl ThetaPath {
    pub fn zero(n: usize, m: usize) -> Self {
        ThetaPath::Deterministic(DeterministicTheta::zero(n, m))
    }

    pub fn constant(theta1: Vec<f64>, theta2: Vec<f64>) -> Self {
        ThetaPath::Deterministic(DeterministicTheta::constant(theta1, theta2))
    }

    pub fn is_deterministic(&self) -> bool {
        matches!(self, ThetaPath::Deterministic(_))
    }

    pub fn is_signal_feedback(&self) -> bool {
        matches!(self, ThetaPath::SignalFeedback { .. })
    }

    pub fn dims(&self) -> (usize, usize) {
        match self {
            ThetaPath::Deterministic(d) => (d.n(), d.m()),
            ThetaPath::ObservationFeedback { n, m, .. } => (*n, *m),
            ThetaPath::SignalFeedback { n, m, .. } => (*n, *m),
        }
    }

    /// Writes `theta(t_k)` given the signal and observation state at `t_k`.
    pub fn eval_into(
        &self,
        step: usize,
        t: f64,
        x: &[f64],
        m_obs: &[f64],
        out1: &mut [f64],
        out2: &mut [f64],
    ) {
        match self {
            ThetaPath::Deterministic(d) => {
                out1.copy_from_slice(d.theta1_at(step));
                out2.copy_from_slice(d.theta2_at(step));
            }
            ThetaPath::ObservationFeedback { eval, .. } => eval(t, m_obs, out1, out2),
            ThetaPath::SignalFeedback { eval, .. } => eval(t, x, out1, out2),
        }
    }
}

impl std::fmt::Debug for ThetaPath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ThetaPath::Deterministic(d) => f.debug_tuple("Deterministic").field(d).finish(),
            ThetaPath::ObservationFeedback { .. } => f.write_str("ObservationFeedback"),
            ThetaPath::SignalFeedback { .. } => f.write_str("SignalFeedback"),
        }
    }
}

/// One simulated trajectory on the grid; all storage is flat and row-major
/// in the grid index.
#[derive(Debug, Clone)]
pub struct SamplePath {
    /// Signal, `(N + 1) * n`.
    pub x: Vec<f64>,
    /// Observation, `(N + 1) * m`.
    pub m_obs: Vec<f64>,
    /// Standardized signal-noise increments, `N * n`.
    pub dw: Vec<f64>,
    /// Standardized observation-noise increments, `N * m`.
    pub dv: Vec<f64>,
    /// Density of the simulating prior against the reference measure,
    /// `N + 1` values; identically one for reference batches.
    pub f_theta: Vec<f64>,
}

impl SamplePath {
    pub fn x_at(&self, k: usize, n: usize) -> &[f64] {
        &self.x[k * n..(k + 1) * n]
    }

    pub fn obs_at(&self, k: usize, m: usize) -> &[f64] {
        &self.m_obs[k * m..(k + 1) * m]
    }
}

/// A reproducible batch of sample paths.
#[derive(Debug, Clone)]
pub struct PathBatch {
    pub seed: u64,
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    /// Batch was simulated under the reference measure (`theta = 0`).
    pub reference: bool,
    pub paths: Vec<SamplePath>,
}

/// Euler-Maruyama simulation of the signal/observation pair under the prior
/// identified by `theta`.
pub fn simulate_paths(
    model: &ModelCoefficients,
    grid: &TimeGrid,
    theta: &ThetaPath,
    n_paths: usize,
    seed: u64,
    mu: f64,
) -> Result<PathBatch> {
    let (n, m) = (model.n(), model.m());
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
    let sqrt_dt = dt.sqrt();

    // Piecewise-constant noise injections, precomputed per distinct step.
    let q_sqrt: Vec<_> = (0..steps)
        .map(|k| if k == 0 || !model.is_time_invariant() { Some(sqrt_psd(model.q_at(k))) } else { None })
        .collect();
    let r_sqrt: Vec<_> = (0..steps)
        .map(|k| if k == 0 || !model.is_time_invariant() { Some(sqrt_psd(model.r_at(k))) } else { None })
        .collect();
    let q_sqrt_at = |k: usize| q_sqrt[k].as_ref().unwrap_or_else(|| q_sqrt[0].as_ref().unwrap());
    let r_sqrt_at = |k: usize| r_sqrt[k].as_ref().unwrap_or_else(|| r_sqrt[0].as_ref().unwrap());

    let bound = mu + 1e-12;

    let paths: Vec<Result<SamplePath>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let mut path = SamplePath {
                x: vec![0.0; (steps + 1) * n],
                m_obs: vec![0.0; (steps + 1) * m],
                dw: vec![0.0; steps * n],
                dv: vec![0.0; steps * m],
                f_theta: vec![1.0; steps + 1],
            };
            path.x[..n].copy_from_slice(model.x0().as_slice());

            let mut th1 = vec![0.0; n];
            let mut th2 = vec![0.0; m];
            let mut drift_x = vec![0.0; n];
            let mut drift_m = vec![0.0; m];
            let mut noise_x = vec![0.0; n];
            let mut noise_m = vec![0.0; m];

            for k in 0..steps {
                let t = grid.time(k);
                let (x_k, m_k) = (k * n, k * m);

                {
                    let x_now = &path.x[x_k..x_k + n];
                    let m_now = &path.m_obs[m_k..m_k + m];
                    theta.eval_into(k, t, x_now, m_now, &mut th1, &mut th2);
                }
                for &v in th1.iter().chain(th2.iter()) {
                    if v.abs() > bound {
                        return Err(Error::BoundViolation { step: k, value: v, mu });
                    }
                }

                for i in 0..n {
                    path.dw[k * n + i] = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                }
                for j in 0..m {
                    path.dv[k * m + j] = sqrt_dt * rng.sample::<f64, _>(StandardNormal);
                }
                let dw_k = &path.dw[k * n..(k + 1) * n];
                let dv_k = &path.dv[k * m..(k + 1) * m];

                matvec_into(model.sys_at(k), &path.x[x_k..x_k + n], &mut drift_x);
                matvec_into(model.obs_at(k), &path.x[x_k..x_k + n], &mut drift_m);
                matvec_into(q_sqrt_at(k), dw_k, &mut noise_x);
                matvec_into(r_sqrt_at(k), dv_k, &mut noise_m);
                let b_k = model.sys_bias_at(k);
                let h_k = model.obs_bias_at(k);

                for i in 0..n {
                    path.x[x_k + n + i] =
                        path.x[x_k + i] + (drift_x[i] + b_k[i] - th1[i]) * dt + noise_x[i];
                }
                for j in 0..m {
                    path.m_obs[m_k + m + j] =
                        path.m_obs[m_k + j] + (drift_m[j] + h_k[j] - th2[j]) * dt + noise_m[j];
                }

                // Density of the simulating prior along the path. The stored
                // increments are standard under that prior, so the reference
                // increments are dw + theta dt, giving the +1/2 sign here.
                let mut expo = 0.0;
                for i in 0..n {
                    expo += -th1[i] * dw_k[i] + 0.5 * th1[i] * th1[i] * dt;
                }
                for j in 0..m {
                    expo += -th2[j] * dv_k[j] + 0.5 * th2[j] * th2[j] * dt;
                }
                path.f_theta[k + 1] = path.f_theta[k] * expo.exp();
            }
            Ok(path)
        })
        .collect();

    let mut collected = Vec::with_capacity(n_paths);
    for p in paths {
        collected.push(p?);
    }

    let reference = matches!(theta, ThetaPath::Deterministic(d) if d.is_zero());
    Ok(PathBatch { seed, grid: *grid, n, m, reference, paths: collected })
}

/// Exponential density along one stored path for per-step theta values
/// laid out flat (`steps * n`, `steps * m`).
pub(crate) fn density_along_path(
    path: &SamplePath,
    grid: &TimeGrid,
    n: usize,
    m: usize,
    theta1: &[f64],
    theta2: &[f64],
) -> Vec<f64> {
    let steps = grid.steps();
    let dt = grid.dt();
    let mut f = vec![1.0; steps + 1];
    for k in 0..steps {
        let mut expo = 0.0;
        for i in 0..n {
            let th = theta1[k * n + i];
            expo += -th * path.dw[k * n + i] - 0.5 * th * th * dt;
        }
        for j in 0..m {
            let th = theta2[k * m + j];
            expo += -th * path.dv[k * m + j] - 0.5 * th * th * dt;
        }
        f[k + 1] = f[k] * expo.exp();
    }
    f
}

fn theta_values_on_path(
    theta: &ThetaPath,
    path: &SamplePath,
    grid: &TimeGrid,
    n: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let steps = grid.steps();
    let mut th1 = vec![0.0; steps * n];
    let mut th2 = vec![0.0; steps * m];
    for k in 0..steps {
        let t1 = &mut th1[k * n..(k + 1) * n];
        let t2 = &mut th2[k * m..(k + 1) * m];
        theta.eval_into(k, grid.time(k), path.x_at(k, n), path.obs_at(k, m), t1, t2);
    }
    (th1, th2)
}

/// Density path `f(t_k)` of the prior identified by `theta` along each path
/// of a reference batch.
pub fn density_path(theta: &ThetaPath, batch: &PathBatch) -> Result<Vec<Vec<f64>>> {
    let (n, m) = (batch.n, batch.m);
    let (tn, tm) = theta.dims();
    if (tn, tm) != (n, m) {
        return Err(Error::DimensionMismatch {
            field: "theta".into(),
            expected: format!("({n}, {m})"),
            got: format!("({tn}, {tm})"),
        });
    }
    if let ThetaPath::Deterministic(d) = theta {
        d.check_steps(batch.grid.steps())?;
    }
    Ok(batch
        .paths
        .par_iter()
        .map(|path| {
            let (th1, th2) = theta_values_on_path(theta, path, &batch.grid, n, m);
            density_along_path(path, &batch.grid, n, m, &th1, &th2)
        })
        .collect())
}

/// Result of the Girsanov exponential-moment check.
#[derive(Debug, Clone, Copy)]
pub struct MomentCheck {
    pub estimate: f64,
    pub std_error: f64,
    pub lower_bound: f64,
    pub upper_bound: f64,
}

/// Monte Carlo estimate of `E[exp(alpha * zeta_0^t(phi))]` for constant
/// `phi = c`, where `zeta_0^t(phi) = ∫ phi dw - 1/2 ∫ phi² ds`, against the
/// two-sided exponential bound (the sides coincide for constant `phi`).
pub fn girsanov_moment_check(
    phi_const: f64,
    alpha: f64,
    t: f64,
    n_paths: usize,
    seed: u64,
) -> MomentCheck {
    assert!(alpha > 1.0, "the bound requires alpha > 1");
    assert!(t > 0.0);
    let bound = ((alpha * alpha - alpha) * 0.5 * t * phi_const * phi_const).exp();
    if phi_const == 0.0 {
        return MomentCheck { estimate: 1.0, std_error: 0.0, lower_bound: bound, upper_bound: bound };
    }
    let sqrt_t = t.sqrt();
    let samples: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut rng = path_rng(seed, p as u64);
            let w_t: f64 = sqrt_t * rng.sample::<f64, _>(StandardNormal);
            (alpha * (phi_const * w_t - 0.5 * phi_const * phi_const * t)).exp()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n_paths as f64;
    let var = samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_paths as f64 - 1.0);
    MomentCheck {
        estimate: mean,
        std_error: (var / n_paths as f64).sqrt(),
        lower_bound: bound,
        upper_bound: bound,
    }
}

/// Per-step theta values along one path.
#[derive(Debug, Clone)]
pub struct PathwiseTheta {
    /// `steps * n`.
    pub theta1: Vec<f64>,
    /// `steps * m`.
    pub theta2: Vec<f64>,
}

/// Density-weighted mixture of two priors, per sample path.
#[derive(Debug, Clone)]
pub struct MixtureTheta {
    pub per_path: Vec<PathwiseTheta>,
    /// `lambda f_a(t_k) + (1 - lambda) f_b(t_k)`, per path; this is the
    /// exact density of the mixed prior.
    pub mixed_density: Vec<Vec<f64>>,
}

/// The uncertainty parameter generating the mixture prior
/// `lambda P_a + (1 - lambda) P_b`: a density-ratio-weighted combination
/// per path and step. The output always respects any bound both inputs do.
pub fn mixture_theta(
    theta_a: &ThetaPath,
    theta_b: &ThetaPath,
    lambda: f64,
    batch: &PathBatch,
) -> Result<MixtureTheta> {
    assert!(lambda > 0.0 && lambda < 1.0, "lambda must lie in (0, 1)");
    if !batch.reference {
        return Err(Error::NotReferenceBatch);
    }
    let (n, m) = (batch.n, batch.m);
    let steps = batch.grid.steps();

    let results: Vec<(PathwiseTheta, Vec<f64>)> = batch
        .paths
        .par_iter()
        .map(|path| {
            let (a1, a2) = theta_values_on_path(theta_a, path, &batch.grid, n, m);
            let (b1, b2) = theta_values_on_path(theta_b, path, &batch.grid, n, m);
            let fa = density_along_path(path, &batch.grid, n, m, &a1, &a2);
            let fb = density_along_path(path, &batch.grid, n, m, &b1, &b2);
            let mut th1 = vec![0.0; steps * n];
            let mut th2 = vec![0.0; steps * m];
            let mut mixed = vec![0.0; steps + 1];
            for k in 0..=steps {
                mixed[k] = lambda * fa[k] + (1.0 - lambda) * fb[k];
            }
            for k in 0..steps {
                let wa = lambda * fa[k];
                let wb = (1.0 - lambda) * fb[k];
                let denom = wa + wb;
                for i in 0..n {
                    th1[k * n + i] = (wa * a1[k * n + i] + wb * b1[k * n + i]) / denom;
                }
                for j in 0..m {
                    th2[k * m + j] = (wa * a2[k * m + j] + wb * b2[k * m + j]) / denom;
                }
            }
            (PathwiseTheta { theta1: th1, theta2: th2 }, mixed)
        })
        .collect();

    let mut per_path = Vec::with_capacity(results.len());
    let mut mixed_density = Vec::with_capacity(results.len());
    for (t, f) in results {
        per_path.push(t);
        mixed_density.push(f);
    }
    Ok(MixtureTheta { per_path, mixed_density })
}

/// Mean and standard error accumulated in path-index order.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let k = values.len() as f64;
    let mean = values.iter().sum::<f64>() / k;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (k - 1.0);
    ((mean), (var / k).sqrt())
}
