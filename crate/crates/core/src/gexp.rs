//! Convex BSDE generators, their concave duals, penalty functionals, and the
//! two routes to a g-expectation: backward least-squares Monte Carlo and the
//! dual representation over priors.
//!
//! Sign conventions. Generators are normalized (`g(t, 0, 0) = 0`), so the
//! concave dual satisfies `G <= 0` and penalties are nonpositive; the
//! g-expectation is `sup over priors of (expectation + penalty)`. The
//! finite-space engine in [`crate::mmse`] uses the opposite sign
//! (`- penalty`, penalty nonnegative); negation bridges the two.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ModelCoefficients, TimeGrid};
use crate::sim::{
    density_path, mean_se, mixture_theta, path_rng, simulate_paths, DeterministicTheta, PathBatch,
    ThetaPath,
};

type TabulatedFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;

/// A convex standard generator `g(t, z1, z2)`.
#[derive(Clone)]
pub struct GeneratorSpec {
    kind: GeneratorKind,
    n: usize,
    m: usize,
    lipschitz: f64,
}

#[derive(Clone)]
enum GeneratorKind {
    Zero,
    /// `kappa * (‖z1‖₁ + ‖z2‖₁)`; sublinear.
    ScaledNorm { kappa: f64 },
    /// `kappa * (sqrt(1 + ‖z‖²) - 1)`; smooth, Lipschitz-`kappa`.
    Hyperbolic { kappa: f64 },
    Tabulated { eval: TabulatedFn, z_max: f64 },
}

impl std::fmt::Debug for GeneratorSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match &self.kind {
            GeneratorKind::Zero => "zero".to_string(),
            GeneratorKind::ScaledNorm { kappa } => format!("scaled-norm({kappa})"),
            GeneratorKind::Hyperbolic { kappa } => format!("hyperbolic({kappa})"),
            GeneratorKind::Tabulated { .. } => "tabulated".to_string(),
        };
        write!(f, "GeneratorSpec({name}, n={}, m={})", self.n, self.m)
    }
}

impl GeneratorSpec {
    pub fn zero(n: usize, m: usize) -> Self {
        Self { kind: GeneratorKind::Zero, n, m, lipschitz: 0.0 }
    }

    pub fn scaled_norm(kappa: f64, n: usize, m: usize) -> Self {
        assert!(kappa >= 0.0);
        Self { kind: GeneratorKind::ScaledNorm { kappa }, n, m, lipschitz: kappa }
    }

    pub fn hyperbolic(kappa: f64, n: usize, m: usize) -> Self {
        assert!(kappa >= 0.0);
        Self { kind: GeneratorKind::Hyperbolic { kappa }, n, m, lipschitz: kappa }
    }

    /// User generator; spot-checks normalization, the Lipschitz constant and
    /// midpoint convexity on seeded random pairs before accepting.
    pub fn tabulated(
        eval: TabulatedFn,
        lipschitz: f64,
        z_max: f64,
        n: usize,
        m: usize,
    ) -> Result<Self> {
        let spec = Self { kind: GeneratorKind::Tabulated { eval, z_max }, n, m, lipschitz };
        let issues = spec.spot_check(1234, 200);
        if issues.is_empty() {
            Ok(spec)
        } else {
            Err(Error::ConfigParse(format!("generator spot-check failed: {}", issues[0])))
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn eval(&self, t: f64, z1: &[f64], z2: &[f64]) -> f64 {
        match &self.kind {
            GeneratorKind::Zero => 0.0,
            GeneratorKind::ScaledNorm { kappa } => {
                kappa * (z1.iter().map(|v| v.abs()).sum::<f64>()
                    + z2.iter().map(|v| v.abs()).sum::<f64>())
            }
            GeneratorKind::Hyperbolic { kappa } => {
                let s2: f64 = z1.iter().chain(z2).map(|v| v * v).sum();
                kappa * ((1.0 + s2).sqrt() - 1.0)
            }
            GeneratorKind::Tabulated { eval, .. } => eval(t, z1, z2),
        }
    }

    /// Checks normalization, Lipschitz continuity, and midpoint convexity on
    /// random pairs; returns human-readable findings (empty = clean).
    pub fn spot_check(&self, seed: u64, samples: usize) -> Vec<String> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut issues = Vec::new();
        let d = self.n + self.m;
        let zero1 = vec![0.0; self.n];
        let zero2 = vec![0.0; self.m];
        let g0 = self.eval(0.5, &zero1, &zero2);
        if g0.abs() > 1e-12 {
            issues.push(format!("g(t, 0, 0) = {g0}, expected 0"));
        }
        let draw = |rng: &mut ChaCha8Rng| -> (Vec<f64>, Vec<f64>) {
            let v: Vec<f64> = (0..d).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            (v[..self.n].to_vec(), v[self.n..].to_vec())
        };
        for _ in 0..samples {
            let t = rng.random::<f64>();
            let (a1, a2) = draw(&mut rng);
            let (b1, b2) = draw(&mut rng);
            let ga = self.eval(t, &a1, &a2);
            let gb = self.eval(t, &b1, &b2);
            let d1: f64 = a1.iter().zip(&b1).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            let d2: f64 = a2.iter().zip(&b2).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            if (ga - gb).abs() > self.lipschitz * (d1 + d2) + 1e-9 {
                issues.push(format!(
                    "Lipschitz violation: |g(a)-g(b)| = {} > K (‖dz1‖+‖dz2‖) = {}",
                    (ga - gb).abs(),
                    self.lipschitz * (d1 + d2)
                ));
                break;
            }
            let mid1: Vec<f64> = a1.iter().zip(&b1).map(|(x, y)| 0.5 * (x + y)).collect();
            let mid2: Vec<f64> = a2.iter().zip(&b2).map(|(x, y)| 0.5 * (x + y)).collect();
            let gm = self.eval(t, &mid1, &mid2);
            if gm > 0.5 * (ga + gb) + 1e-9 {
                issues.push(format!(
                    "midpoint convexity violation: g(mid) = {gm} > {}",
                    0.5 * (ga + gb)
                ));
                break;
            }
        }
        issues
    }
}

/// Concave dual `G(t, theta) = inf_z [g(t, z) + <z1, theta1> + <z2, theta2>]`.
///
/// `NEG_INFINITY` encodes a divergent infimum; it is a value, not an error.
#[derive(Clone, Debug)]
pub struct ConcaveDual {
    kind: DualKind,
    n: usize,
    m: usize,
}

#[derive(Clone)]
enum DualKind {
    /// Dual of `g = 0`: zero at the origin, `-inf` elsewhere.
    Origin,
    /// Dual of the scaled norm: zero on `‖theta‖∞ <= radius`, `-inf` outside.
    Box { radius: f64 },
    /// Dual of the hyperbolic generator: `sqrt(kappa² - ‖theta‖²) - kappa`
    /// on `‖theta‖₂ <= kappa`, `-inf` outside.
    Ball { kappa: f64 },
    Numeric { gen: GeneratorSpec, z_max: f64, grid_points: usize },
}

impl std::fmt::Debug for DualKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DualKind::Origin => write!(f, "Origin"),
            DualKind::Box { radius } => write!(f, "Box({radius})"),
            DualKind::Ball { kappa } => write!(f, "Ball({kappa})"),
            DualKind::Numeric { .. } => write!(f, "Numeric"),
        }
    }
}

/// Computes the concave dual of a generator; analytic for the built-ins,
/// nested grid minimization with refinement for tabulated ones.
pub fn concave_dual(gen: &GeneratorSpec, grid_points: usize) -> ConcaveDual {
    let (n, m) = gen.dims();
    let kind = match &gen.kind {
        GeneratorKind::Zero => DualKind::Origin,
        GeneratorKind::ScaledNorm { kappa } => DualKind::Box { radius: *kappa },
        GeneratorKind::Hyperbolic { kappa } => DualKind::Ball { kappa: *kappa },
        GeneratorKind::Tabulated { z_max, .. } => DualKind::Numeric {
            gen: gen.clone(),
            z_max: *z_max,
            grid_points: grid_points.max(9),
        },
    };
    ConcaveDual { kind, n, m }
}

impl ConcaveDual {
    pub fn dims(&self) -> (usize, usize) {
        (self.n, self.m)
    }

    pub fn value(&self, t: f64, theta1: &[f64], theta2: &[f64]) -> f64 {
        debug_assert_eq!(theta1.len(), self.n);
        debug_assert_eq!(theta2.len(), self.m);
        match &self.kind {
            DualKind::Origin => {
                if theta1.iter().chain(theta2).all(|&v| v == 0.0) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            DualKind::Box { radius } => {
                if theta1.iter().chain(theta2).all(|v| v.abs() <= radius + 1e-12) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            DualKind::Ball { kappa } => {
                let s2: f64 = theta1.iter().chain(theta2).map(|v| v * v).sum();
                if s2 <= kappa * kappa + 1e-12 {
                    (kappa * kappa - s2).max(0.0).sqrt() - kappa
                } else {
                    f64::NEG_INFINITY
                }
            }
            DualKind::Numeric { gen, z_max, grid_points } => {
                numeric_dual(gen, t, theta1, theta2, *z_max, *grid_points)
            }
        }
    }

    /// Gradient of `G` with respect to `(theta1, theta2)`; defined on the
    /// interior of the effective domain, zero for the flat duals.
    pub fn grad(&self, t: f64, theta: &[f64], out: &mut [f64]) {
        match &self.kind {
            DualKind::Origin | DualKind::Box { .. } => out.fill(0.0),
            DualKind::Ball { kappa } => {
                let s2: f64 = theta.iter().map(|v| v * v).sum();
                let root = (kappa * kappa - s2).max(1e-300).sqrt();
                for (o, v) in out.iter_mut().zip(theta) {
                    *o = -v / root;
                }
            }
            DualKind::Numeric { .. } => {
                // central differences
                let d = theta.len();
                let h = 1e-6;
                let mut plus = theta.to_vec();
                let mut minus = theta.to_vec();
                for i in 0..d {
                    plus[i] += h;
                    minus[i] -= h;
                    let fp = self.value(t, &plus[..self.n], &plus[self.n..]);
                    let fm = self.value(t, &minus[..self.n], &minus[self.n..]);
                    out[i] = (fp - fm) / (2.0 * h);
                    plus[i] = theta[i];
                    minus[i] = theta[i];
                }
            }
        }
    }

    /// Largest `r` such that the componentwise box `[-r, r]^{n+m}` lies in
    /// the effective domain of `G`.
    pub fn box_radius(&self) -> f64 {
        match &self.kind {
            DualKind::Origin => 0.0,
            DualKind::Box { radius } => *radius,
            DualKind::Ball { kappa } => kappa / ((self.n + self.m) as f64).sqrt(),
            DualKind::Numeric { z_max, .. } => {
                // bisection on corner finiteness
                let d = self.n + self.m;
                let corner_finite = |r: f64| -> bool {
                    let corners = 1usize << d.min(8);
                    (0..corners).all(|mask| {
                        let th: Vec<f64> = (0..d)
                            .map(|i| if mask >> i & 1 == 1 { r } else { -r })
                            .collect();
                        self.value(0.0, &th[..self.n], &th[self.n..]).is_finite()
                    })
                };
                let mut lo = 0.0;
                let mut hi = *z_max;
                if !corner_finite(1e-9) {
                    return 0.0;
                }
                for _ in 0..50 {
                    let mid = 0.5 * (lo + hi);
                    if corner_finite(mid) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo
            }
        }
    }

    /// `l2` domain radius, when the domain is a centered ball; `None` for the
    /// box/origin/numeric duals.
    pub fn ball_radius(&self) -> Option<f64> {
        match &self.kind {
            DualKind::Ball { kappa } => Some(*kappa),
            _ => None,
        }
    }

    pub fn is_flat_on_domain(&self) -> bool {
        matches!(self.kind, DualKind::Origin | DualKind::Box { .. })
    }

    /// Argmax of `G(t, ·)` over the centered componentwise box of radius
    /// `mu` (assumed inside the domain). Ties are broken toward the minimal
    /// Euclidean norm, then lexicographically.
    pub fn argmax_on_box(&self, t: f64, mu: f64) -> Vec<f64> {
        let d = self.n + self.m;
        match &self.kind {
            // flat or peaked at the origin; minimal-norm tie-break gives 0
            DualKind::Origin | DualKind::Box { .. } | DualKind::Ball { .. } => vec![0.0; d],
            DualKind::Numeric { .. } => {
                let (theta, _) = self.numeric_box_argmax(t, mu, 1.0, &vec![0.0; d]);
                theta
            }
        }
    }

    /// Argmax of `weight * G(t, theta) + <q, theta>` over the centered box
    /// of radius `mu` (assumed inside the domain).
    pub fn argmax_tilted_on_box(&self, t: f64, mu: f64, weight: f64, q: &[f64]) -> Vec<f64> {
        let d = self.n + self.m;
        debug_assert_eq!(q.len(), d);
        match &self.kind {
            DualKind::Origin => vec![0.0; d],
            DualKind::Box { .. } => {
                // G vanishes on the box: maximize the linear part alone
                q.iter().map(|&c| if c > 0.0 { mu } else if c < 0.0 { -mu } else { 0.0 }).collect()
            }
            DualKind::Ball { kappa } => {
                let theta = ball_tilted_argmax(*kappa, mu, weight, q);
                // gradient-polish guards the active-set enumeration
                let g = |x: &[f64], grad: &mut [f64]| -> f64 {
                    let s2: f64 = x.iter().map(|v| v * v).sum();
                    let root = (kappa * kappa - s2).max(1e-300).sqrt();
                    for i in 0..x.len() {
                        grad[i] = -weight * x[i] / root + q[i];
                    }
                    weight * (root - kappa) + x.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
                };
                let (polished, pv) = crate::opt::pga_max(&g, &theta, mu, None, 60);
                let mut gradbuf = vec![0.0; d];
                if pv > g(&theta, &mut gradbuf) { polished } else { theta }
            }
            DualKind::Numeric { .. } => self.numeric_box_argmax(t, mu, weight, q).0,
        }
    }

    fn numeric_box_argmax(&self, t: f64, mu: f64, weight: f64, q: &[f64]) -> (Vec<f64>, f64) {
        let d = self.n + self.m;
        let objective = |x: &[f64]| -> f64 {
            weight * self.value(t, &x[..self.n], &x[self.n..])
                + x.iter().zip(q).map(|(a, b)| a * b).sum::<f64>()
        };
        // coarse grid, then gradient polish, then minimal-norm tie-break
        let pts = if d <= 2 { 21usize } else { 7 };
        let total = pts.pow(d as u32);
        let mut best_val = f64::NEG_INFINITY;
        let mut candidates: Vec<Vec<f64>> = Vec::new();
        let mut x = vec![0.0; d];
        for flat in 0..total {
            let mut idx = flat;
            for xi in x.iter_mut() {
                let j = idx % pts;
                idx /= pts;
                *xi = -mu + 2.0 * mu * j as f64 / (pts - 1) as f64;
            }
            let v = objective(&x);
            if v > best_val + 1e-12 {
                best_val = v;
                candidates.clear();
                candidates.push(x.clone());
            } else if (v - best_val).abs() <= 1e-12 {
                candidates.push(x.clone());
            }
        }
        let f_grad = |x: &[f64], grad: &mut [f64]| -> f64 {
            let mut gbuf = vec![0.0; d];
            self.grad(t, x, &mut gbuf);
            for i in 0..d {
                grad[i] = weight * gbuf[i] + q[i];
            }
            objective(x)
        };
        let mut best = candidates
            .into_iter()
            .min_by(|a, b| {
                let na: f64 = a.iter().map(|v| v * v).sum();
                let nb: f64 = b.iter().map(|v| v * v).sum();
                na.partial_cmp(&nb).unwrap().then_with(|| {
                    a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal)
                })
            })
            .unwrap_or_else(|| vec![0.0; d]);
        let (polished, pv) = crate::opt::pga_max(&f_grad, &best, mu, None, 80);
        if pv > best_val + 1e-12 {
            best = polished;
            best_val = pv;
        }
        (best, best_val)
    }
}

/// Active-set solve of `max weight * (sqrt(kappa² - ‖theta‖²) - kappa) + <q, theta>`
/// over the box `[-mu, mu]^d`, assumed contained in the kappa-ball.
fn ball_tilted_argmax(kappa: f64, mu: f64, weight: f64, q: &[f64]) -> Vec<f64> {
    let d = q.len();
    let mut clamped = vec![false; d];
    let mut theta = vec![0.0; d];
    for _ in 0..=d {
        let mut kf2 = kappa * kappa;
        let mut qf_norm2 = 0.0;
        for i in 0..d {
            if clamped[i] {
                kf2 -= mu * mu;
            } else {
                qf_norm2 += q[i] * q[i];
            }
        }
        let kf2 = kf2.max(0.0);
        let qf = qf_norm2.sqrt();
        let radius = if weight > 0.0 {
            kf2.sqrt() * qf / (weight * weight + qf_norm2).sqrt()
        } else {
            kf2.sqrt()
        };
        let mut changed = false;
        for i in 0..d {
            if clamped[i] {
                theta[i] = mu * q[i].signum();
            } else if qf > 0.0 {
                theta[i] = radius * q[i] / qf;
                if theta[i].abs() > mu {
                    clamped[i] = true;
                    changed = true;
                }
            } else {
                theta[i] = 0.0;
            }
        }
        if !changed {
            break;
        }
    }
    for t in theta.iter_mut() {
        *t = t.clamp(-mu, mu);
    }
    theta
}

/// Grid minimization of `g(t, z) + <z, theta>` with two refinement rounds;
/// declares divergence (`-inf`) when the running infimum keeps descending on
/// the expanding boundary.
fn numeric_dual(
    gen: &GeneratorSpec,
    t: f64,
    theta1: &[f64],
    theta2: &[f64],
    z_max: f64,
    grid_points: usize,
) -> f64 {
    let (n, m) = gen.dims();
    let d = n + m;
    let theta: Vec<f64> = theta1.iter().chain(theta2).copied().collect();

    let objective = |z: &[f64]| -> f64 {
        gen.eval(t, &z[..n], &z[n..]) + z.iter().zip(&theta).map(|(a, b)| a * b).sum::<f64>()
    };

    let minimize_on_box = |center: &[f64], half: f64, pts: usize| -> (Vec<f64>, f64, bool) {
        let mut best = (center.to_vec(), f64::INFINITY, false);
        let total = pts.pow(d as u32);
        let mut z = vec![0.0; d];
        for flat in 0..total {
            let mut idx = flat;
            let mut on_boundary = false;
            for i in 0..d {
                let j = idx % pts;
                idx /= pts;
                z[i] = center[i] - half + 2.0 * half * j as f64 / (pts - 1) as f64;
                if j == 0 || j == pts - 1 {
                    on_boundary = true;
                }
            }
            let v = objective(&z);
            if v < best.1 {
                best = (z.clone(), v, on_boundary);
            }
        }
        best
    };

    let center = vec![0.0; d];
    let (mut argmin, mut val, boundary) = minimize_on_box(&center, z_max, grid_points);

    // refinement rounds around the argmin
    let mut half = 2.0 * z_max / (grid_points - 1) as f64;
    for _ in 0..2 {
        let (a, v, _) = minimize_on_box(&argmin.clone(), half, grid_points);
        if v < val {
            argmin = a;
            val = v;
        }
        half *= 2.0 / (grid_points - 1) as f64;
    }

    // divergence probe: double the box and see whether the boundary keeps
    // winning with a materially lower value
    if boundary {
        let (_, v2, b2) = minimize_on_box(&center, 2.0 * z_max, grid_points);
        if b2 && v2 < val - 1e-9 * (1.0 + val.abs()) {
            return f64::NEG_INFINITY;
        }
        val = val.min(v2);
    }
    let _ = boundary;
    val
}

/// Value of the penalty functional at one prior.
#[derive(Debug, Clone, Copy)]
pub struct PenaltyValue {
    pub alpha: f64,
    /// Monte Carlo standard error; zero for deterministic parameters.
    pub std_error: f64,
}

/// Penalty of a deterministic parameter: the integral collapses to an exact
/// per-step sum.
pub fn penalty_deterministic(
    dual: &ConcaveDual,
    grid: &TimeGrid,
    theta: &DeterministicTheta,
    t_index: usize,
) -> Result<f64> {
    theta.check_steps(grid.steps())?;
    let dt = grid.dt();
    let mut alpha = 0.0;
    for k in 0..t_index {
        let g = dual.value(grid.time(k), theta.theta1_at(k), theta.theta2_at(k));
        if !g.is_finite() {
            return Err(Error::DomainViolation { step: k });
        }
        alpha += g * dt;
    }
    Ok(alpha)
}

/// Penalty `alpha_{0,t}` of the prior identified by `theta`.
///
/// Deterministic parameters are integrated exactly; feedback parameters are
/// estimated on a reference batch as the density-weighted Monte Carlo mean.
pub fn penalty_eval(
    theta: &ThetaPath,
    dual: &ConcaveDual,
    grid: &TimeGrid,
    t_index: usize,
    batch: Option<&PathBatch>,
) -> Result<PenaltyValue> {
    assert!(t_index <= grid.steps());
    if let ThetaPath::Deterministic(d) = theta {
        let alpha = penalty_deterministic(dual, grid, d, t_index)?;
        return Ok(PenaltyValue { alpha, std_error: 0.0 });
    }
    let batch = batch.ok_or(Error::NotReferenceBatch)?;
    if !batch.reference {
        return Err(Error::NotReferenceBatch);
    }
    let (n, m) = (batch.n, batch.m);
    let densities = density_path(theta, batch)?;
    let dt = grid.dt();
    let mut numerators = Vec::with_capacity(batch.paths.len());
    let mut weights = Vec::with_capacity(batch.paths.len());
    let mut th1 = vec![0.0; n];
    let mut th2 = vec![0.0; m];
    for (path, dens) in batch.paths.iter().zip(&densities) {
        let mut integral = 0.0;
        for k in 0..t_index {
            theta.eval_into(k, grid.time(k), path.x_at(k, n), path.obs_at(k, m), &mut th1, &mut th2);
            let g = dual.value(grid.time(k), &th1, &th2);
            if !g.is_finite() {
                return Err(Error::DomainViolation { step: k });
            }
            integral += g * dt;
        }
        numerators.push(dens[t_index] * integral);
        weights.push(dens[t_index]);
    }
    let (alpha, se) = ratio_mean_se(&numerators, &weights);
    Ok(PenaltyValue { alpha, std_error: se })
}

/// Self-normalized importance-sampling mean `sum a / sum b` with a
/// delta-method standard error. Exact whenever `a_i / b_i` is constant, as
/// for deterministic parameters.
fn ratio_mean_se(num: &[f64], den: &[f64]) -> (f64, f64) {
    let k = num.len() as f64;
    let a_bar = num.iter().sum::<f64>() / k;
    let b_bar = den.iter().sum::<f64>() / k;
    let ratio = a_bar / b_bar;
    if num.len() < 2 {
        return (ratio, 0.0);
    }
    let var = num
        .iter()
        .zip(den)
        .map(|(a, b)| {
            let r = (a - ratio * b) / b_bar;
            r * r
        })
        .sum::<f64>()
        / (k - 1.0);
    (ratio, (var / k).sqrt())
}

/// One concavity comparison.
#[derive(Debug, Clone, Copy)]
pub struct ConcavityPair {
    /// Penalty of the mixture prior (Monte Carlo).
    pub alpha_mix: f64,
    pub alpha_mix_se: f64,
    /// `lambda alpha_a + (1 - lambda) alpha_b` (exact).
    pub alpha_combo: f64,
    /// `alpha_combo - alpha_mix`; positive values violate concavity.
    pub violation: f64,
}

#[derive(Debug, Clone)]
pub struct ConcavityReport {
    pub pairs: Vec<ConcavityPair>,
    pub max_violation: f64,
    /// Largest violation in standard-error units.
    pub max_violation_sigmas: f64,
}

/// Checks `alpha(lambda P_a + (1 - lambda) P_b) >= lambda alpha(P_a) +
/// (1 - lambda) alpha(P_b)` on each triple, Monte Carlo on the mixture side
/// (self-normalized, so coinciding parameters and endpoint weights are
/// compared exactly).
pub fn penalty_concavity_check(
    dual: &ConcaveDual,
    grid: &TimeGrid,
    t_index: usize,
    pairs: &[(DeterministicTheta, DeterministicTheta, f64)],
    batch: &PathBatch,
) -> Result<ConcavityReport> {
    let mut out = Vec::with_capacity(pairs.len());
    let dt = grid.dt();
    let (n, m) = (batch.n, batch.m);
    for (ta, tb, lambda) in pairs {
        let alpha_a = penalty_deterministic(dual, grid, ta, t_index)?;
        let alpha_b = penalty_deterministic(dual, grid, tb, t_index)?;
        let combo = lambda * alpha_a + (1.0 - lambda) * alpha_b;

        // endpoint weights degenerate to a single prior
        if *lambda == 0.0 || *lambda == 1.0 {
            let alpha_mix = if *lambda == 1.0 { alpha_a } else { alpha_b };
            out.push(ConcavityPair {
                alpha_mix,
                alpha_mix_se: 0.0,
                alpha_combo: combo,
                violation: combo - alpha_mix,
            });
            continue;
        }

        let mix = mixture_theta(
            &ThetaPath::Deterministic(ta.clone()),
            &ThetaPath::Deterministic(tb.clone()),
            *lambda,
            batch,
        )?;
        let mut numerators = Vec::with_capacity(batch.paths.len());
        let mut weights = Vec::with_capacity(batch.paths.len());
        for (pt, fmix) in mix.per_path.iter().zip(&mix.mixed_density) {
            let mut integral = 0.0;
            for k in 0..t_index {
                let g = dual.value(
                    grid.time(k),
                    &pt.theta1[k * n..(k + 1) * n],
                    &pt.theta2[k * m..(k + 1) * m],
                );
                if !g.is_finite() {
                    return Err(Error::DomainViolation { step: k });
                }
                integral += g * dt;
            }
            numerators.push(fmix[t_index] * integral);
            weights.push(fmix[t_index]);
        }
        let (alpha_mix, se) = ratio_mean_se(&numerators, &weights);
        out.push(ConcavityPair {
            alpha_mix,
            alpha_mix_se: se,
            alpha_combo: combo,
            violation: combo - alpha_mix,
        });
    }
    let max_violation = out.iter().map(|p| p.violation).fold(f64::NEG_INFINITY, f64::max);
    let max_violation_sigmas = out
        .iter()
        .map(|p| if p.alpha_mix_se > 0.0 { p.violation / p.alpha_mix_se } else { 0.0 })
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(ConcavityReport { pairs: out, max_violation, max_violation_sigmas })
}

/// Result of the backward least-squares Monte Carlo solve.
#[derive(Debug, Clone, Copy)]
pub struct BsdeValue {
    pub y0: f64,
    /// Bootstrap standard error over full backward re-solves.
    pub std_error: f64,
    /// Steps where the regression basis lost rank and was reduced.
    pub rank_deficient_steps: usize,
}

const BSDE_BASIS: usize = 6;

fn basis_row(x: f64, mo: f64, out: &mut [f64]) {
    out[0] = 1.0;
    out[1] = x;
    out[2] = mo;
    out[3] = x * x;
    out[4] = x * mo;
    out[5] = mo * mo;
}

/// Least-squares fit of up to three responses on the quadratic basis via a
/// pseudo-inverse of the Gram matrix; reports rank deficiency.
fn regress(
    phi: &[f64],
    k_paths: usize,
    responses: [&[f64]; 3],
    fitted: &mut [Vec<f64>; 3],
) -> bool {
    let mut gram = DMatrix::<f64>::zeros(BSDE_BASIS, BSDE_BASIS);
    let mut rhs = [
        DVector::<f64>::zeros(BSDE_BASIS),
        DVector::<f64>::zeros(BSDE_BASIS),
        DVector::<f64>::zeros(BSDE_BASIS),
    ];
    for p in 0..k_paths {
        let row = &phi[p * BSDE_BASIS..(p + 1) * BSDE_BASIS];
        for i in 0..BSDE_BASIS {
            for j in i..BSDE_BASIS {
                gram[(i, j)] += row[i] * row[j];
            }
            for (r, resp) in responses.iter().enumerate() {
                rhs[r][i] += row[i] * resp[p];
            }
        }
    }
    for i in 0..BSDE_BASIS {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }

    let eig = gram.symmetric_eigen();
    let max_ev = eig.eigenvalues.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let tol = max_ev * 1e-12;
    let mut deficient = false;
    let mut inv_ev = eig.eigenvalues.clone();
    for v in inv_ev.iter_mut() {
        if v.abs() > tol {
            *v = 1.0 / *v;
        } else {
            *v = 0.0;
            deficient = true;
        }
    }
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv_ev) * eig.eigenvectors.transpose();
    let coeffs: Vec<DVector<f64>> = rhs.iter().map(|r| &pinv * r).collect();

    for p in 0..k_paths {
        let row = &phi[p * BSDE_BASIS..(p + 1) * BSDE_BASIS];
        for (r, c) in coeffs.iter().enumerate() {
            let mut s = 0.0;
            for i in 0..BSDE_BASIS {
                s += row[i] * c[i];
            }
            fitted[r][p] = s;
        }
    }
    deficient
}

fn backward_pass(
    gen: &GeneratorSpec,
    terminal: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    batch: &PathBatch,
    indices: &[usize],
) -> (f64, usize) {
    let grid = &batch.grid;
    let steps = grid.steps();
    let dt = grid.dt();
    let k_paths = indices.len();

    let mut y: Vec<f64> = indices
        .iter()
        .map(|&p| {
            let path = &batch.paths[p];
            terminal(path.x_at(steps, 1), path.obs_at(steps, 1))
        })
        .collect();

    let mut phi = vec![0.0; k_paths * BSDE_BASIS];
    let mut resp_z1 = vec![0.0; k_paths];
    let mut resp_z2 = vec![0.0; k_paths];
    let mut fitted = [vec![0.0; k_paths], vec![0.0; k_paths], vec![0.0; k_paths]];
    let mut deficient_steps = 0;

    for k in (1..steps).rev() {
        // standardize the state for conditioning
        let mut sx = (0.0, 0.0);
        let mut sm = (0.0, 0.0);
        for &p in indices {
            let path = &batch.paths[p];
            sx.0 += path.x[k];
            sm.0 += path.m_obs[k];
        }
        sx.0 /= k_paths as f64;
        sm.0 /= k_paths as f64;
        for &p in indices {
            let path = &batch.paths[p];
            sx.1 += (path.x[k] - sx.0) * (path.x[k] - sx.0);
            sm.1 += (path.m_obs[k] - sm.0) * (path.m_obs[k] - sm.0);
        }
        let sd_x = (sx.1 / k_paths as f64).sqrt().max(1e-12);
        let sd_m = (sm.1 / k_paths as f64).sqrt().max(1e-12);

        for (row, &p) in indices.iter().enumerate() {
            let path = &batch.paths[p];
            basis_row(
                (path.x[k] - sx.0) / sd_x,
                (path.m_obs[k] - sm.0) / sd_m,
                &mut phi[row * BSDE_BASIS..(row + 1) * BSDE_BASIS],
            );
            resp_z1[row] = y[row] * path.dw[k] / dt;
            resp_z2[row] = y[row] * path.dv[k] / dt;
        }
        if regress(&phi, k_paths, [&y, &resp_z1, &resp_z2], &mut fitted) {
            deficient_steps += 1;
        }
        let t = grid.time(k);
        for row in 0..k_paths {
            y[row] = fitted[0][row]
                + gen.eval(t, &fitted[1][row..row + 1], &fitted[2][row..row + 1]) * dt;
        }
    }

    // at t_0 the state is degenerate: plain means
    let k_f = k_paths as f64;
    let mean_y: f64 = y.iter().sum::<f64>() / k_f;
    let (mut z1, mut z2) = (0.0, 0.0);
    for (row, &p) in indices.iter().enumerate() {
        let path = &batch.paths[p];
        z1 += y[row] * path.dw[0] / dt;
        z2 += y[row] * path.dv[0] / dt;
    }
    z1 /= k_f;
    z2 /= k_f;
    let y0 = mean_y + gen.eval(0.0, &[z1], &[z2]) * dt;
    (y0, deficient_steps)
}

/// Estimates the g-expectation `Y(0)` of a terminal payoff by backward
/// induction with least-squares conditional expectations (scalar models).
pub fn bsde_solve(
    gen: &GeneratorSpec,
    terminal: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    model: &ModelCoefficients,
    grid: &TimeGrid,
    n_paths: usize,
    seed: u64,
    bootstrap: usize,
) -> Result<BsdeValue> {
    if model.n() != 1 || model.m() != 1 {
        return Err(Error::NotScalar { n: model.n(), m: model.m() });
    }
    let batch = simulate_paths(model, grid, &ThetaPath::zero(1, 1), n_paths, seed, 0.0)?;
    let all: Vec<usize> = (0..n_paths).collect();
    let (y0, deficient) = backward_pass(gen, terminal, &batch, &all);

    let mut boot_vals = Vec::with_capacity(bootstrap);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB007_5742);
    for _ in 0..bootstrap {
        let indices: Vec<usize> = (0..n_paths).map(|_| rng.random_range(0..n_paths)).collect();
        boot_vals.push(backward_pass(gen, terminal, &batch, &indices).0);
    }
    let std_error = if bootstrap >= 2 {
        let mean = boot_vals.iter().sum::<f64>() / bootstrap as f64;
        (boot_vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (bootstrap as f64 - 1.0))
            .sqrt()
    } else {
        0.0
    };
    Ok(BsdeValue { y0, std_error, rank_deficient_steps: deficient })
}

#[derive(Debug, Clone)]
pub struct DualPoint {
    pub mean: f64,
    pub std_error: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct DualValue {
    pub value: f64,
    pub argmax_index: usize,
    pub per_theta: Vec<DualPoint>,
}

/// Lower bound on the g-expectation from a finite family of deterministic
/// priors: `max over the family of (E_P[xi] + penalty(P))`, each expectation
/// by direct simulation under its prior with common random numbers.
pub fn dual_value(
    xi: &(dyn Fn(&[f64], &[f64]) -> f64 + Sync),
    dual: &ConcaveDual,
    model: &ModelCoefficients,
    grid: &TimeGrid,
    family: &[DeterministicTheta],
    n_paths: usize,
    seed: u64,
) -> Result<DualValue> {
    assert!(!family.is_empty());
    let steps = grid.steps();
    let mut per_theta = Vec::with_capacity(family.len());
    for theta in family {
        let penalty = penalty_deterministic(dual, grid, theta, steps)?;
        let bound = theta.max_abs();
        let batch = simulate_paths(
            model,
            grid,
            &ThetaPath::Deterministic(theta.clone()),
            n_paths,
            seed,
            bound,
        )?;
        let finals: Vec<f64> = batch
            .paths
            .iter()
            .map(|p| xi(p.x_at(steps, model.n()), p.obs_at(steps, model.m())))
            .collect();
        let (mean, se) = mean_se(&finals);
        per_theta.push(DualPoint { mean, std_error: se, penalty, total: mean + penalty });
    }
    let argmax_index = per_theta
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total.partial_cmp(&b.1.total).unwrap())
        .map(|(i, _)| i)
        .unwrap();
    Ok(DualValue { value: per_theta[argmax_index].total, argmax_index, per_theta })
}

/// Draws a deterministic constant parameter uniformly from the box of
/// radius `bound`; helper for randomized checks.
pub fn random_constant_theta(n: usize, m: usize, bound: f64, rng: &mut ChaCha8Rng) -> DeterministicTheta {
    let draw = |rng: &mut ChaCha8Rng, d: usize| -> Vec<f64> {
        (0..d).map(|_| bound * (2.0 * rng.random::<f64>() - 1.0)).collect()
    };
    let t1 = draw(rng, n);
    let t2 = draw(rng, m);
    DeterministicTheta::constant(t1, t2)
}

/// Standard normal draw helper for tests and oracles.
pub fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample::<f64, _>(StandardNormal)
}

/// Re-seedable RNG for oracle computations; shares the per-path construction
/// with the simulator.
pub fn oracle_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    path_rng(seed, stream)
}
