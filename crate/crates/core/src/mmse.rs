//! Conditional minimum-mean-square estimation under a convex operator on a
//! finite probability space.
//!
//! The operator is `rho(xi) = max_i (E_{P_i}[xi] - alpha_i)` for finitely
//! many densities with nonnegative penalties (`min alpha_i = 0`); this is
//! the sign convention with subtracted penalties, the negation of the
//! g-expectation convention in [`crate::gexp`]. The estimator solves
//!
//! ```text
//! inf over block-constant eta of rho((xi - eta)²),
//! ```
//!
//! by maximizing the concave dual
//! `h(lambda) = E_{f_lambda}[(xi - eta_lambda)²] - <lambda, alpha>`
//! over the simplex, where `eta_lambda` is the blockwise
//! conditional mean under the mixture density `f_lambda`. On a finite space
//! the hull of finitely many densities is compact, so existence and
//! uniqueness hold without any weak-convergence machinery; the solver
//! certifies each solve with an explicit saddle gap instead.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::opt::{project_simplex, simplex_least_squares};

/// Finite probability space with a strictly positive reference measure.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSpace {
    prob: Vec<f64>,
}

impl FiniteSpace {
    pub fn new(prob: Vec<f64>) -> Result<Self> {
        if prob.is_empty() {
            return Err(Error::InvalidFiniteSpace("empty outcome space".into()));
        }
        if prob.iter().any(|&p| p <= 0.0 || !p.is_finite()) {
            return Err(Error::InvalidFiniteSpace(
                "reference probabilities must be strictly positive".into(),
            ));
        }
        let total: f64 = prob.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidFiniteSpace(format!(
                "reference probabilities sum to {total}, expected 1"
            )));
        }
        let prob = prob.iter().map(|p| p / total).collect();
        Ok(Self { prob })
    }

    pub fn len(&self) -> usize {
        self.prob.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prob.is_empty()
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }
}

/// A partition of the outcome space (finite sub-sigma-algebra).
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    blocks: Vec<Vec<usize>>,
    block_of: Vec<usize>,
}

impl Partition {
    pub fn new(blocks: Vec<Vec<usize>>, space_size: usize) -> Result<Self> {
        let mut block_of = vec![usize::MAX; space_size];
        for (b, block) in blocks.iter().enumerate() {
            if block.is_empty() {
                return Err(Error::InvalidFiniteSpace(format!("block {b} is empty")));
            }
            for &omega in block {
                if omega >= space_size {
                    return Err(Error::InvalidFiniteSpace(format!(
                        "block {b} references outcome {omega} outside the space"
                    )));
                }
                if block_of[omega] != usize::MAX {
                    return Err(Error::InvalidFiniteSpace(format!(
                        "outcome {omega} appears in two blocks"
                    )));
                }
                block_of[omega] = b;
            }
        }
        if block_of.contains(&usize::MAX) {
            return Err(Error::InvalidFiniteSpace("blocks do not cover the space".into()));
        }
        Ok(Self { blocks, block_of })
    }

    /// Partition from per-outcome block labels.
    pub fn from_labels(labels: &[usize]) -> Result<Self> {
        let n_blocks = labels.iter().max().map_or(0, |&b| b + 1);
        let mut blocks = vec![Vec::new(); n_blocks];
        for (omega, &b) in labels.iter().enumerate() {
            blocks[b].push(omega);
        }
        Self::new(blocks, labels.len())
    }

    pub fn trivial(space_size: usize) -> Self {
        Self::new(vec![(0..space_size).collect()], space_size).expect("trivial partition")
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_of(&self, omega: usize) -> usize {
        self.block_of[omega]
    }

    /// Expands per-block values to a per-outcome vector.
    pub fn expand(&self, block_values: &[f64]) -> Vec<f64> {
        self.block_of.iter().map(|&b| block_values[b]).collect()
    }
}

/// Finite representation `rho(xi) = max_i (E_{P_i}[xi] - alpha_i)`.
#[derive(Debug, Clone)]
pub struct FiniteConvexOperator {
    space: FiniteSpace,
    densities: Vec<Vec<f64>>,
    penalties: Vec<f64>,
    p: f64,
    q: f64,
    proper: bool,
}

impl FiniteConvexOperator {
    /// Validates that each density has unit mean under the reference measure,
    /// that penalties are nonnegative with `min alpha_i = 0`, and that the
    /// exponent satisfies `1 < p <= 2`.
    pub fn new(
        space: FiniteSpace,
        densities: Vec<Vec<f64>>,
        penalties: Vec<f64>,
        p: f64,
    ) -> Result<Self> {
        if densities.is_empty() || densities.len() != penalties.len() {
            return Err(Error::InvalidFiniteSpace(format!(
                "{} densities with {} penalties",
                densities.len(),
                penalties.len()
            )));
        }
        if !(p > 1.0 && p <= 2.0) {
            return Err(Error::InvalidFiniteSpace(format!("exponent p = {p} must lie in (1, 2]")));
        }
        for (i, f) in densities.iter().enumerate() {
            if f.len() != space.len() {
                return Err(Error::InvalidFiniteSpace(format!(
                    "density {i} has {} entries on a space of size {}",
                    f.len(),
                    space.len()
                )));
            }
            if f.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::InvalidFiniteSpace(format!("density {i} has negative entries")));
            }
            let mean: f64 = f.iter().zip(space.prob()).map(|(f, p)| f * p).sum();
            if (mean - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidFiniteSpace(format!(
                    "density {i} has reference mean {mean}, expected 1"
                )));
            }
        }
        if penalties.iter().any(|&a| a < -1e-12) {
            return Err(Error::InvalidFiniteSpace("penalties must be nonnegative".into()));
        }
        let min_alpha = penalties.iter().cloned().fold(f64::INFINITY, f64::min);
        if min_alpha.abs() > 1e-9 {
            return Err(Error::InvalidFiniteSpace(format!(
                "min penalty is {min_alpha}; the operator must be normalized (min alpha = 0)"
            )));
        }
        let proper = densities.iter().all(|f| f.iter().all(|&v| v > 0.0));
        Ok(Self { space, densities, penalties, p, q: p / (p - 1.0), proper })
    }

    pub fn space(&self) -> &FiniteSpace {
        &self.space
    }

    pub fn densities(&self) -> &[Vec<f64>] {
        &self.densities
    }

    pub fn penalties(&self) -> &[f64] {
        &self.penalties
    }

    pub fn num_densities(&self) -> usize {
        self.densities.len()
    }

    pub fn exponents(&self) -> (f64, f64) {
        (self.p, self.q)
    }

    /// All representing densities are strictly positive (equivalent priors).
    pub fn is_proper(&self) -> bool {
        self.proper
    }

    fn expectation(&self, i: usize, values: &[f64]) -> f64 {
        self.densities[i]
            .iter()
            .zip(self.space.prob())
            .zip(values)
            .map(|((f, p), v)| f * p * v)
            .sum()
    }

    /// `rho(xi) = max_i (E_{P_i}[xi] - alpha_i)`.
    pub fn rho_eval(&self, xi: &[f64]) -> Result<f64> {
        if xi.len() != self.space.len() {
            return Err(Error::DimensionMismatch {
                field: "xi".into(),
                expected: format!("{}", self.space.len()),
                got: format!("{}", xi.len()),
            });
        }
        Ok((0..self.num_densities())
            .map(|i| self.expectation(i, xi) - self.penalties[i])
            .fold(f64::NEG_INFINITY, f64::max))
    }
}

/// Per-block sufficient statistics for the dual solve.
struct BlockStats {
    /// `mass[i][b] = E[f_i 1_b]`.
    mass: Vec<Vec<f64>>,
    /// `cross[i][b] = E[f_i xi 1_b]`.
    cross: Vec<Vec<f64>>,
    /// `quad[i] = E[f_i xi²]`.
    quad: Vec<f64>,
}

impl BlockStats {
    fn build(op: &FiniteConvexOperator, xi: &[f64], partition: &Partition) -> Self {
        let k = op.num_densities();
        let nb = partition.num_blocks();
        let mut mass = vec![vec![0.0; nb]; k];
        let mut cross = vec![vec![0.0; nb]; k];
        let mut quad = vec![0.0; k];
        for (i, f) in op.densities.iter().enumerate() {
            for (omega, (&fv, &pv)) in f.iter().zip(op.space.prob()).enumerate() {
                let b = partition.block_of(omega);
                let w = fv * pv;
                mass[i][b] += w;
                cross[i][b] += w * xi[omega];
                quad[i] += w * xi[omega] * xi[omega];
            }
        }
        Self { mass, cross, quad }
    }

    fn num_blocks(&self) -> usize {
        self.mass[0].len()
    }

    /// Blockwise conditional mean under the mixture `f_lambda`.
    fn eta(&self, lambda: &[f64], out: &mut [f64]) {
        for b in 0..self.num_blocks() {
            let mut num = 0.0;
            let mut den = 0.0;
            for (i, &l) in lambda.iter().enumerate() {
                num += l * self.cross[i][b];
                den += l * self.mass[i][b];
            }
            out[b] = num / den;
        }
    }

    /// `psi_i(eta) = E_{P_i}[(xi - eta)²] - alpha_i`.
    fn psi(&self, i: usize, eta: &[f64], alpha: &[f64]) -> f64 {
        let mut v = self.quad[i];
        for b in 0..self.num_blocks() {
            v += eta[b] * eta[b] * self.mass[i][b] - 2.0 * eta[b] * self.cross[i][b];
        }
        v - alpha[i]
    }

    /// Dual value and supergradient `psi_i(eta_lambda)`.
    fn h_and_grad(&self, lambda: &[f64], alpha: &[f64], eta_buf: &mut [f64], grad: &mut [f64]) -> f64 {
        self.eta(lambda, eta_buf);
        let mut h = 0.0;
        for i in 0..grad.len() {
            grad[i] = self.psi(i, eta_buf, alpha);
            h += lambda[i] * grad[i];
        }
        h
    }
}

/// Output of [`conditional_mmse`].
#[derive(Debug, Clone)]
pub struct MmseResult {
    /// Estimator per outcome (block-constant).
    pub eta_hat: Vec<f64>,
    /// Estimator per block.
    pub eta_blocks: Vec<f64>,
    /// `rho((xi - eta_hat)²)`, the certified objective value.
    pub value: f64,
    /// Maximizing mixture weights over the representing densities.
    pub lambda_star: Vec<f64>,
    /// `value - h(lambda_star) >= 0`; zero at an exact saddle.
    pub saddle_gap: f64,
    /// `L^{2p}` norm of the estimator and the restriction bound
    /// `(max_i E_{P_i}[|xi|^{2p}])^{1/(2p)}` it is compared against.
    pub eta_norm_2p: f64,
    pub restriction_bound: f64,
}

fn solve_from_starts(
    stats: &BlockStats,
    alpha: &[f64],
    starts: &[Vec<f64>],
) -> (Vec<f64>, f64) {
    let k = alpha.len();
    let nb = stats.num_blocks();
    let mut eta = vec![0.0; nb];
    let mut grad = vec![0.0; k];

    let mut best_lambda = vec![1.0 / k as f64; k];
    let mut best_h = f64::NEG_INFINITY;

    for start in starts {
        let mut lambda = project_simplex(start);
        let mut h = stats.h_and_grad(&lambda, alpha, &mut eta, &mut grad);
        let mut step = 1.0;
        for _ in 0..200 {
            let mut advanced = false;
            let mut t = step;
            for _ in 0..30 {
                let trial: Vec<f64> =
                    lambda.iter().zip(&grad).map(|(l, g)| l + t * g).collect();
                let trial = project_simplex(&trial);
                let mut trial_grad = vec![0.0; k];
                let ht = stats.h_and_grad(&trial, alpha, &mut eta, &mut trial_grad);
                if ht > h + 1e-18 {
                    let moved: f64 = trial
                        .iter()
                        .zip(&lambda)
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    lambda = trial;
                    h = ht;
                    grad = trial_grad;
                    step = t * 1.5;
                    advanced = true;
                    if moved < 1e-16 {
                        break;
                    }
                    break;
                }
                t *= 0.5;
            }
            if !advanced {
                break;
            }
        }
        if h > best_h {
            best_h = h;
            best_lambda = lambda;
        }
    }
    (best_lambda, best_h)
}

/// Newton equalization of `psi` over a candidate support; returns the weights
/// when the system converges inside the simplex face.
fn equalize_support(stats: &BlockStats, alpha: &[f64], support: &[usize]) -> Option<Vec<f64>> {
    let k = alpha.len();
    let s = support.len();
    let nb = stats.num_blocks();
    if s == 1 {
        let mut lambda = vec![0.0; k];
        lambda[support[0]] = 1.0;
        return Some(lambda);
    }
    let mut v = vec![1.0 / s as f64; s - 1];
    let mut eta = vec![0.0; nb];

    let assemble = |v: &[f64]| -> Option<Vec<f64>> {
        let head: f64 = 1.0 - v.iter().sum::<f64>();
        let mut lambda = vec![0.0; k];
        if head < -1e-9 || v.iter().any(|&x| x < -1e-9) {
            return None;
        }
        lambda[support[0]] = head.max(0.0);
        for (j, &idx) in support[1..].iter().enumerate() {
            lambda[idx] = v[j].max(0.0);
        }
        let total: f64 = lambda.iter().sum();
        for l in lambda.iter_mut() {
            *l /= total;
        }
        Some(lambda)
    };

    let residual = |v: &[f64], eta: &mut [f64]| -> Option<Vec<f64>> {
        let lambda = assemble(v)?;
        stats.eta(&lambda, eta);
        let base = stats.psi(support[0], eta, alpha);
        Some(
            support[1..]
                .iter()
                .map(|&i| stats.psi(i, eta, alpha) - base)
                .collect(),
        )
    };

    let mut r = residual(&v, &mut eta)?;
    for _ in 0..60 {
        let norm = r.iter().map(|x| x.abs()).fold(0.0, f64::max);
        if norm < 1e-13 {
            break;
        }
        // numerical Jacobian
        let dim = s - 1;
        let mut jac = nalgebra::DMatrix::<f64>::zeros(dim, dim);
        let h = 1e-7;
        for c in 0..dim {
            let mut vp = v.clone();
            vp[c] += h;
            let rp = residual(&vp, &mut eta)?;
            for row in 0..dim {
                jac[(row, c)] = (rp[row] - r[row]) / h;
            }
        }
        let rhs = nalgebra::DVector::from_column_slice(&r);
        let delta = jac.lu().solve(&rhs)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..25 {
            let vt: Vec<f64> = v.iter().zip(delta.iter()).map(|(a, d)| a - t * d).collect();
            if let Some(rt) = residual(&vt, &mut eta) {
                let nt = rt.iter().map(|x| x.abs()).fold(0.0, f64::max);
                if nt < norm {
                    v = vt;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    if r.iter().map(|x| x.abs()).fold(0.0, f64::max) > 1e-10 {
        return None;
    }
    assemble(&v)
}

fn certify(
    op: &FiniteConvexOperator,
    stats: &BlockStats,
    lambda: &[f64],
) -> (Vec<f64>, f64, f64) {
    let nb = stats.num_blocks();
    let k = op.num_densities();
    let mut eta = vec![0.0; nb];
    stats.eta(lambda, &mut eta);
    let value = (0..k)
        .map(|i| stats.psi(i, &eta, &op.penalties))
        .fold(f64::NEG_INFINITY, f64::max);
    let h: f64 = (0..k).map(|i| lambda[i] * stats.psi(i, &eta, &op.penalties)).sum();
    (eta, value, value - h)
}

fn solve_inner(
    op: &FiniteConvexOperator,
    xi: &[f64],
    partition: &Partition,
    starts: &[Vec<f64>],
) -> Result<MmseResult> {
    if !op.is_proper() {
        let index = op
            .densities
            .iter()
            .position(|f| f.iter().any(|&v| v <= 0.0))
            .unwrap_or(0);
        return Err(Error::NotProper { index });
    }
    if xi.len() != op.space.len() {
        return Err(Error::DimensionMismatch {
            field: "xi".into(),
            expected: format!("{}", op.space.len()),
            got: format!("{}", xi.len()),
        });
    }
    let stats = BlockStats::build(op, xi, partition);
    let k = op.num_densities();

    let (pga_lambda, _) = solve_from_starts(&stats, &op.penalties, starts);
    let (mut eta, mut value, mut gap) = certify(op, &stats, &pga_lambda);
    let mut lambda = pga_lambda.clone();

    // active-set polish: equalize psi over supports suggested by the PGA
    // solution, largest psi first
    if gap > 1e-13 {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| {
            stats
                .psi(b, &eta, &op.penalties)
                .partial_cmp(&stats.psi(a, &eta, &op.penalties))
                .unwrap()
        });
        let mut supports: Vec<Vec<usize>> = (1..=k).map(|j| order[..j].to_vec()).collect();
        let pga_support: Vec<usize> = (0..k).filter(|&i| pga_lambda[i] > 1e-8).collect();
        if !pga_support.is_empty() {
            supports.push(pga_support);
        }
        for support in supports {
            if let Some(cand) = equalize_support(&stats, &op.penalties, &support) {
                let (eta_c, value_c, gap_c) = certify(op, &stats, &cand);
                if gap_c < gap - 1e-15 {
                    eta = eta_c;
                    value = value_c;
                    gap = gap_c;
                    lambda = cand;
                }
            }
        }
    }

    // deeper PGA rescue for stubborn instances
    if gap > 1e-9 {
        let mut rng = ChaCha8Rng::seed_from_u64(0xE7A_715);
        let extra: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..k).map(|_| rng.random::<f64>()).collect())
            .collect();
        let (resc, _) = solve_from_starts(&stats, &op.penalties, &extra);
        let (eta_c, value_c, gap_c) = certify(op, &stats, &resc);
        if gap_c < gap {
            eta = eta_c;
            value = value_c;
            gap = gap_c;
            lambda = resc;
        }
    }

    // restriction-bound diagnostics
    let two_p = 2.0 * op.p;
    let m_bound = op
        .densities
        .iter()
        .map(|f| {
            f.iter()
                .zip(op.space.prob())
                .zip(xi)
                .map(|((fv, pv), x)| fv * pv * x.abs().powf(two_p))
                .sum::<f64>()
        })
        .fold(0.0f64, f64::max)
        .powf(1.0 / two_p);
    let eta_hat = partition.expand(&eta);
    let eta_norm = eta_hat
        .iter()
        .zip(op.space.prob())
        .map(|(e, p)| p * e.abs().powf(two_p))
        .sum::<f64>()
        .powf(1.0 / two_p);

    Ok(MmseResult {
        eta_hat,
        eta_blocks: eta,
        value,
        lambda_star: lambda,
        saddle_gap: gap,
        eta_norm_2p: eta_norm,
        restriction_bound: m_bound,
    })
}

/// Dual objective `h(lambda) = E_{f_lambda}[(xi - eta_lambda)²] - <lambda, alpha>`
/// for a simplex weight vector; concave in `lambda`.
pub fn dual_objective(
    op: &FiniteConvexOperator,
    xi: &[f64],
    partition: &Partition,
    lambda: &[f64],
) -> f64 {
    let stats = BlockStats::build(op, xi, partition);
    let mut eta = vec![0.0; partition.num_blocks()];
    stats.eta(lambda, &mut eta);
    (0..op.num_densities()).map(|i| lambda[i] * stats.psi(i, &eta, &op.penalties)).sum()
}

fn default_starts(k: usize) -> Vec<Vec<f64>> {
    let mut starts = vec![vec![1.0 / k as f64; k]];
    for i in 0..k {
        let mut v = vec![0.0; k];
        v[i] = 1.0;
        starts.push(v);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(777);
    for _ in 0..5 {
        starts.push((0..k).map(|_| rng.random::<f64>()).collect());
    }
    starts
}

/// Solves the conditional MMSE problem; requires a proper operator.
pub fn conditional_mmse(
    op: &FiniteConvexOperator,
    xi: &[f64],
    partition: &Partition,
) -> Result<MmseResult> {
    solve_inner(op, xi, partition, &default_starts(op.num_densities()))
}

/// Exhaustive grid minimizer of `rho((xi - eta)²)` over block values, with
/// two refinement rounds. Supports at most three blocks.
pub fn brute_force_mmse(
    op: &FiniteConvexOperator,
    xi: &[f64],
    partition: &Partition,
    points_per_dim: usize,
) -> Result<(Vec<f64>, f64, f64)> {
    let nb = partition.num_blocks();
    if nb > 3 {
        return Err(Error::TooManyBlocks { max: 3, got: nb });
    }
    let pts = points_per_dim.max(5);
    let stats = BlockStats::build(op, xi, partition);
    let k = op.num_densities();
    let phi = |eta: &[f64]| -> f64 {
        (0..k)
            .map(|i| stats.psi(i, eta, &op.penalties))
            .fold(f64::NEG_INFINITY, f64::max)
    };

    let lo = xi.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut centers = vec![0.5 * (lo + hi); nb];
    let mut half = 0.5 * (hi - lo).max(1e-12);

    let mut best_eta = centers.clone();
    let mut best_val = f64::INFINITY;
    let mut spacing = 0.0;
    for _round in 0..3 {
        spacing = 2.0 * half / (pts - 1) as f64;
        let total = pts.pow(nb as u32);
        let mut eta = vec![0.0; nb];
        for flat in 0..total {
            let mut idx = flat;
            for b in 0..nb {
                let j = idx % pts;
                idx /= pts;
                eta[b] = centers[b] - half + spacing * j as f64;
            }
            let v = phi(&eta);
            if v < best_val {
                best_val = v;
                best_eta = eta.clone();
            }
        }
        centers = best_eta.clone();
        half = 1.5 * spacing;
    }
    Ok((best_eta, best_val, spacing))
}

/// Saddle-inequality audit of a solved instance.
#[derive(Debug, Clone)]
pub struct SaddleCheck {
    /// Max of `psi_i(eta_hat) - value` over representing densities
    /// (nonpositive up to roundoff).
    pub sup_side_violation: f64,
    /// Max of `value - L(eta, lambda*)` over random block values
    /// (nonpositive at an exact saddle).
    pub inf_side_violation: f64,
    /// Max blockwise distance between `eta_hat` and the conditional mean
    /// under the mixture `lambda*`.
    pub conditional_mean_mismatch: f64,
}

pub fn saddle_check(
    op: &FiniteConvexOperator,
    xi: &[f64],
    partition: &Partition,
    result: &MmseResult,
    n_random_eta: usize,
    seed: u64,
) -> SaddleCheck {
    let stats = BlockStats::build(op, xi, partition);
    let k = op.num_densities();
    let nb = partition.num_blocks();

    let sup_side_violation = (0..k)
        .map(|i| stats.psi(i, &result.eta_blocks, &op.penalties) - result.value)
        .fold(f64::NEG_INFINITY, f64::max);

    let lagrangian = |eta: &[f64]| -> f64 {
        (0..k).map(|i| result.lambda_star[i] * stats.psi(i, eta, &op.penalties)).sum()
    };
    let lo = xi.iter().cloned().fold(f64::INFINITY, f64::min) - 0.5;
    let hi = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 0.5;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inf_side_violation = f64::NEG_INFINITY;
    for _ in 0..n_random_eta {
        let eta: Vec<f64> = (0..nb).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
        inf_side_violation = inf_side_violation.max(result.value - lagrangian(&eta));
    }

    let mut eta_mix = vec![0.0; nb];
    stats.eta(&result.lambda_star, &mut eta_mix);
    let conditional_mean_mismatch = eta_mix
        .iter()
        .zip(&result.eta_blocks)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);

    SaddleCheck { sup_side_violation, inf_side_violation, conditional_mean_mismatch }
}

/// Witness of a stability failure.
#[derive(Debug, Clone)]
pub struct StabilityWitness {
    pub density_index: usize,
    /// Distance of `f / E[f|C]` from the hull of the representing densities.
    pub residual: f64,
}

#[derive(Debug, Clone)]
pub struct StabilityReport {
    pub stable: bool,
    pub witnesses: Vec<StabilityWitness>,
}

fn conditional_quotient(
    space: &FiniteSpace,
    partition: &Partition,
    density: &[f64],
) -> Vec<f64> {
    let nb = partition.num_blocks();
    let mut mass = vec![0.0; nb];
    let mut pmass = vec![0.0; nb];
    for (omega, (&f, &p)) in density.iter().zip(space.prob()).enumerate() {
        mass[partition.block_of(omega)] += f * p;
        pmass[partition.block_of(omega)] += p;
    }
    density
        .iter()
        .enumerate()
        .map(|(omega, &f)| {
            let b = partition.block_of(omega);
            f / (mass[b] / pmass[b])
        })
        .collect()
}

/// Checks `f / E[f|C]` membership in the hull of the representing densities
/// for every density; failures come with the offending index and residual.
pub fn check_stability(op: &FiniteConvexOperator, partition: &Partition) -> StabilityReport {
    let mut witnesses = Vec::new();
    for (i, f) in op.densities.iter().enumerate() {
        let quotient = conditional_quotient(&op.space, partition, f);
        let (_, residual) = simplex_least_squares(&op.densities, &quotient, 4000);
        if residual > 1e-8 {
            witnesses.push(StabilityWitness { density_index: i, residual });
        }
    }
    StabilityReport { stable: witnesses.is_empty(), witnesses }
}

/// Closes a density set under `f -> f / E[f|C]` up to a fixed depth;
/// fixture builder for stability tests.
pub fn stabilize(
    space: &FiniteSpace,
    partition: &Partition,
    densities: &[Vec<f64>],
    depth: usize,
) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = densities.to_vec();
    for _ in 0..depth {
        let mut added = false;
        for f in out.clone() {
            let quotient = conditional_quotient(space, partition, &f);
            let is_new = out.iter().all(|g| {
                g.iter().zip(&quotient).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) > 1e-10
            });
            if is_new {
                out.push(quotient);
                added = true;
            }
        }
        if !added {
            break;
        }
    }
    out
}

/// Solves from `n_restarts` random simplex starts and returns the largest
/// pairwise sup-distance between the recovered estimators.
pub fn uniqueness_probe(
    op: &FiniteConvexOperator,
    xi: &[f64],
    partition: &Partition,
    n_restarts: usize,
    seed: u64,
) -> Result<f64> {
    let k = op.num_densities();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut etas: Vec<Vec<f64>> = Vec::with_capacity(n_restarts);
    for _ in 0..n_restarts {
        let start: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
        let result = solve_inner(op, xi, partition, &[start])?;
        etas.push(result.eta_blocks);
    }
    let mut worst = 0.0f64;
    for i in 0..etas.len() {
        for j in (i + 1)..etas.len() {
            let d = etas[i]
                .iter()
                .zip(&etas[j])
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            worst = worst.max(d);
        }
    }
    Ok(worst)
}

/// Violations found by the estimator-property suite; each entry is a
/// max-violation magnitude (0 = exact).
#[derive(Debug, Clone)]
pub struct PropertyReport {
    /// (i) `C1 <= xi <= C2` implies `C1 <= eta_hat <= C2`.
    pub bound_violation: f64,
    /// (ii) estimating `-xi` negates the estimator.
    pub odd_symmetry_violation: f64,
    /// (iii) translating by a block-constant shifts the estimator.
    pub translation_violation: f64,
    /// (iv) constancy of the estimator for conditionally independent
    /// payoffs; `None` when the supplied payoff is not independent of the
    /// partition under every prior.
    pub independence_violation: Option<f64>,
}

/// Runs the basic-property suite on seeded random payoffs; `xi_independent`
/// optionally supplies a payoff that is independent of the partition under
/// every representing prior (property iv).
pub fn property_suite(
    op: &FiniteConvexOperator,
    partition: &Partition,
    seed: u64,
    xi_independent: Option<&[f64]>,
) -> Result<PropertyReport> {
    let size = op.space.len();
    let nb = partition.num_blocks();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..size).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect()
    };

    let xi = draw(&mut rng);
    let base = conditional_mmse(op, &xi, partition)?;

    // (i) bounds
    let lo = xi.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = xi.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let bound_violation = base
        .eta_blocks
        .iter()
        .map(|&e| (lo - e).max(e - hi).max(0.0))
        .fold(0.0, f64::max);

    // (ii) odd symmetry
    let neg_xi: Vec<f64> = xi.iter().map(|v| -v).collect();
    let neg = conditional_mmse(op, &neg_xi, partition)?;
    let odd_symmetry_violation = base
        .eta_blocks
        .iter()
        .zip(&neg.eta_blocks)
        .map(|(a, b)| (a + b).abs())
        .fold(0.0, f64::max);

    // (iii) translation by a block-constant
    let shift_blocks: Vec<f64> = (0..nb).map(|_| 5.0 * rng.random::<f64>() - 2.5).collect();
    let shift = partition.expand(&shift_blocks);
    let shifted_xi: Vec<f64> = xi.iter().zip(&shift).map(|(a, b)| a + b).collect();
    let shifted = conditional_mmse(op, &shifted_xi, partition)?;
    let translation_violation = shifted
        .eta_blocks
        .iter()
        .zip(&base.eta_blocks)
        .zip(&shift_blocks)
        .map(|((s, b), d)| (s - b - d).abs())
        .fold(0.0, f64::max);

    // (iv) independence, when a structured payoff is supplied and actually
    // independent (first two conditional moments equal across blocks under
    // every prior)
    let independence_violation = match xi_independent {
        None => None,
        Some(xi_iv) => {
            let stats = BlockStats::build(op, xi_iv, partition);
            let mut independent = true;
            for i in 0..op.num_densities() {
                let means: Vec<f64> =
                    (0..nb).map(|b| stats.cross[i][b] / stats.mass[i][b]).collect();
                let spread =
                    means.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v))
                        - means.iter().fold(f64::INFINITY, |a, &v| a.min(v));
                if spread > 1e-10 {
                    independent = false;
                }
            }
            if independent {
                let res = conditional_mmse(op, xi_iv, partition)?;
                let mean = res.eta_blocks.iter().sum::<f64>() / nb as f64;
                Some(
                    res.eta_blocks
                        .iter()
                        .map(|e| (e - mean).abs())
                        .fold(0.0, f64::max),
                )
            } else {
                None
            }
        }
    };

    Ok(PropertyReport {
        bound_violation,
        odd_symmetry_violation,
        translation_violation,
        independence_violation,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct MomentBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

/// Numerically verifies the Hölder chain bounding the prior-family moments:
/// `sup_i E_{P_i}[|xi|^{gamma p / 2}] <= max_i ‖f_i‖_q · ‖ |xi|^{gamma p/2} ‖_p`.
pub fn moment_bound_check(op: &FiniteConvexOperator, xi: &[f64], gamma: f64) -> MomentBound {
    assert!(gamma >= 2.0);
    let (p, q) = op.exponents();
    let power = gamma * p / 2.0;
    let lifted: Vec<f64> = xi.iter().map(|v| v.abs().powf(power)).collect();
    let lhs = (0..op.num_densities())
        .map(|i| op.expectation(i, &lifted))
        .fold(0.0f64, f64::max);
    let f_norm_q = op
        .densities
        .iter()
        .map(|f| {
            f.iter()
                .zip(op.space.prob())
                .map(|(fv, pv)| pv * fv.powf(q))
                .sum::<f64>()
                .powf(1.0 / q)
        })
        .fold(0.0f64, f64::max);
    let lifted_norm_p = lifted
        .iter()
        .zip(op.space.prob())
        .map(|(v, pv)| pv * v.powf(p))
        .sum::<f64>()
        .powf(1.0 / p);
    let rhs = f_norm_q * lifted_norm_p;
    MomentBound { lhs, rhs, holds: lhs <= rhs * (1.0 + 1e-12) + 1e-12 }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn two_point_op() -> FiniteConvexOperator {
        let space = FiniteSpace::new(vec![0.5, 0.5]).unwrap();
        FiniteConvexOperator::new(
            space,
            vec![vec![1.0, 1.0], vec![1.5, 0.5]],
            vec![0.0, 0.1],
            2.0,
        )
        .unwrap()
    }

    #[test]
    fn rho_eval_constant_invariance() {
        let op = two_point_op();
        assert_relative_eq!(op.rho_eval(&[3.0, 3.0]).unwrap(), 3.0, epsilon = 1e-12);
    }

    #[test]
    fn rho_eval_two_point_hand_value() {
        let op = two_point_op();
        assert_relative_eq!(op.rho_eval(&[1.0, 0.0]).unwrap(), 0.65, epsilon = 1e-12);
    }

    #[test]
    fn rho_eval_single_reference_density_is_plain_expectation() {
        let space = FiniteSpace::new(vec![0.25, 0.75]).unwrap();
        let op =
            FiniteConvexOperator::new(space, vec![vec![1.0, 1.0]], vec![0.0], 1.5).unwrap();
        assert_relative_eq!(op.rho_eval(&[2.0, -1.0]).unwrap(), -0.25, epsilon = 1e-14);
    }

    #[test]
    fn single_density_mmse_is_the_conditional_mean() {
        let space = FiniteSpace::new(vec![0.2, 0.3, 0.1, 0.4]).unwrap();
        let op = FiniteConvexOperator::new(
            space,
            vec![vec![1.0, 1.0, 1.0, 1.0]],
            vec![0.0],
            2.0,
        )
        .unwrap();
        let partition = Partition::from_labels(&[0, 0, 1, 1]).unwrap();
        let xi = vec![1.0, 2.0, 3.0, -1.0];
        let res = conditional_mmse(&op, &xi, &partition).unwrap();
        assert_relative_eq!(res.eta_blocks[0], (0.2 + 0.3 * 2.0) / 0.5, epsilon = 1e-10);
        assert_relative_eq!(res.eta_blocks[1], (0.1 * 3.0 - 0.4) / 0.5, epsilon = 1e-10);
        assert!(res.saddle_gap.abs() <= 1e-10);
    }

    #[test]
    fn block_constant_payoff_is_estimated_exactly() {
        let op = two_point_op();
        let partition = Partition::from_labels(&[0, 1]).unwrap();
        let xi = vec![2.0, -1.0];
        let res = conditional_mmse(&op, &xi, &partition).unwrap();
        assert_relative_eq!(res.eta_hat[0], 2.0, epsilon = 1e-9);
        assert_relative_eq!(res.eta_hat[1], -1.0, epsilon = 1e-9);
        assert!(res.value.abs() <= 1e-10);
    }

    #[test]
    fn two_point_trivial_partition_matches_brute_force_and_hand_solution() {
        let op = two_point_op();
        let partition = Partition::trivial(2);
        let xi = vec![1.0, 0.0];
        let res = conditional_mmse(&op, &xi, &partition).unwrap();
        let (bf_eta, bf_val, resolution) = brute_force_mmse(&op, &xi, &partition, 41).unwrap();
        assert!((res.eta_blocks[0] - bf_eta[0]).abs() <= 10.0 * resolution);
        assert!((res.value - bf_val).abs() <= 10.0 * resolution);
        // the unpenalized reference density dominates at its own minimizer
        assert_relative_eq!(res.eta_blocks[0], 0.5, epsilon = 1e-8);
        assert_relative_eq!(res.value, 0.25, epsilon = 1e-10);
        assert!(res.saddle_gap <= 1e-10);
    }

    #[test]
    fn non_proper_operator_is_rejected() {
        let space = FiniteSpace::new(vec![0.5, 0.5]).unwrap();
        let op = FiniteConvexOperator::new(
            space,
            vec![vec![2.0, 0.0]],
            vec![0.0],
            2.0,
        )
        .unwrap();
        let partition = Partition::trivial(2);
        assert!(matches!(
            conditional_mmse(&op, &[1.0, 0.0], &partition),
            Err(Error::NotProper { index: 0 })
        ));
        assert!(matches!(
            uniqueness_probe(&op, &[1.0, 0.0], &partition, 3, 1),
            Err(Error::NotProper { .. })
        ));
    }

    #[test]
    fn value_equals_rho_of_squared_residual() {
        let op = two_point_op();
        let partition = Partition::trivial(2);
        let xi = vec![1.0, 0.0];
        let res = conditional_mmse(&op, &xi, &partition).unwrap();
        let residual_sq: Vec<f64> =
            xi.iter().zip(&res.eta_hat).map(|(x, e)| (x - e) * (x - e)).collect();
        let rho = op.rho_eval(&residual_sq).unwrap();
        assert!((res.value - rho).abs() <= 1e-8);
    }

    #[test]
    fn perturbing_the_estimator_increases_the_sup_side() {
        let op = two_point_op();
        let partition = Partition::trivial(2);
        let xi = vec![1.0, 0.0];
        let res = conditional_mmse(&op, &xi, &partition).unwrap();
        let bumped: Vec<f64> = res.eta_hat.iter().map(|e| e + 0.01).collect();
        let residual_sq: Vec<f64> =
            xi.iter().zip(&bumped).map(|(x, e)| (x - e) * (x - e)).collect();
        assert!(op.rho_eval(&residual_sq).unwrap() > res.value + 1e-6);
    }

    #[test]
    fn reference_singleton_is_stable() {
        let space = FiniteSpace::new(vec![0.3, 0.3, 0.4]).unwrap();
        let op = FiniteConvexOperator::new(
            space,
            vec![vec![1.0, 1.0, 1.0]],
            vec![0.0],
            2.0,
        )
        .unwrap();
        let partition = Partition::from_labels(&[0, 1, 1]).unwrap();
        assert!(check_stability(&op, &partition).stable);
    }

    #[test]
    fn stabilized_fixture_passes_and_generic_pair_fails() {
        let space = FiniteSpace::new(vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        let partition = Partition::from_labels(&[0, 0, 1, 1]).unwrap();
        // the second density has non-unit block means, so its conditional
        // quotient leaves the pair's hull
        let raw = vec![
            vec![1.0, 1.0, 1.0, 1.0],
            vec![2.0, 1.2, 0.4, 0.4],
        ];
        let generic = FiniteConvexOperator::new(
            space.clone(),
            raw.clone(),
            vec![0.0, 0.0],
            2.0,
        )
        .unwrap();
        let report = check_stability(&generic, &partition);
        assert!(!report.stable);
        assert!(!report.witnesses.is_empty());

        let closed = stabilize(&space, &partition, &raw, 6);
        let penalties = vec![0.0; closed.len()];
        let stable_op = FiniteConvexOperator::new(space, closed, penalties, 2.0).unwrap();
        assert!(check_stability(&stable_op, &partition).stable);
    }

    #[test]
    fn uniqueness_probe_is_tight_on_proper_instances() {
        let op = two_point_op();
        let partition = Partition::trivial(2);
        let d = uniqueness_probe(&op, &[1.0, 0.0], &partition, 20, 99).unwrap();
        assert!(d <= 1e-6, "spread {d}");
    }

    #[test]
    fn property_suite_zero_payoff_is_exact() {
        let op = two_point_op();
        let partition = Partition::from_labels(&[0, 1]).unwrap();
        let res = conditional_mmse(&op, &[0.0, 0.0], &partition).unwrap();
        assert!(res.eta_hat.iter().all(|&e| e.abs() <= 1e-10));
        let rep = property_suite(&op, &partition, 5, None).unwrap();
        assert!(rep.bound_violation <= 1e-8);
        assert!(rep.odd_symmetry_violation <= 1e-8);
        assert!(rep.translation_violation <= 1e-8);
    }

    #[test]
    fn independence_fixture_yields_constant_estimator() {
        // product space {a1, a2} x {b1, b2}; partition by the first
        // coordinate; payoff depends only on the second; priors are product
        // measures
        let space = FiniteSpace::new(vec![0.24, 0.36, 0.16, 0.24]).unwrap();
        // outcomes ordered (a1,b1), (a1,b2), (a2,b1), (a2,b2) with
        // P(a1) = 0.6, P(b1) = 0.4
        let d1 = vec![1.0, 1.0, 1.0, 1.0];
        // the second prior reweights only the second coordinate, so the
        // block marginals are untouched and independence survives mixing
        let rb = [1.25, 5.0 / 6.0];
        let d2 = vec![rb[0], rb[1], rb[0], rb[1]];
        let op = FiniteConvexOperator::new(space, vec![d1, d2], vec![0.0, 0.05], 2.0).unwrap();
        let partition = Partition::from_labels(&[0, 0, 1, 1]).unwrap();
        let xi_iv = vec![1.0, -2.0, 1.0, -2.0];
        let rep = property_suite(&op, &partition, 11, Some(&xi_iv)).unwrap();
        let iv = rep.independence_violation.expect("fixture is independent");
        assert!(iv <= 1e-8, "independence violation {iv}");
    }

    #[test]
    fn moment_bound_reference_singleton_is_tight_at_one() {
        let space = FiniteSpace::new(vec![0.5, 0.5]).unwrap();
        let op =
            FiniteConvexOperator::new(space, vec![vec![1.0, 1.0]], vec![0.0], 1.5).unwrap();
        let mb = moment_bound_check(&op, &[1.0, 1.0], 2.0);
        assert!(mb.holds);
        assert_relative_eq!(mb.lhs, 1.0, epsilon = 1e-12);
        assert_relative_eq!(mb.rhs, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn moment_bound_holds_on_random_instances() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31415);
        for _ in 0..100 {
            let size = 2 + rng.random_range(0..6);
            let mut prob: Vec<f64> = (0..size).map(|_| 0.1 + rng.random::<f64>()).collect();
            let total: f64 = prob.iter().sum();
            prob.iter_mut().for_each(|p| *p /= total);
            let k = 1 + rng.random_range(0..3);
            let densities: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let raw: Vec<f64> =
                        (0..size).map(|_| 0.05 + 2.0 * rng.random::<f64>()).collect();
                    let mean: f64 = raw.iter().zip(&prob).map(|(f, p)| f * p).sum();
                    raw.iter().map(|f| f / mean).collect()
                })
                .collect();
            let op = FiniteConvexOperator::new(
                FiniteSpace::new(prob).unwrap(),
                densities,
                vec![0.0; k],
                1.2 + 0.8 * rng.random::<f64>(),
            )
            .unwrap();
            let xi: Vec<f64> = (0..size).map(|_| 4.0 * rng.random::<f64>() - 2.0).collect();
            let gamma = 2.0 + 3.0 * rng.random::<f64>();
            let mb = moment_bound_check(&op, &xi, gamma);
            assert!(mb.holds, "lhs {} rhs {}", mb.lhs, mb.rhs);
        }
    }

    #[test]
    fn moment_bound_scales_homogeneously() {
        let op = two_point_op();
        let gamma = 3.0;
        let xi = vec![0.7, -1.3];
        let a = moment_bound_check(&op, &xi, gamma);
        let scaled: Vec<f64> = xi.iter().map(|v| 2.0 * v).collect();
        let b = moment_bound_check(&op, &scaled, gamma);
        assert!(a.holds && b.holds);
        let factor = 2.0f64.powf(gamma * op.exponents().0 / 2.0);
        assert_relative_eq!(b.lhs, factor * a.lhs, epsilon = 1e-10);
        assert_relative_eq!(b.rhs, factor * a.rhs, epsilon = 1e-10);
    }

    #[test]
    fn brute_force_value_is_nonincreasing_under_refinement() {
        let op = two_point_op();
        let partition = Partition::trivial(2);
        let coarse = brute_force_mmse(&op, &[1.0, 0.0], &partition, 11).unwrap();
        let fine = brute_force_mmse(&op, &[1.0, 0.0], &partition, 41).unwrap();
        assert!(fine.1 <= coarse.1 + 1e-14);
    }

    #[test]
    fn too_many_blocks_is_rejected() {
        let space = FiniteSpace::new(vec![0.25; 4]).unwrap();
        let op = FiniteConvexOperator::new(
            space,
            vec![vec![1.0; 4]],
            vec![0.0],
            2.0,
        )
        .unwrap();
        let partition = Partition::from_labels(&[0, 1, 2, 3]).unwrap();
        assert!(matches!(
            brute_force_mmse(&op, &[1.0, 0.0, 2.0, -1.0], &partition, 11),
            Err(Error::TooManyBlocks { max: 3, got: 4 })
        ));
    }
}
