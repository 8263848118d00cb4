//! Projection and projected-gradient utilities used by the saddle solvers.

/// Euclidean projection onto the probability simplex.
///
/// Standard sort-based algorithm; `v` may be any real vector.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let n = v.len();
    assert!(n > 0);
    let mut u: Vec<f64> = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut rho = 0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cumsum += ui;
        let t = (cumsum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            rho = i + 1;
            theta = t;
        }
    }
    let _ = rho;
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

pub fn project_box(x: &mut [f64], lo: f64, hi: f64) {
    for v in x.iter_mut() {
        *v = v.clamp(lo, hi);
    }
}

fn norm2(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn project_ball(x: &mut [f64], radius: f64) {
    let n = norm2(x);
    if n > radius {
        let s = radius / n;
        for v in x.iter_mut() {
            *v *= s;
        }
    }
}

/// Dykstra's alternating projection onto `[-box_r, box_r]^d ∩ {‖x‖₂ ≤ ball_r}`.
pub fn project_box_ball(x: &[f64], box_r: f64, ball_r: Option<f64>) -> Vec<f64> {
    let mut y = x.to_vec();
    let Some(ball_r) = ball_r else {
        project_box(&mut y, -box_r, box_r);
        return y;
    };
    let d = x.len();
    let mut p = vec![0.0; d];
    let mut q = vec![0.0; d];
    for _ in 0..64 {
        let before = y.clone();
        // box step
        let mut z: Vec<f64> = (0..d).map(|i| y[i] + p[i]).collect();
        project_box(&mut z, -box_r, box_r);
        for i in 0..d {
            p[i] = y[i] + p[i] - z[i];
        }
        // ball step
        let mut w: Vec<f64> = (0..d).map(|i| z[i] + q[i]).collect();
        project_ball(&mut w, ball_r);
        for i in 0..d {
            q[i] = z[i] + q[i] - w[i];
        }
        y = w;
        let drift: f64 = y.iter().zip(&before).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        if drift < 1e-15 {
            break;
        }
    }
    y
}

/// Projected gradient ascent of a concave objective over a box/ball
/// intersection, with Armijo backtracking.
///
/// `f_grad` returns the objective value and writes the gradient; it must
/// return `-inf` outside the domain (the projection keeps iterates inside).
pub fn pga_max<F>(
    f_grad: &F,
    start: &[f64],
    box_r: f64,
    ball_r: Option<f64>,
    max_iters: usize,
) -> (Vec<f64>, f64)
where
    F: Fn(&[f64], &mut [f64]) -> f64,
{
    let d = start.len();
    let mut x = project_box_ball(start, box_r, ball_r.map(|r| r * (1.0 - 1e-12)));
    let mut grad = vec![0.0; d];
    let mut fx = f_grad(&x, &mut grad);
    let mut step = 1.0;
    for _ in 0..max_iters {
        let mut improved = false;
        let mut t = step;
        for _ in 0..40 {
            let trial: Vec<f64> = (0..d).map(|i| x[i] + t * grad[i]).collect();
            let trial = project_box_ball(&trial, box_r, ball_r.map(|r| r * (1.0 - 1e-12)));
            let mut g2 = vec![0.0; d];
            let ft = f_grad(&trial, &mut g2);
            if ft > fx + 1e-18 {
                let moved: f64 =
                    trial.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                x = trial;
                fx = ft;
                grad = g2;
                step = t * 1.5;
                improved = true;
                if moved < 1e-15 {
                    return (x, fx);
                }
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (x, fx)
}

/// Least squares over the simplex: minimizes `‖A λ − target‖₂²` with
/// `λ` in the probability simplex. Returns `(λ, residual₂)`.
///
/// Accelerated projected gradient with the Lipschitz step `1/L`; exact
/// enough for feasibility checks at the scale used here.
pub fn simplex_least_squares(columns: &[Vec<f64>], target: &[f64], iters: usize) -> (Vec<f64>, f64) {
    let k = columns.len();
    let n = target.len();
    assert!(k > 0);
    assert!(columns.iter().all(|c| c.len() == n));

    // Lipschitz bound: trace of the Gram matrix.
    let l: f64 = columns.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().max(1e-300);

    let residual = |lam: &[f64]| -> Vec<f64> {
        let mut r = vec![0.0; n];
        for (j, c) in columns.iter().enumerate() {
            for i in 0..n {
                r[i] += lam[j] * c[i];
            }
        }
        for i in 0..n {
            r[i] -= target[i];
        }
        r
    };

    let mut lam = vec![1.0 / k as f64; k];
    let mut z = lam.clone();
    let mut t_acc = 1.0f64;
    for _ in 0..iters {
        let r = residual(&z);
        let mut grad = vec![0.0; k];
        for (j, c) in columns.iter().enumerate() {
            grad[j] = 2.0 * c.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
        }
        let stepped: Vec<f64> = (0..k).map(|j| z[j] - grad[j] / (2.0 * l)).collect();
        let lam_next = project_simplex(&stepped);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t_acc * t_acc).sqrt());
        z = (0..k)
            .map(|j| lam_next[j] + (t_acc - 1.0) / t_next * (lam_next[j] - lam[j]))
            .collect();
        lam = lam_next;
        t_acc = t_next;
    }
    let r = residual(&lam);
    (lam, norm2(&r))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn simplex_projection_of_interior_point_is_identity() {
        let v = vec![0.2, 0.3, 0.5];
        let p = project_simplex(&v);
        for (a, b) in p.iter().zip(&v) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn simplex_projection_sums_to_one() {
        let p = project_simplex(&[3.0, -1.0, 0.2]);
        assert_relative_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        assert!(p.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn box_ball_projection_lands_in_both_sets() {
        let y = project_box_ball(&[2.0, 2.0], 1.5, Some(1.8));
        assert!(y.iter().all(|v| v.abs() <= 1.5 + 1e-12));
        assert!(norm2(&y) <= 1.8 + 1e-10);
    }

    #[test]
    fn pga_finds_quadratic_peak_inside_box() {
        let f = |x: &[f64], g: &mut [f64]| {
            g[0] = -2.0 * (x[0] - 0.3);
            g[1] = -2.0 * (x[1] + 0.1);
            -(x[0] - 0.3).powi(2) - (x[1] + 0.1).powi(2)
        };
        let (x, v) = pga_max(&f, &[0.9, -0.9], 1.0, None, 200);
        assert_relative_eq!(x[0], 0.3, epsilon = 1e-7);
        assert_relative_eq!(x[1], -0.1, epsilon = 1e-7);
        assert!(v > -1e-13);
    }

    #[test]
    fn simplex_ls_recovers_exact_mixture() {
        let cols = vec![vec![1.0, 0.0, 1.0], vec![0.0, 1.0, 1.0]];
        let target = vec![0.25, 0.75, 1.0];
        let (lam, res) = simplex_least_squares(&cols, &target, 3000);
        assert!(res < 1e-8, "residual {res}");
        assert_relative_eq!(lam[0], 0.25, epsilon = 1e-6);
    }
}
