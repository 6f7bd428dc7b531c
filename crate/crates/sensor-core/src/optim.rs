//! Limited-memory BFGS with Armijo backtracking.
//!
//! All local solvers in this crate minimize a smooth function of a few
//! hundred real parameters whose gradient costs about as much as the
//! function itself. L-BFGS with a short history and a backtracking line
//! search is the standard tool for that regime. Curvature pairs that would
//! break positive definiteness (possible because Armijo alone does not
//! enforce the Wolfe curvature condition) are skipped.

/// Termination and line-search settings.
#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Stop (converged) when the gradient max-norm falls below this.
    pub grad_tol: f64,
    /// Stop (converged) after two consecutive relative decreases below this.
    pub f_tol: f64,
    /// Maximum backtracking halvings per line search.
    pub max_line_steps: usize,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self { memory: 10, max_iters: 500, grad_tol: 1e-8, f_tol: 1e-13, max_line_steps: 40 }
    }
}

#[derive(Clone, Debug)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub iterations: usize,
    pub evals: usize,
    pub converged: bool,
}

/// Minimize `f` from `x0`. The closure writes the gradient into its second
/// argument and returns the value.
pub fn lbfgs<F>(x0: Vec<f64>, opts: &LbfgsOptions, mut f_and_grad: F) -> LbfgsResult
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut f = f_and_grad(&x, &mut g);
    let mut evals = 1usize;

    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut slow_decreases = 0usize;
    let mut iterations = 0usize;
    let mut converged = false;

    for iter in 0..opts.max_iters {
        iterations = iter;
        if max_abs(&g) <= opts.grad_tol {
            converged = true;
            break;
        }

        // Two-loop recursion: d = -H g.
        let mut d: Vec<f64> = g.iter().map(|v| -v).collect();
        let m = s_hist.len();
        let mut alpha = vec![0.0; m];
        for i in (0..m).rev() {
            alpha[i] = rho_hist[i] * dot(&s_hist[i], &d);
            axpy(-alpha[i], &y_hist[i], &mut d);
        }
        if m > 0 {
            let last = m - 1;
            let yy = dot(&y_hist[last], &y_hist[last]);
            if yy > 0.0 {
                let gamma = 1.0 / (rho_hist[last] * yy);
                for v in d.iter_mut() {
                    *v *= gamma;
                }
            }
        }
        for i in 0..m {
            let beta = rho_hist[i] * dot(&y_hist[i], &d);
            axpy(alpha[i] - beta, &s_hist[i], &mut d);
        }

        let mut dg = dot(&d, &g);
        if dg >= 0.0 {
            // Not a descent direction (stale curvature): restart steepest.
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            d = g.iter().map(|v| -v).collect();
            dg = -dot(&g, &g);
        }

        // Armijo backtracking from t = 1 (t scaled on the cold start).
        let mut t = if m == 0 {
            let gn = dot(&g, &g).sqrt();
            if gn > 1.0 {
                1.0 / gn
            } else {
                1.0
            }
        } else {
            1.0
        };
        let c1 = 1e-4;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut f_new;
        let mut accepted = false;
        for _ in 0..opts.max_line_steps {
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            f_new = f_and_grad(&x_new, &mut g_new);
            evals += 1;
            if f_new.is_finite() && f_new <= f + c1 * t * dg {
                // Accept; update curvature history.
                let s: Vec<f64> = (0..n).map(|i| x_new[i] - x[i]).collect();
                let y: Vec<f64> = (0..n).map(|i| g_new[i] - g[i]).collect();
                let sy = dot(&s, &y);
                let ss = dot(&s, &s).sqrt();
                let yn = dot(&y, &y).sqrt();
                if sy > 1e-10 * ss * yn {
                    if s_hist.len() == opts.memory {
                        s_hist.remove(0);
                        y_hist.remove(0);
                        rho_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                    rho_hist.push(1.0 / sy);
                }
                let decrease = f - f_new;
                if decrease <= opts.f_tol * (1.0 + f.abs()) {
                    slow_decreases += 1;
                } else {
                    slow_decreases = 0;
                }
                x.copy_from_slice(&x_new);
                g.copy_from_slice(&g_new);
                f = f_new;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            // The model is exhausted at floating-point resolution.
            converged = max_abs(&g) <= 1e3 * opts.grad_tol;
            break;
        }
        if slow_decreases >= 2 {
            converged = true;
            break;
        }
    }
    if !converged && max_abs(&g) <= opts.grad_tol {
        converged = true;
    }
    LbfgsResult { x, f, iterations, evals, converged }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

/// Derive an independent RNG seed for a named stream (restart index, batch
/// index, ...) from one master seed, via the SplitMix64 finalizer. Streams
/// are decorrelated and the fanout is stable across platforms.
pub fn split_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Central-difference gradient, for finite-difference checks in tests.
pub fn central_diff_gradient<F>(x: &[f64], h: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut g = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        let xi = x[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_bowl_converges_fast() {
        let a = [1.0, 3.0, 10.0, 0.5];
        let b = [0.3, -1.2, 2.0, 4.0];
        let res = lbfgs(vec![0.0; 4], &LbfgsOptions::default(), |x, g| {
            let mut f = 0.0;
            for i in 0..4 {
                let d = x[i] - b[i];
                f += a[i] * d * d;
                g[i] = 2.0 * a[i] * d;
            }
            f
        });
        assert!(res.converged);
        for i in 0..4 {
            assert!((res.x[i] - b[i]).abs() < 1e-7, "component {i}: {} vs {}", res.x[i], b[i]);
        }
        assert!(res.iterations < 50);
    }

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let n = x.len();
        let mut f = 0.0;
        for v in g.iter_mut() {
            *v = 0.0;
        }
        for i in 0..n - 1 {
            let a = x[i + 1] - x[i] * x[i];
            let b = 1.0 - x[i];
            f += 100.0 * a * a + b * b;
            g[i] += -400.0 * a * x[i] - 2.0 * b;
            g[i + 1] += 200.0 * a;
        }
        f
    }

    #[test]
    fn rosenbrock_2d_from_standard_start() {
        let res = lbfgs(
            vec![-1.2, 1.0],
            &LbfgsOptions { max_iters: 2000, ..Default::default() },
            rosenbrock,
        );
        assert!(res.converged, "did not converge: {res:?}");
        assert!((res.x[0] - 1.0).abs() < 1e-6);
        assert!((res.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rosenbrock_10d() {
        let res = lbfgs(
            vec![0.0; 10],
            &LbfgsOptions { max_iters: 5000, ..Default::default() },
            rosenbrock,
        );
        assert!(res.converged);
        for (i, v) in res.x.iter().enumerate() {
            assert!((v - 1.0).abs() < 1e-5, "x[{i}] = {v}");
        }
    }

    #[test]
    fn central_difference_matches_analytic_gradient() {
        let x = vec![0.4, -0.7, 1.1];
        let mut g = vec![0.0; 3];
        rosenbrock(&x, &mut g);
        let fd = central_diff_gradient(&x, 1e-6, |x| {
            let mut scratch = vec![0.0; 3];
            rosenbrock(x, &mut scratch)
        });
        for i in 0..3 {
            assert!((g[i] - fd[i]).abs() < 1e-4 * (1.0 + g[i].abs()));
        }
    }
}
