//! Quasi-Newton minimization.

/// Stopping rules for [`minimize`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when the largest absolute gradient entry falls below this.
    pub grad_tol: f64,
    /// Stop when an accepted step changes the objective by less than
    /// `f_tol * (1 + |f|)`.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self { max_iters: 500, grad_tol: 1e-8, f_tol: 1e-13 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn mat_vec(h: &[f64], v: &[f64]) -> Vec<f64> {
    let n = v.len();
    (0..n).map(|r| dot(&h[r * n..(r + 1) * n], v)).collect()
}

fn identity(n: usize, scale: f64) -> Vec<f64> {
    let mut h = vec![0.0; n * n];
    for i in 0..n {
        h[i * n + i] = scale;
    }
    h
}

/// BFGS with a backtracking Armijo line search. `f` returns the objective
/// and writes its gradient; non-finite values are treated as infeasible and
/// shrink the step.
pub fn minimize<F>(mut f: F, x0: &[f64], opts: BfgsOptions) -> Minimum
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut h = identity(n, 1.0);
    let mut first = true;
    let mut iterations = 0;
    let small = |g: &[f64]| g.iter().all(|v| v.abs() < opts.grad_tol);
    if !fx.is_finite() {
        return Minimum { x, f: fx, grad: g, iterations, converged: false };
    }
    while iterations < opts.max_iters {
        if small(&g) {
            return Minimum { x, f: fx, grad: g, iterations, converged: true };
        }
        iterations += 1;
        let mut d: Vec<f64> = mat_vec(&h, &g).iter().map(|v| -v).collect();
        let mut slope = dot(&g, &d);
        if !(slope < 0.0) {
            h = identity(n, 1.0);
            first = true;
            d = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }
        let mut t = 1.0;
        let mut x_new = vec![0.0; n];
        let mut g_new = vec![0.0; n];
        let mut f_new = f64::INFINITY;
        let mut accepted = false;
        for _ in 0..60 {
            for i in 0..n {
                x_new[i] = x[i] + t * d[i];
            }
            f_new = f(&x_new, &mut g_new);
            if f_new.is_finite() && f_new <= fx + 1e-4 * t * slope {
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            if first {
                let converged = small(&g);
                return Minimum { x, f: fx, grad: g, iterations, converged };
            }
            h = identity(n, 1.0);
            first = true;
            continue;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        let df = fx - f_new;
        x = x_new;
        g = g_new;
        let previous = fx;
        fx = f_new;
        if sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() && sy > 0.0 {
            if first {
                h = identity(n, sy / dot(&y, &y));
                first = false;
            }
            let hy = mat_vec(&h, &y);
            let yhy = dot(&y, &hy);
            let rho = 1.0 / sy;
            for r in 0..n {
                for c in 0..n {
                    h[r * n + c] += -rho * (hy[r] * s[c] + s[r] * hy[c]) + (rho * rho * yhy + rho) * s[r] * s[c];
                }
            }
        }
        if df.abs() <= opts.f_tol * (1.0 + previous.abs()) {
            return Minimum { x, f: fx, grad: g, iterations, converged: true };
        }
    }
    let converged = small(&g);
    Minimum { x, f: fx, grad: g, iterations, converged }
}
