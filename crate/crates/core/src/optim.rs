//! Dense BFGS for small fixed-size problems and golden-section search.

#[derive(Debug, Clone, Copy)]
pub struct BfgsOptions {
    pub max_iters: usize,
    /// Stop when `max|g| <= grad_tol * max(1, |f|)`.
    pub grad_tol: f64,
    /// Stop when an accepted step improves `f` by less than
    /// `f_tol * max(1, |f|)` twice in a row.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        Self {
            max_iters: 400,
            grad_tol: 1e-11,
            f_tol: 1e-15,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Minimum<const N: usize> {
    pub x: [f64; N],
    pub f: f64,
    pub grad: [f64; N],
    pub iterations: usize,
    pub converged: bool,
}

fn dot<const N: usize>(a: &[f64; N], b: &[f64; N]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm<const N: usize>(a: &[f64; N]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn identity<const N: usize>(scale: f64) -> [[f64; N]; N] {
    std::array::from_fn(|i| std::array::from_fn(|j| if i == j { scale } else { 0.0 }))
}

/// Minimizes `f` starting at `x0`. `f` returns the value and gradient;
/// non-finite values are treated as infeasible by the line search.
pub fn bfgs<const N: usize, F>(mut f: F, x0: [f64; N], opts: &BfgsOptions) -> Minimum<N>
where
    F: FnMut(&[f64; N]) -> (f64, [f64; N]),
{
    let (mut fx, mut g) = f(&x0);
    let mut x = x0;
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Minimum {
            x,
            f: fx,
            grad: g,
            iterations: 0,
            converged: false,
        };
    }
    let mut h: [[f64; N]; N] = identity(1.0);
    let mut first = true;
    let mut stalls = 0;

    for iter in 0..opts.max_iters {
        if inf_norm(&g) <= opts.grad_tol * fx.abs().max(1.0) {
            return Minimum {
                x,
                f: fx,
                grad: g,
                iterations: iter,
                converged: true,
            };
        }
        let mut p: [f64; N] = std::array::from_fn(|i| -dot(&h[i], &g));
        let mut dg0 = dot(&p, &g);
        if !(dg0 < 0.0) {
            h = identity(1.0);
            p = g.map(|v| -v);
            dg0 = dot(&p, &g);
        }
        if first {
            let n = inf_norm(&p);
            p = p.map(|v| v / n);
            dg0 = dot(&p, &g);
        }

        let Some((t, f1, g1)) = wolfe_search(&mut f, &x, fx, dg0, &p) else {
            return Minimum {
                x,
                f: fx,
                grad: g,
                iterations: iter,
                converged: false,
            };
        };
        let x1: [f64; N] = std::array::from_fn(|i| x[i] + t * p[i]);
        let s: [f64; N] = std::array::from_fn(|i| x1[i] - x[i]);
        let y: [f64; N] = std::array::from_fn(|i| g1[i] - g[i]);
        let sy = dot(&s, &y);
        if sy > 1e-300 && sy > 1e-14 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if first {
                h = identity(sy / dot(&y, &y));
            }
            let rho = 1.0 / sy;
            // H <- (I - rho s y^T) H (I - rho y s^T) + rho s s^T
            let hy: [f64; N] = std::array::from_fn(|i| dot(&h[i], &y));
            let yhy = dot(&y, &hy);
            let mut next = h;
            for i in 0..N {
                for j in 0..N {
                    next[i][j] += -rho * (s[i] * hy[j] + hy[i] * s[j])
                        + (rho * rho * yhy + rho) * s[i] * s[j];
                }
            }
            h = next;
        }
        first = false;

        let improvement = fx - f1;
        x = x1;
        g = g1;
        fx = f1;
        if improvement <= opts.f_tol * fx.abs().max(1.0) {
            stalls += 1;
            if stalls >= 2 {
                return Minimum {
                    x,
                    f: fx,
                    grad: g,
                    iterations: iter + 1,
                    converged: true,
                };
            }
        } else {
            stalls = 0;
        }
    }
    Minimum {
        x,
        f: fx,
        grad: g,
        iterations: opts.max_iters,
        converged: false,
    }
}

/// Weak-Wolfe bisection line search; returns `(t, f, g)` at the accepted step.
fn wolfe_search<const N: usize, F>(
    f: &mut F,
    x: &[f64; N],
    fx: f64,
    dg0: f64,
    p: &[f64; N],
) -> Option<(f64, f64, [f64; N])>
where
    F: FnMut(&[f64; N]) -> (f64, [f64; N]),
{
    const C1: f64 = 1e-4;
    const C2: f64 = 0.9;
    let mut lo = 0.0;
    let mut hi = f64::INFINITY;
    let mut t = 1.0;
    let mut best: Option<(f64, f64, [f64; N])> = None;
    for _ in 0..80 {
        let xt: [f64; N] = std::array::from_fn(|i| x[i] + t * p[i]);
        let (ft, gt) = f(&xt);
        let finite = ft.is_finite() && gt.iter().all(|v| v.is_finite());
        if !finite || ft > fx + C1 * t * dg0 {
            hi = t;
        } else {
            if best.as_ref().is_none_or(|b| ft < b.1) {
                best = Some((t, ft, gt));
            }
            if dot(&gt, p) < C2 * dg0 {
                lo = t;
            } else {
                return Some((t, ft, gt));
            }
        }
        t = if hi.is_finite() { 0.5 * (lo + hi) } else { 2.0 * t };
        if hi.is_finite() && hi - lo <= 1e-16 * hi.max(1.0) {
            break;
        }
    }
    // Armijo-only point: still a strict decrease.
    best.filter(|b| b.1 < fx)
}

/// Maximizes a unimodal `f` on `[lo, hi]` by golden-section search.
/// Returns `(x, f(x))` for the best point evaluated.
pub fn golden_section_max<F>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64)
where
    F: FnMut(f64) -> f64,
{
    const INV_PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - INV_PHI * (hi - lo);
    let mut x2 = lo + INV_PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 >= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - INV_PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + INV_PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    if f1 >= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rosenbrock() {
        let rosen = |x: &[f64; 2]| {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = [
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ];
            (f, g)
        };
        let m = bfgs(rosen, [-1.2, 1.0], &BfgsOptions::default());
        assert!((m.x[0] - 1.0).abs() < 1e-6, "{:?}", m);
        assert!((m.x[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn quadratic_exact() {
        let q = |x: &[f64; 3]| {
            let f = (x[0] - 1.0).powi(2) + 10.0 * (x[1] + 2.0).powi(2) + 0.1 * x[2].powi(2);
            (f, [2.0 * (x[0] - 1.0), 20.0 * (x[1] + 2.0), 0.2 * x[2]])
        };
        let m = bfgs(q, [5.0, 5.0, 5.0], &BfgsOptions::default());
        assert!(m.converged);
        assert!(m.f < 1e-18);
    }

    #[test]
    fn infeasible_start_is_reported() {
        let m = bfgs(|_: &[f64; 1]| (f64::NAN, [0.0]), [0.0], &BfgsOptions::default());
        assert!(!m.converged);
        assert_eq!(m.iterations, 0);
    }

    #[test]
    fn golden_section_finds_parabola_peak() {
        let (x, fx) = golden_section_max(|x| -(x - 0.3).powi(2), 0.0, 1.0, 1e-10);
        assert!((x - 0.3).abs() < 1e-8);
        assert!(fx > -1e-15);
    }
}
