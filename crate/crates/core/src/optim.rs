//! Limited-memory BFGS with a strong-Wolfe line search.
//!
//! The objective may return `+inf` for infeasible points. Such evaluations
//! are treated as failing the sufficient-decrease test, so the line search
//! backtracks and an infeasible iterate is never accepted.

use std::collections::VecDeque;

use crate::error::{PofError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    /// Number of curvature pairs kept.
    pub memory: usize,
    pub max_iters: usize,
    /// Convergence threshold on the infinity norm of the gradient.
    pub grad_tol: f64,
    pub wolfe_c1: f64,
    pub wolfe_c2: f64,
    /// Objective evaluations allowed per line search.
    pub max_line_search: usize,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iters: 500,
            grad_tol: 1e-5,
            wolfe_c1: 1e-4,
            wolfe_c2: 0.9,
            max_line_search: 40,
        }
    }
}

impl LbfgsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(PofError::Config("L-BFGS memory must be at least 1".into()));
        }
        if !(0.0 < self.wolfe_c1 && self.wolfe_c1 < self.wolfe_c2 && self.wolfe_c2 < 1.0) {
            return Err(PofError::Config(format!(
                "Wolfe constants must satisfy 0 < c1 < c2 < 1, got c1={} c2={}",
                self.wolfe_c1, self.wolfe_c2
            )));
        }
        if !(self.grad_tol >= 0.0) {
            return Err(PofError::Config("grad_tol must be non-negative".into()));
        }
        if self.max_line_search == 0 {
            return Err(PofError::Config("max_line_search must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimStatus {
    Converged,
    MaxIters,
    LineSearchFailed,
}

#[derive(Debug, Clone)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad_norm: f64,
    pub iters: usize,
    pub evals: usize,
    pub status: OptimStatus,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Applies the inverse-Hessian estimate built from `pairs` (oldest first)
/// with initial matrix `h0 * I` to `grad`.
fn two_loop(grad: &[f64], pairs: &VecDeque<Pair>, h0: f64) -> Vec<f64> {
    let mut q = grad.to_vec();
    let mut alphas = vec![0.0; pairs.len()];
    for (i, p) in pairs.iter().enumerate().rev() {
        let a = p.rho * dot(&p.s, &q);
        alphas[i] = a;
        for (qj, yj) in q.iter_mut().zip(&p.y) {
            *qj -= a * yj;
        }
    }
    for v in q.iter_mut() {
        *v *= h0;
    }
    for (i, p) in pairs.iter().enumerate() {
        let b = p.rho * dot(&p.y, &q);
        for (qj, sj) in q.iter_mut().zip(&p.s) {
            *qj += (alphas[i] - b) * sj;
        }
    }
    q
}

struct Point {
    alpha: f64,
    f: f64,
    dphi: f64,
    x: Vec<f64>,
    g: Vec<f64>,
}

struct LineSearch<'a, F> {
    fg: &'a mut F,
    x0: &'a [f64],
    dir: &'a [f64],
    f0: f64,
    dphi0: f64,
    c1: f64,
    c2: f64,
    budget: usize,
    evals: usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    fn eval(&mut self, alpha: f64) -> Point {
        self.evals += 1;
        let x: Vec<f64> = self.x0.iter().zip(self.dir).map(|(x, d)| x + alpha * d).collect();
        let mut g = vec![0.0; x.len()];
        let mut f = (self.fg)(&x, &mut g);
        if f.is_nan() {
            f = f64::INFINITY;
        }
        let dphi = if f.is_finite() { dot(&g, self.dir) } else { f64::NAN };
        Point { alpha, f, dphi, x, g }
    }

    fn sufficient(&self, p: &Point) -> bool {
        p.f.is_finite() && p.f <= self.f0 + self.c1 * p.alpha * self.dphi0
    }

    fn curvature(&self, p: &Point) -> bool {
        p.dphi.abs() <= -self.c2 * self.dphi0
    }

    fn run(&mut self, alpha0: f64) -> Option<Point> {
        let origin = Point {
            alpha: 0.0,
            f: self.f0,
            dphi: self.dphi0,
            x: self.x0.to_vec(),
            g: Vec::new(),
        };
        let mut prev = origin;
        let mut alpha = alpha0;
        let mut first = true;
        while self.evals < self.budget {
            let cur = self.eval(alpha);
            if !self.sufficient(&cur) || (!first && cur.f >= prev.f) {
                return self.zoom(prev, cur);
            }
            if self.curvature(&cur) {
                return Some(cur);
            }
            if cur.dphi >= 0.0 {
                return self.zoom(cur, prev);
            }
            first = false;
            alpha = cur.alpha * 2.0;
            prev = cur;
        }
        // Budget spent while still extrapolating: prev satisfies Armijo.
        (prev.alpha > 0.0).then_some(prev)
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Option<Point> {
        while self.evals < self.budget {
            let width = (hi.alpha - lo.alpha).abs();
            if width <= 1e-16 * lo.alpha.abs().max(hi.alpha.abs()).max(f64::MIN_POSITIVE) {
                break;
            }
            let alpha = interpolate(&lo, &hi);
            let cur = self.eval(alpha);
            if !self.sufficient(&cur) || cur.f >= lo.f {
                hi = cur;
            } else {
                if self.curvature(&cur) {
                    return Some(cur);
                }
                if cur.dphi * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = cur;
            }
        }
        (lo.alpha > 0.0).then_some(lo)
    }
}

/// Safeguarded cubic interpolation between two bracket ends; bisection when
/// the cubic is undefined or the far end is infeasible.
fn interpolate(lo: &Point, hi: &Point) -> f64 {
    let (a, b) = (lo.alpha, hi.alpha);
    let mid = 0.5 * (a + b);
    if !(hi.f.is_finite() && hi.dphi.is_finite()) {
        return mid;
    }
    let d1 = lo.dphi + hi.dphi - 3.0 * (lo.f - hi.f) / (a - b);
    let disc = d1 * d1 - lo.dphi * hi.dphi;
    if !(disc >= 0.0) {
        return mid;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let denom = hi.dphi - lo.dphi + 2.0 * d2;
    if denom == 0.0 {
        return mid;
    }
    let cand = b - (b - a) * (hi.dphi + d2 - d1) / denom;
    let (left, right) = if a < b { (a, b) } else { (b, a) };
    let margin = 0.1 * (right - left);
    if cand.is_finite() {
        cand.clamp(left + margin, right - margin)
    } else {
        mid
    }
}

/// Minimises `fg`, which writes the gradient into its second argument and
/// returns the objective (or `+inf` when infeasible).
pub fn minimize<F>(mut fg: F, x0: &[f64], cfg: &LbfgsConfig) -> Result<OptimResult>
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
{
    cfg.validate()?;
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = vec![0.0; n];
    let mut f = fg(&x, &mut g);
    let mut evals = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(PofError::Infeasible(format!(
            "optimizer start point has objective {f}"
        )));
    }
    let mut pairs: VecDeque<Pair> = VecDeque::with_capacity(cfg.memory);
    let mut iters = 0;

    let finish = |x: Vec<f64>, f: f64, g: &[f64], iters, evals, status| OptimResult {
        x,
        f,
        grad_norm: inf_norm(g),
        iters,
        evals,
        status,
    };

    if inf_norm(&g) <= cfg.grad_tol {
        return Ok(finish(x, f, &g, 0, evals, OptimStatus::Converged));
    }

    while iters < cfg.max_iters {
        let mut accepted = None;
        // At most two attempts: quasi-Newton direction, then steepest descent.
        for attempt in 0..2 {
            if attempt == 1 {
                if pairs.is_empty() {
                    break;
                }
                pairs.clear();
            }
            let (dir, alpha0) = if let Some(last) = pairs.back() {
                let h0 = 1.0 / (last.rho * dot(&last.y, &last.y));
                let hg = two_loop(&g, &pairs, h0);
                (hg.into_iter().map(|v| -v).collect::<Vec<_>>(), 1.0)
            } else {
                let gn = inf_norm(&g);
                (g.iter().map(|v| -v).collect(), (1.0 / gn).min(1.0))
            };
            let mut dphi0 = dot(&g, &dir);
            let dir = if dphi0 < 0.0 && dphi0.is_finite() {
                dir
            } else {
                pairs.clear();
                let d: Vec<f64> = g.iter().map(|v| -v).collect();
                dphi0 = dot(&g, &d);
                d
            };
            let mut ls = LineSearch {
                fg: &mut fg,
                x0: &x,
                dir: &dir,
                f0: f,
                dphi0,
                c1: cfg.wolfe_c1,
                c2: cfg.wolfe_c2,
                budget: cfg.max_line_search,
                evals: 0,
            };
            let res = ls.run(alpha0);
            evals += ls.evals;
            if let Some(p) = res {
                accepted = Some(p);
                break;
            }
        }

        let Some(p) = accepted else {
            return Ok(finish(x, f, &g, iters, evals, OptimStatus::LineSearchFailed));
        };
        iters += 1;
        let s: Vec<f64> = p.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = p.g.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == cfg.memory {
                pairs.pop_front();
            }
            pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        }
        x = p.x;
        f = p.f;
        g = p.g;
        if inf_norm(&g) <= cfg.grad_tol {
            return Ok(finish(x, f, &g, iters, evals, OptimStatus::Converged));
        }
    }
    Ok(finish(x, f, &g, iters, evals, OptimStatus::MaxIters))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sphere(x: &[f64], g: &mut [f64]) -> f64 {
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi = 2.0 * xi;
        }
        dot(x, x)
    }

    fn rosenbrock(x: &[f64], g: &mut [f64]) -> f64 {
        let (a, b) = (x[0], x[1]);
        g[0] = -2.0 * (1.0 - a) - 400.0 * a * (b - a * a);
        g[1] = 200.0 * (b - a * a);
        (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2)
    }

    #[test]
    fn quadratic_bowl() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x0: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let r = minimize(sphere, &x0, &LbfgsConfig::default()).unwrap();
        assert_eq!(r.status, OptimStatus::Converged);
        assert!(r.iters <= 5, "iters = {}", r.iters);
        assert!(inf_norm(&r.x) < 1e-6);
    }

    #[test]
    fn rosenbrock_valley() {
        let cfg = LbfgsConfig {
            grad_tol: 1e-9,
            ..Default::default()
        };
        let r = minimize(rosenbrock, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(r.status, OptimStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-5 && (r.x[1] - 1.0).abs() < 1e-5, "{:?}", r.x);
        let mut g = [0.0; 2];
        rosenbrock(&r.x, &mut g);
        assert!(inf_norm(&g) <= 1e-9);
    }

    #[test]
    fn barrier_never_accepted() {
        let r = minimize(
            |x: &[f64], g: &mut [f64]| {
                if x[0] < 0.0 {
                    g[0] = f64::NAN;
                    return f64::INFINITY;
                }
                g[0] = 2.0 * (x[0] - 1.0);
                (x[0] - 1.0).powi(2)
            },
            &[2.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        assert!(r.x[0] >= 0.0 && r.f.is_finite());
    }

    #[test]
    fn barrier_with_steep_start_backtracks() {
        // Minimum sits right at the barrier side; the first trial step
        // overshoots into the infeasible region.
        let r = minimize(
            |x: &[f64], g: &mut [f64]| {
                if x[0] <= 0.0 {
                    return f64::INFINITY;
                }
                g[0] = 1.0 - 1.0 / x[0];
                x[0] - x[0].ln()
            },
            &[50.0],
            &LbfgsConfig::default(),
        )
        .unwrap();
        assert_eq!(r.status, OptimStatus::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn infeasible_start_is_rejected() {
        let err = minimize(|_: &[f64], _: &mut [f64]| f64::INFINITY, &[0.0], &LbfgsConfig::default());
        assert!(matches!(err, Err(PofError::Infeasible(_))));
    }

    #[test]
    fn bad_config_is_rejected() {
        let cfg = LbfgsConfig {
            wolfe_c1: 0.9,
            wolfe_c2: 0.1,
            ..Default::default()
        };
        assert!(minimize(sphere, &[1.0], &cfg).is_err());
    }

    #[test]
    fn accepted_values_never_increase() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let x0 = [rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)];
            let f0 = rosenbrock(&x0, &mut [0.0; 2]);
            for iters in 1..30 {
                let cfg = LbfgsConfig {
                    max_iters: iters,
                    ..Default::default()
                };
                let a = minimize(rosenbrock, &x0, &cfg).unwrap();
                let cfg = LbfgsConfig {
                    max_iters: iters + 1,
                    ..Default::default()
                };
                let b = minimize(rosenbrock, &x0, &cfg).unwrap();
                assert!(a.f <= f0);
                assert!(b.f <= a.f);
            }
        }
    }

    /// Dense BFGS inverse-Hessian update, H <- (I - r s y') H (I - r y s') + r s s'.
    fn dense_bfgs(n: usize, pairs: &VecDeque<Pair>, h0: f64) -> Vec<Vec<f64>> {
        let mut h = vec![vec![0.0; n]; n];
        for (i, row) in h.iter_mut().enumerate() {
            row[i] = h0;
        }
        for p in pairs {
            let mut left = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    left[i][j] = if i == j { 1.0 } else { 0.0 } - p.rho * p.s[i] * p.y[j];
                }
            }
            let mut tmp = vec![vec![0.0; n]; n];
            for i in 0..n {
                for j in 0..n {
                    tmp[i][j] = (0..n).map(|k| left[i][k] * h[k][j]).sum();
                }
            }
            for i in 0..n {
                for j in 0..n {
                    h[i][j] = (0..n).map(|k| tmp[i][k] * left[j][k]).sum::<f64>() + p.rho * p.s[i] * p.s[j];
                }
            }
        }
        h
    }

    #[test]
    fn two_loop_matches_dense_bfgs_on_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for n in 2..=5 {
            // Random SPD Hessian A = B B' + I.
            let b: Vec<Vec<f64>> = (0..n).map(|_| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
            let a: Vec<Vec<f64>> = (0..n)
                .map(|i| (0..n).map(|j| (0..n).map(|k| b[i][k] * b[j][k]).sum::<f64>() + if i == j { 1.0 } else { 0.0 }).collect())
                .collect();
            let memory = n;
            let mut pairs = VecDeque::new();
            for _ in 0..memory {
                let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let y: Vec<f64> = (0..n).map(|i| dot(&a[i], &s)).collect();
                let rho = 1.0 / dot(&s, &y);
                pairs.push_back(Pair { s, y, rho });
                let h0 = 0.7;
                let g: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let fast = two_loop(&g, &pairs, h0);
                let h = dense_bfgs(n, &pairs, h0);
                for i in 0..n {
                    let slow = dot(&h[i], &g);
                    assert!((fast[i] - slow).abs() <= 1e-10 * slow.abs().max(1.0), "n={n}");
                }
            }
        }
    }
}
