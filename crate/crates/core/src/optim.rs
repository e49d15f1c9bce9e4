//! Box-constrained limited-memory quasi-Newton minimisation.
//!
//! Projected L-BFGS: the two-loop recursion runs on the free variables,
//! variables pinned at a bound with an outward gradient are frozen, and a
//! backtracking Armijo search runs along the projected path.

use std::collections::VecDeque;

use crate::math::Bounds;

#[derive(Clone, Debug)]
pub struct LbfgsOptions {
    /// Number of correction pairs kept.
    pub memory: usize,
    pub max_iterations: usize,
    pub max_evaluations: usize,
    /// Stop when the projected gradient infinity norm drops below this.
    pub gradient_tolerance: f64,
    /// Stop when the relative objective decrease drops below this.
    pub relative_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 200,
            max_evaluations: 500,
            gradient_tolerance: 1e-6,
            relative_tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug)]
pub struct OptimResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub converged: bool,
}

/// Objective returning value and gradient.
pub trait Objective {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>);
}

impl<F: FnMut(&[f64]) -> (f64, Vec<f64>)> Objective for F {
    fn evaluate(&mut self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn projected_gradient(x: &[f64], g: &[f64], bounds: &Bounds) -> Vec<f64> {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(d, (xi, gi))| {
            if (*xi <= bounds.lower[d] && *gi > 0.0) || (*xi >= bounds.upper[d] && *gi < 0.0) {
                0.0
            } else {
                *gi
            }
        })
        .collect()
}

pub fn minimize<O: Objective + ?Sized>(objective: &mut O, x0: &[f64], bounds: &Bounds, options: &LbfgsOptions) -> OptimResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.clip(&mut x);
    let (mut f, mut g) = objective.evaluate(&x);
    let mut evals = 1;
    let mut best = (x.clone(), f);
    if !f.is_finite() {
        return OptimResult { x, value: f, evaluations: evals, iterations: 0, converged: false };
    }

    let mut pairs: VecDeque<(Vec<f64>, Vec<f64>, f64)> = VecDeque::with_capacity(options.memory);
    let mut converged = false;
    let mut iterations = 0;

    while iterations < options.max_iterations && evals < options.max_evaluations {
        let pg = projected_gradient(&x, &g, bounds);
        if pg.iter().fold(0.0f64, |m, v| m.max(v.abs())) < options.gradient_tolerance {
            converged = true;
            break;
        }
        let free: Vec<bool> = pg.iter().map(|v| *v != 0.0).collect();

        // two-loop recursion on the free subspace
        let mut q: Vec<f64> = pg.clone();
        let mut alphas = Vec::with_capacity(pairs.len());
        for (s, y, rho) in pairs.iter().rev() {
            let a = rho * dot(s, &q);
            for i in 0..n {
                if free[i] {
                    q[i] -= a * y[i];
                }
            }
            alphas.push(a);
        }
        let gamma = pairs.back().map_or(1.0, |(s, y, _)| dot(s, y) / dot(y, y).max(1e-300));
        for v in q.iter_mut() {
            *v *= gamma;
        }
        for ((s, y, rho), a) in pairs.iter().zip(alphas.iter().rev()) {
            let b = rho * dot(y, &q);
            for i in 0..n {
                if free[i] {
                    q[i] += s[i] * (a - b);
                }
            }
        }
        let mut dir: Vec<f64> = q.iter().zip(&free).map(|(v, f)| if *f { -v } else { 0.0 }).collect();
        if dot(&dir, &g) >= 0.0 || dir.iter().any(|v| !v.is_finite()) {
            pairs.clear();
            dir = pg.iter().map(|v| -v).collect();
        }

        let mut step = if pairs.is_empty() {
            let norm = dot(&dir, &dir).sqrt();
            (1.0 / norm.max(1e-12)).min(1.0)
        } else {
            1.0
        };
        let mut accepted = None;
        for _ in 0..30 {
            if evals >= options.max_evaluations {
                break;
            }
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            bounds.clip(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            if moved.iter().all(|v| *v == 0.0) {
                break;
            }
            let (ft, gt) = objective.evaluate(&trial);
            evals += 1;
            if ft.is_finite() && ft <= f + 1e-4 * dot(&g, &moved) {
                accepted = Some((trial, ft, gt, moved));
                break;
            }
            step *= 0.5;
        }

        let Some((xn, fn_, gn, s)) = accepted else {
            if pairs.is_empty() {
                break;
            }
            pairs.clear();
            iterations += 1;
            continue;
        };
        iterations += 1;
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-10 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == options.memory.max(1) {
                pairs.pop_front();
            }
            pairs.push_back((s, y, 1.0 / sy));
        }
        let decrease = f - fn_;
        x = xn;
        f = fn_;
        g = gn;
        if f < best.1 {
            best = (x.clone(), f);
        }
        if decrease.abs() <= options.relative_tolerance * f.abs().max(1.0) {
            converged = true;
            break;
        }
    }

    OptimResult { x: best.0, value: best.1, evaluations: evals, iterations, converged }
}

/// Runs `minimize` from each start and keeps the lowest value.
pub fn minimize_multistart<O: Objective + ?Sized>(
    objective: &mut O,
    starts: &[Vec<f64>],
    bounds: &Bounds,
    options: &LbfgsOptions,
) -> Option<OptimResult> {
    let mut best: Option<OptimResult> = None;
    for x0 in starts {
        let r = minimize(objective, x0, bounds, options);
        if !r.value.is_finite() {
            continue;
        }
        if best.as_ref().map_or(true, |b| r.value < b.value) {
            best = Some(r);
        }
    }
    best
}

/// Central finite-difference gradient that stays inside the box, falling back
/// to a one-sided difference at a bound. `steps[d]` is the step per dimension.
pub fn numeric_gradient(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], steps: &[f64], bounds: &Bounds) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for d in 0..x.len() {
        let up = (x[d] + steps[d]).min(bounds.upper[d]);
        let down = (x[d] - steps[d]).max(bounds.lower[d]);
        if up <= down {
            continue;
        }
        probe[d] = up;
        let fu = f(&probe);
        probe[d] = down;
        let fd = f(&probe);
        probe[d] = x[d];
        grad[d] = (fu - fd) / (up - down);
    }
    grad
}
