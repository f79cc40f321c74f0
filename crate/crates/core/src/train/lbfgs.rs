//! Limited-memory BFGS with a backtracking Armijo line search.

use std::collections::VecDeque;

use crate::error::Result;
use crate::scalar::Real;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LbfgsOptions {
    pub max_iterations: usize,
    pub memory: usize,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Step shrink factor per backtrack.
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Stop once the largest gradient component falls below this.
    pub gradient_tolerance: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        Self {
            max_iterations: 8,
            memory: 10,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 30,
            gradient_tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsReport<T> {
    pub x: Vec<T>,
    pub value: T,
    pub gradient_norm: T,
    pub iterations: usize,
    /// Objective at the start and after every accepted step.
    pub accepted_values: Vec<T>,
    pub line_search_failures: usize,
    pub converged: bool,
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

fn max_abs<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

/// Minimizes `f`. The closure returns the value and, when asked, the gradient;
/// a non-finite value is treated as an infeasible point.
pub fn minimize<T: Real, F>(mut f: F, x0: Vec<T>, options: &LbfgsOptions) -> Result<LbfgsReport<T>>
where
    F: FnMut(&[T], bool) -> Result<(T, Option<Vec<T>>)>,
{
    let mut x = x0;
    let (mut fx, g) = f(&x, true)?;
    let mut g = g.expect("gradient requested");
    let mut history: VecDeque<(Vec<T>, Vec<T>, T)> = VecDeque::new();
    let mut report = LbfgsReport {
        x: Vec::new(),
        value: fx,
        gradient_norm: max_abs(&g),
        iterations: 0,
        accepted_values: vec![fx],
        line_search_failures: 0,
        converged: false,
    };
    let tol = T::lit(options.gradient_tolerance);
    for _ in 0..options.max_iterations {
        if x.is_empty() || max_abs(&g) <= tol {
            report.converged = true;
            break;
        }
        report.iterations += 1;
        let mut d = direction(&g, &history);
        let mut slope = dot(&g, &d);
        if !(slope < T::zero()) {
            history.clear();
            d = direction(&g, &history);
            slope = dot(&g, &d);
        }
        let mut step = T::one();
        let mut accepted = None;
        for attempt in 0..=options.max_backtracks {
            let trial: Vec<T> = x.iter().zip(&d).map(|(&xi, &di)| xi + step * di).collect();
            // The full step is usually accepted, so its gradient is computed up front.
            let (ft, gt) = f(&trial, attempt == 0)?;
            if ft.is_finite() && ft <= fx + T::lit(options.armijo) * step * slope {
                accepted = Some((trial, ft, gt));
                break;
            }
            step = step * T::lit(options.backtrack);
        }
        let Some((trial, ft, gt)) = accepted else {
            report.line_search_failures += 1;
            log::warn!(
                "line search failed after {} backtracks",
                options.max_backtracks
            );
            if history.is_empty() {
                break;
            }
            history.clear();
            continue;
        };
        let gt = match gt {
            Some(g) => g,
            None => f(&trial, true)?.1.expect("gradient requested"),
        };
        let s: Vec<T> = trial.iter().zip(&x).map(|(&a, &b)| a - b).collect();
        let y: Vec<T> = gt.iter().zip(&g).map(|(&a, &b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > T::zero() {
            if history.len() == options.memory {
                history.pop_front();
            }
            history.push_back((s, y, T::one() / sy));
        }
        x = trial;
        fx = ft;
        g = gt;
        report.accepted_values.push(fx);
    }
    report.gradient_norm = max_abs(&g);
    if report.gradient_norm <= tol {
        report.converged = true;
    }
    report.x = x;
    report.value = fx;
    Ok(report)
}

/// Two-loop recursion; without history, a unit-length steepest-descent step.
fn direction<T: Real>(g: &[T], history: &VecDeque<(Vec<T>, Vec<T>, T)>) -> Vec<T> {
    let Some((s_last, y_last, _)) = history.back() else {
        let norm = dot(g, g).sqrt();
        return g.iter().map(|&x| -x / norm).collect();
    };
    let mut q = g.to_vec();
    let mut alphas = Vec::with_capacity(history.len());
    for (s, y, rho) in history.iter().rev() {
        let a = *rho * dot(s, &q);
        for (qi, &yi) in q.iter_mut().zip(y) {
            *qi = *qi - a * yi;
        }
        alphas.push(a);
    }
    let gamma = dot(s_last, y_last) / dot(y_last, y_last);
    for qi in q.iter_mut() {
        *qi = *qi * gamma;
    }
    for ((s, y, rho), a) in history.iter().zip(alphas.into_iter().rev()) {
        let b = *rho * dot(y, &q);
        for (qi, &si) in q.iter_mut().zip(s) {
            *qi = *qi + (a - b) * si;
        }
    }
    q.iter().map(|&x| -x).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rosenbrock(x: &[f64], grad: bool) -> Result<(f64, Option<Vec<f64>>)> {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = grad.then(|| {
            vec![
                -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
                200.0 * (b - a * a),
            ]
        });
        Ok((f, g))
    }

    #[test]
    fn solves_rosenbrock() {
        let opts = LbfgsOptions {
            max_iterations: 200,
            ..Default::default()
        };
        let r = minimize(rosenbrock, vec![-1.2, 1.0], &opts).unwrap();
        assert!(r.converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6);
        assert!(r.accepted_values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn quadratic_converges_quickly() {
        let f = |x: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let v = 0.5 * (x[0] - 3.0).powi(2) + 2.0 * (x[1] + 1.0).powi(2);
            Ok((v, grad.then(|| vec![x[0] - 3.0, 4.0 * (x[1] + 1.0)])))
        };
        let r = minimize(
            f,
            vec![0.0, 0.0],
            &LbfgsOptions {
                max_iterations: 20,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.x[0] - 3.0).abs() < 1e-8 && (r.x[1] + 1.0).abs() < 1e-8);
    }

    #[test]
    fn optimum_is_left_alone() {
        let f = |x: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            Ok(((x[0] - 1.0).powi(2), grad.then(|| vec![2.0 * (x[0] - 1.0)])))
        };
        let r = minimize(f, vec![1.0], &LbfgsOptions::default()).unwrap();
        assert_eq!(r.x, vec![1.0]);
        assert_eq!(r.iterations, 0);
    }

    #[test]
    fn infeasible_region_triggers_backtracking() {
        // -log(x) + x, minimum at 1, undefined for x <= 0.
        let f = |x: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            let v = if x[0] > 0.0 {
                -x[0].ln() + x[0]
            } else {
                f64::INFINITY
            };
            Ok((v, grad.then(|| vec![-1.0 / x[0] + 1.0])))
        };
        let r = minimize(
            f,
            vec![0.05],
            &LbfgsOptions {
                max_iterations: 50,
                ..Default::default()
            },
        )
        .unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-6);
        assert!(r.accepted_values.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn failed_line_search_keeps_iterate() {
        // Gradient points the wrong way, so no step decreases the value.
        let f = |x: &[f64], grad: bool| -> Result<(f64, Option<Vec<f64>>)> {
            Ok((x[0], grad.then(|| vec![-1.0])))
        };
        let r = minimize(f, vec![0.0], &LbfgsOptions::default()).unwrap();
        assert_eq!(r.x, vec![0.0]);
        assert_eq!(r.line_search_failures, 1);
    }
}
