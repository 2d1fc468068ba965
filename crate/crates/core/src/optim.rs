//! Limited-memory quasi-Newton minimizer.
//!
//! Standard L-BFGS: inverse-Hessian action built from a short history of
//! (step, gradient-change) pairs via the two-loop recursion, with a weak-Wolfe
//! line search. Everything is plain `f64` arithmetic with no hidden state, so
//! a given starting point and callback always produce the same iterate path.

use nalgebra::DVector;

/// Objective callback: writes the gradient at `x` into `grad` and returns the
/// objective value.
pub trait Objective {
    fn eval(&mut self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64;
}

impl<F: FnMut(&DVector<f64>, &mut DVector<f64>) -> f64> Objective for F {
    fn eval(&mut self, x: &DVector<f64>, grad: &mut DVector<f64>) -> f64 {
        self(x, grad)
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerConfig {
    /// Number of curvature pairs retained.
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the gradient infinity norm falls below this.
    pub gradient_tolerance: f64,
    /// Stop after two consecutive relative objective decreases below this.
    /// Zero disables the test.
    pub objective_tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 2000,
            gradient_tolerance: 1e-8,
            objective_tolerance: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerResult {
    pub x: DVector<f64>,
    pub objective: f64,
    /// Gradient infinity norm at the returned point.
    pub gradient_norm: f64,
    pub iterations: usize,
    pub evaluations: usize,
    /// True when the gradient tolerance was met.
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const WOLFE_C2: f64 = 0.9;
const MAX_LINE_SEARCH: usize = 40;

/// Minimizes `f` starting from `x0`. Returns the best iterate seen; whether
/// the gradient tolerance was met is reported in `converged`.
pub fn minimize<F: Objective>(f: &mut F, x0: DVector<f64>, cfg: &OptimizerConfig) -> OptimizerResult {
    let n = x0.len();
    let mut x = x0;
    let mut grad = DVector::zeros(n);
    let mut fx = f.eval(&x, &mut grad);
    let mut evaluations = 1usize;

    let mut best_x = x.clone();
    let mut best_f = fx;
    let mut best_g = grad.amax();

    // curvature history, newest last
    let mut s_hist: Vec<DVector<f64>> = Vec::new();
    let mut y_hist: Vec<DVector<f64>> = Vec::new();
    let mut rho_hist: Vec<f64> = Vec::new();

    let mut stall_count = 0usize;
    let mut iterations = 0usize;
    let mut converged = grad.amax() <= cfg.gradient_tolerance;

    while !converged && iterations < cfg.max_iterations {
        iterations += 1;

        let mut dir = two_loop_direction(&grad, &s_hist, &y_hist, &rho_hist);
        let mut dir_dot_g = dir.dot(&grad);
        if !(dir_dot_g < 0.0) {
            // not a descent direction: restart from steepest descent
            s_hist.clear();
            y_hist.clear();
            rho_hist.clear();
            dir = -&grad;
            dir_dot_g = dir.dot(&grad);
            if !(dir_dot_g < 0.0) {
                break; // gradient is zero or non-finite
            }
        }

        let alpha_init = if s_hist.is_empty() {
            (1.0 / grad.norm()).min(1.0)
        } else {
            1.0
        };

        let ls = line_search(f, &x, fx, &grad, &dir, dir_dot_g, alpha_init, &mut evaluations);
        let Some(ls) = ls else { break };

        let step = &dir * ls.alpha;
        let new_x = &x + &step;
        let y = &ls.grad - &grad;
        let sy = step.dot(&y);
        if sy > 1e-12 * step.norm() * y.norm() {
            if s_hist.len() == cfg.memory {
                s_hist.remove(0);
                y_hist.remove(0);
                rho_hist.remove(0);
            }
            s_hist.push(step);
            y_hist.push(y);
            rho_hist.push(1.0 / sy);
        }

        let decrease = fx - ls.value;
        x = new_x;
        fx = ls.value;
        grad = ls.grad;

        if fx < best_f {
            best_f = fx;
            best_x = x.clone();
            best_g = grad.amax();
        }

        converged = grad.amax() <= cfg.gradient_tolerance;
        if converged {
            best_f = fx;
            best_x = x.clone();
            best_g = grad.amax();
            break;
        }

        if cfg.objective_tolerance > 0.0 {
            // relative to the pre-step value so progress toward an exact zero
            // still counts as progress
            let rel = decrease / (fx + decrease).abs().max(f64::MIN_POSITIVE);
            if rel <= cfg.objective_tolerance {
                stall_count += 1;
                if stall_count >= 2 {
                    break;
                }
            } else {
                stall_count = 0;
            }
        }
    }

    OptimizerResult {
        x: best_x,
        objective: best_f,
        gradient_norm: best_g,
        iterations,
        evaluations,
        converged,
    }
}

/// Two-loop recursion: applies the implicit inverse-Hessian approximation to
/// the negated gradient.
pub(crate) fn two_loop_direction(
    grad: &DVector<f64>,
    s_hist: &[DVector<f64>],
    y_hist: &[DVector<f64>],
    rho_hist: &[f64],
) -> DVector<f64> {
    let m = s_hist.len();
    let mut q = -grad.clone();
    if m == 0 {
        return q;
    }
    let mut alphas = vec![0.0; m];
    for i in (0..m).rev() {
        alphas[i] = rho_hist[i] * s_hist[i].dot(&q);
        q.axpy(-alphas[i], &y_hist[i], 1.0);
    }
    // initial inverse-Hessian scale from the newest pair
    let last = m - 1;
    let gamma = s_hist[last].dot(&y_hist[last]) / y_hist[last].dot(&y_hist[last]);
    q *= gamma;
    for i in 0..m {
        let beta = rho_hist[i] * y_hist[i].dot(&q);
        q.axpy(alphas[i] - beta, &s_hist[i], 1.0);
    }
    q
}

struct LineSearchHit {
    alpha: f64,
    value: f64,
    grad: DVector<f64>,
}

/// Weak-Wolfe line search by bracketing and bisection.
#[allow(clippy::too_many_arguments)]
fn line_search<F: Objective>(
    f: &mut F,
    x: &DVector<f64>,
    fx: f64,
    _grad: &DVector<f64>,
    dir: &DVector<f64>,
    dir_dot_g: f64,
    alpha_init: f64,
    evaluations: &mut usize,
) -> Option<LineSearchHit> {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut alpha = alpha_init;
    let mut trial_grad = DVector::zeros(x.len());
    let mut fallback: Option<LineSearchHit> = None;

    for _ in 0..MAX_LINE_SEARCH {
        let trial_x = x + dir * alpha;
        let trial_f = f.eval(&trial_x, &mut trial_grad);
        *evaluations += 1;

        if !trial_f.is_finite() {
            hi = alpha;
            alpha = 0.5 * (lo + hi);
            continue;
        }

        if trial_f <= fx + ARMIJO_C1 * alpha * dir_dot_g {
            let keep = match &fallback {
                Some(prev) => trial_f < prev.value,
                None => true,
            };
            if keep {
                fallback = Some(LineSearchHit {
                    alpha,
                    value: trial_f,
                    grad: trial_grad.clone(),
                });
            }
        }

        if trial_f > fx + ARMIJO_C1 * alpha * dir_dot_g {
            hi = alpha;
        } else if trial_grad.dot(dir) < WOLFE_C2 * dir_dot_g {
            lo = alpha;
        } else {
            return Some(LineSearchHit {
                alpha,
                value: trial_f,
                grad: trial_grad,
            });
        }

        alpha = if hi.is_finite() {
            0.5 * (lo + hi)
        } else {
            2.0 * alpha
        };
        if alpha < 1e-20 || alpha > 1e20 {
            break;
        }
    }

    // no Wolfe point found; fall back to the best Armijo point if any
    fallback.filter(|h| h.value < fx)
}
