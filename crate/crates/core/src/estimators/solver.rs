//! Gauss–Newton with backtracking line search.

use nalgebra::{DMatrix, DVector};

/// A nonlinear least-squares objective `f(p) = ‖r(p)‖²`.
pub trait LeastSquaresProblem {
    fn residuals(&self, params: &DVector<f64>) -> DVector<f64>;
    fn jacobian(&self, params: &DVector<f64>) -> DMatrix<f64>;

    /// Hook applied after every accepted step (e.g. angle wrapping).
    fn normalize(&self, _params: &mut DVector<f64>) {}
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussNewtonOptions {
    pub max_iterations: usize,
    /// Stop when `‖∇f‖` drops below this.
    pub gradient_tol: f64,
    /// Stop when the accepted step is shorter than this.
    pub step_tol: f64,
    /// Largest `‖∇f‖` at which a stalled run still counts as converged.
    pub stationary_tol: f64,
    pub max_backtracks: usize,
}

impl Default for GaussNewtonOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tol: 1e-10,
            step_tol: 1e-12,
            stationary_tol: 1e-6,
            max_backtracks: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    Gradient,
    Step,
    LineSearch,
    MaxIterations,
    NonFinite,
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub params: DVector<f64>,
    pub objective: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    pub termination: Termination,
    /// Objective at the start and after each accepted step.
    pub trace: Vec<f64>,
}

fn objective(r: &DVector<f64>) -> f64 {
    r.norm_squared()
}

/// Solves `(JᵀJ + λI) δ = −Jᵀr`, starting from λ = 0 and raising it only if
/// the normal matrix is not numerically positive definite.
fn gn_direction(j: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
    let jtj = j.transpose() * j;
    let rhs = -(j.transpose() * r);
    let scale = jtj.diagonal().amax().max(f64::MIN_POSITIVE);
    let mut lambda = 0.0;
    for _ in 0..12 {
        let mut m = jtj.clone();
        for i in 0..m.nrows() {
            m[(i, i)] += lambda;
        }
        if let Some(ch) = m.cholesky() {
            let delta = ch.solve(&rhs);
            if delta.iter().all(|v| v.is_finite()) {
                return Some(delta);
            }
        }
        lambda = if lambda == 0.0 {
            1e-12 * scale
        } else {
            lambda * 100.0
        };
    }
    None
}

pub fn gauss_newton<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    init: &DVector<f64>,
    opts: &GaussNewtonOptions,
) -> Solution {
    let mut params = init.clone();
    problem.normalize(&mut params);
    let mut r = problem.residuals(&params);
    let mut f = objective(&r);
    let mut trace = vec![f];
    let mut iterations = 0;
    let mut grad_norm;
    let termination = loop {
        if !f.is_finite() {
            grad_norm = f64::INFINITY;
            break Termination::NonFinite;
        }
        let j = problem.jacobian(&params);
        grad_norm = 2.0 * (j.transpose() * &r).norm();
        if grad_norm < opts.gradient_tol {
            break Termination::Gradient;
        }
        if iterations >= opts.max_iterations {
            break Termination::MaxIterations;
        }
        let Some(delta) = gn_direction(&j, &r) else {
            break Termination::LineSearch;
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let mut trial = &params + &delta * step;
            problem.normalize(&mut trial);
            let tr = problem.residuals(&trial);
            let tf = objective(&tr);
            if tf.is_finite() && tf <= f {
                accepted = Some((trial, tr, tf));
                break;
            }
            step *= 0.5;
        }
        let Some((trial, tr, tf)) = accepted else {
            break Termination::LineSearch;
        };
        let step_len = delta.norm() * step;
        params = trial;
        r = tr;
        f = tf;
        trace.push(f);
        iterations += 1;
        if step_len < opts.step_tol {
            let j = problem.jacobian(&params);
            grad_norm = 2.0 * (j.transpose() * &r).norm();
            break Termination::Step;
        }
    };
    let converged = match termination {
        Termination::Gradient => true,
        Termination::Step | Termination::LineSearch => grad_norm <= opts.stationary_tol,
        Termination::MaxIterations | Termination::NonFinite => false,
    };
    Solution {
        params,
        objective: f,
        gradient_norm: grad_norm,
        iterations,
        converged,
        termination,
        trace,
    }
}

/// Scaled inverse Gauss–Newton Hessian `σ̂²(JᵀJ)⁻¹`, with `σ̂²` the residual
/// variance. `None` when the problem has no redundancy or `JᵀJ` is singular.
pub fn covariance_estimate<P: LeastSquaresProblem + ?Sized>(
    problem: &P,
    params: &DVector<f64>,
    objective: f64,
) -> Option<DMatrix<f64>> {
    let j = problem.jacobian(params);
    let (n, p) = j.shape();
    if n <= p {
        return None;
    }
    let inv = (j.transpose() * &j).try_inverse()?;
    let sigma2 = objective / (n - p) as f64;
    Some(inv * sigma2)
}

/// Central finite-difference Jacobian of `f`.
pub fn finite_difference_jacobian(
    f: impl Fn(&DVector<f64>) -> DVector<f64>,
    params: &DVector<f64>,
    step: f64,
) -> DMatrix<f64> {
    let base = f(params);
    let mut jac = DMatrix::zeros(base.len(), params.len());
    for i in 0..params.len() {
        let mut plus = params.clone();
        let mut minus = params.clone();
        plus[i] += step;
        minus[i] -= step;
        let col = (f(&plus) - f(&minus)) / (2.0 * step);
        jac.set_column(i, &col);
    }
    jac
}
