//! Zero-sum projections, numerical Legendre transforms and finite differences.
//!
//! Tangent vectors `s` and cotangent vectors `xi` on the probability simplex
//! both live in `{v : sum v_i = 0}` (cotangents modulo constants). The
//! conjugate `sup_xi <xi, s> - f(xi)` is therefore computed over the zero-sum
//! subspace, parametrized by the first `J - 1` coordinates with the last one
//! fixed by `xi_J = -sum_{k<J} xi_k`. This removes the constant-shift null
//! direction that makes Hessians of `f` singular.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::util::{dot, norm_inf};

/// Sum tolerance for tangent vectors, relative to `max(1, |s|_1)`.
pub const TANGENT_SUM_TOL: f64 = 1e-12;

/// A velocity on the simplex: entries sum to zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentVector(Vec<f64>);

impl TangentVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("tangent vector has non-finite entries"));
        }
        let sum: f64 = entries.iter().sum();
        let scale = entries.iter().map(|x| x.abs()).sum::<f64>().max(1.0);
        if sum.abs() > TANGENT_SUM_TOL * scale {
            return Err(Error::invalid(format!(
                "tangent vector entries sum to {sum:e}, expected 0"
            )));
        }
        Ok(Self(entries))
    }

    /// Zero-sum projection of an arbitrary vector.
    pub fn projected(v: &[f64]) -> Result<Self> {
        Ok(Self(project_zero_sum(v)?))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| c * x).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for TangentVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// A potential on the states, defined modulo additive constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CotangentVector(Vec<f64>);

impl CotangentVector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if entries.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("cotangent vector has non-finite entries"));
        }
        Ok(Self(entries))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// The zero-sum representative of the class `xi + R*1`.
    pub fn canonical(&self) -> Self {
        let mean = self.0.iter().sum::<f64>() / self.0.len() as f64;
        Self(self.0.iter().map(|x| x - mean).collect())
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self(self.0.iter().map(|x| c * x).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for CotangentVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// `v - mean(v)`.
pub fn project_zero_sum(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::invalid("cannot project an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::invalid("non-finite entry in project_zero_sum"));
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    Ok(v.iter().map(|x| x - mean).collect())
}

/// Central-difference gradient. Error is `O(h^2)` for `C^3` functions.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut xp = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let xi = xp[i];
        xp[i] = xi + h;
        let fp = f(&xp);
        xp[i] = xi - h;
        let fm = f(&xp);
        xp[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite function value in finite differences along coordinate {i}"
            )));
        }
        grad.push((fp - fm) / (2.0 * h));
    }
    Ok(grad)
}

/// A convex function on `R^J`. Non-finite values are treated as `+inf`.
///
/// Implementors that can supply a closed-form gradient and Hessian should do
/// so; otherwise central differences are used.
pub trait ConvexFunction {
    fn value(&self, x: &[f64]) -> f64;

    fn gradient(&self, _x: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn hessian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }
}

impl<T: ConvexFunction + ?Sized> ConvexFunction for &T {
    fn value(&self, x: &[f64]) -> f64 {
        (**self).value(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        (**self).gradient(x)
    }
    fn hessian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        (**self).hessian(x)
    }
}

/// Value-only convex function backed by a closure.
pub struct FnObjective<F>(pub F);

impl<F: Fn(&[f64]) -> f64> ConvexFunction for FnObjective<F> {
    fn value(&self, x: &[f64]) -> f64 {
        (self.0)(x)
    }
}

/// Closure-backed convex function with a closed-form gradient.
pub struct SmoothObjective<F, G> {
    pub value: F,
    pub gradient: G,
}

impl<F, G> ConvexFunction for SmoothObjective<F, G>
where
    F: Fn(&[f64]) -> f64,
    G: Fn(&[f64]) -> Vec<f64>,
{
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }
    fn gradient(&self, x: &[f64]) -> Option<Vec<f64>> {
        Some((self.gradient)(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConjugateOptions {
    /// Stopping tolerance on the sup-norm of the reduced gradient.
    pub tol: f64,
    pub max_iter: usize,
    /// Backtracking factor of the Armijo line search.
    pub armijo_factor: f64,
    /// Sufficient-decrease slope parameter.
    pub armijo_slope: f64,
    /// Iterates with `|xi|_inf` reaching this bound signal an unbounded sup.
    pub box_bound: f64,
}

impl Default for ConjugateOptions {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 200,
            armijo_factor: 0.5,
            armijo_slope: 1e-4,
            box_bound: 50.0,
        }
    }
}

impl ConjugateOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateResult {
    /// `sup_xi <xi, s> - f(xi)`.
    pub value: f64,
    /// Maximizer, as a zero-sum vector.
    pub argmax: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the reduced gradient of the objective at `argmax`.
    pub residual_norm: f64,
}

/// Convex conjugate `sup_xi <xi, s> - f(xi)` over zero-sum `xi`.
///
/// Damped Newton with Armijo backtracking; a coordinate-wise grid search
/// re-seeds Newton when the line search stalls.
pub fn conjugate<F: ConvexFunction + ?Sized>(
    f: &F,
    s: &[f64],
    x0: &[f64],
    opts: &ConjugateOptions,
) -> Result<ConjugateResult> {
    let dim = s.len();
    if dim < 2 {
        return Err(Error::invalid("conjugate needs dimension >= 2"));
    }
    if x0.len() != dim {
        return Err(Error::invalid("x0 and s have different lengths"));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("conjugate tolerance must be positive"));
    }
    if s.iter().chain(x0).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite entries in s or x0"));
    }
    let problem = Reduced { f, s, dim };
    let x0 = project_zero_sum(x0)?;
    let mut y: Vec<f64> = x0[..dim - 1].to_vec();
    if norm_inf(&x0) > opts.box_bound {
        y.iter_mut().for_each(|v| *v = 0.0);
    }

    let mut h = problem.objective(&y);
    if !h.is_finite() {
        y.iter_mut().for_each(|v| *v = 0.0);
        h = problem.objective(&y);
        if !h.is_finite() {
            return Err(Error::invalid("objective is not finite at the starting point"));
        }
    }

    let mut fallbacks = 0usize;
    let mut iterations = 0usize;
    let mut grad = problem.gradient(&y);
    let mut gnorm = norm_inf(&grad);

    while iterations < opts.max_iter {
        if gnorm <= opts.tol {
            return Ok(problem.result(&y, h, true, iterations, gnorm));
        }
        iterations += 1;
        let dir = newton_direction(&problem, &y, &grad);
        match line_search(&problem, &y, h, &grad, &dir, opts) {
            Step::Accepted { y: y_new, value, hit_box } => {
                if hit_box {
                    return Err(Error::UnboundedConjugate { bound: opts.box_bound });
                }
                y = y_new;
                h = value;
                grad = problem.gradient(&y);
                gnorm = norm_inf(&grad);
            }
            Step::Stalled => {
                if fallbacks >= 3 {
                    break;
                }
                fallbacks += 1;
                let (y_new, value) = grid_search(&problem, &y, h, opts.box_bound);
                if problem.at_box(&y_new, opts.box_bound) {
                    return Err(Error::UnboundedConjugate { bound: opts.box_bound });
                }
                y = y_new;
                h = value;
                grad = problem.gradient(&y);
                gnorm = norm_inf(&grad);
            }
        }
    }
    if gnorm <= opts.tol {
        return Ok(problem.result(&y, h, true, iterations, gnorm));
    }
    Err(Error::NoConvergence {
        iterations,
        residual: gnorm,
        best_value: -h,
        best_point: problem.lift(&y),
    })
}

struct Reduced<'a, F: ?Sized> {
    f: &'a F,
    s: &'a [f64],
    dim: usize,
}

impl<F: ConvexFunction + ?Sized> Reduced<'_, F> {
    fn lift(&self, y: &[f64]) -> Vec<f64> {
        let mut xi = y.to_vec();
        xi.push(-y.iter().sum::<f64>());
        xi
    }

    /// `f(xi) - <xi, s>`, minimized.
    fn objective(&self, y: &[f64]) -> f64 {
        let xi = self.lift(y);
        let v = self.f.value(&xi) - dot(&xi, self.s);
        if v.is_nan() {
            f64::INFINITY
        } else {
            v
        }
    }

    fn full_gradient(&self, xi: &[f64]) -> Vec<f64> {
        match self.f.gradient(xi) {
            Some(g) => g,
            None => {
                let step = f64::EPSILON.cbrt() * (1.0 + norm_inf(xi));
                let mut xp = xi.to_vec();
                (0..xi.len())
                    .map(|i| {
                        let v = xp[i];
                        xp[i] = v + step;
                        let fp = self.f.value(&xp);
                        xp[i] = v - step;
                        let fm = self.f.value(&xp);
                        xp[i] = v;
                        (fp - fm) / (2.0 * step)
                    })
                    .collect()
            }
        }
    }

    fn gradient(&self, y: &[f64]) -> Vec<f64> {
        let xi = self.lift(y);
        let mut g = self.full_gradient(&xi);
        for (gi, si) in g.iter_mut().zip(self.s) {
            *gi -= si;
        }
        let last = g[self.dim - 1];
        g[..self.dim - 1].iter().map(|v| v - last).collect()
    }

    fn full_hessian(&self, xi: &[f64]) -> DMatrix<f64> {
        if let Some(hess) = self.f.hessian(xi) {
            return hess;
        }
        let n = xi.len();
        let step = 1e-6 * (1.0 + norm_inf(xi));
        let mut hess = DMatrix::zeros(n, n);
        let mut xp = xi.to_vec();
        for j in 0..n {
            let v = xp[j];
            xp[j] = v + step;
            let gp = self.full_gradient(&xp);
            xp[j] = v - step;
            let gm = self.full_gradient(&xp);
            xp[j] = v;
            for i in 0..n {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * step);
            }
        }
        (&hess + hess.transpose()) * 0.5
    }

    fn hessian(&self, y: &[f64]) -> DMatrix<f64> {
        let xi = self.lift(y);
        let full = self.full_hessian(&xi);
        let m = self.dim - 1;
        let last = self.dim - 1;
        DMatrix::from_fn(m, m, |k, l| {
            full[(k, l)] - full[(k, last)] - full[(last, l)] + full[(last, last)]
        })
    }

    fn at_box(&self, y: &[f64], bound: f64) -> bool {
        norm_inf(&self.lift(y)) >= bound * (1.0 - 1e-9)
    }

    fn result(&self, y: &[f64], h: f64, converged: bool, iterations: usize, gnorm: f64) -> ConjugateResult {
        ConjugateResult {
            value: -h,
            argmax: self.lift(y),
            converged,
            iterations,
            residual_norm: gnorm,
        }
    }
}

fn newton_direction<F: ConvexFunction + ?Sized>(problem: &Reduced<'_, F>, y: &[f64], grad: &[f64]) -> Vec<f64> {
    let hess = problem.hessian(y);
    let g = DVector::from_column_slice(grad);
    if hess.iter().all(|v| v.is_finite()) {
        let scale = hess.diagonal().amax().max(1e-300);
        let mut shift = 0.0;
        for _ in 0..8 {
            let shifted = &hess + DMatrix::identity(hess.nrows(), hess.ncols()) * shift;
            if let Some(chol) = shifted.cholesky() {
                let d = -chol.solve(&g);
                if d.iter().all(|v| v.is_finite()) {
                    return d.iter().copied().collect();
                }
            }
            shift = if shift == 0.0 { 1e-10 * scale } else { shift * 100.0 };
        }
    }
    grad.iter().map(|v| -v).collect()
}

enum Step {
    Accepted { y: Vec<f64>, value: f64, hit_box: bool },
    Stalled,
}

fn line_search<F: ConvexFunction + ?Sized>(
    problem: &Reduced<'_, F>,
    y: &[f64],
    h: f64,
    grad: &[f64],
    dir: &[f64],
    opts: &ConjugateOptions,
) -> Step {
    let mut slope = dot(grad, dir);
    let mut dir = dir.to_vec();
    if !(slope < 0.0) {
        dir = grad.iter().map(|v| -v).collect();
        slope = dot(grad, &dir);
    }
    // Keep trial points inside the box; remember whether the box cut the step.
    let mut t = 1.0;
    let mut truncated = false;
    let trial = |t: f64| -> Vec<f64> { y.iter().zip(&dir).map(|(a, b)| a + t * b).collect() };
    while norm_inf(&problem.lift(&trial(t))) > opts.box_bound {
        t *= opts.armijo_factor;
        truncated = true;
        if t < 1e-300 {
            return Step::Stalled;
        }
    }
    if truncated {
        // Largest step reaching the box along `dir`.
        let (mut lo, mut hi) = (t, t / opts.armijo_factor);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if norm_inf(&problem.lift(&trial(mid))) > opts.box_bound {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        t = lo;
    }
    let gnorm = norm_inf(grad);
    let mut first = true;
    loop {
        let y_new = trial(t);
        let v = problem.objective(&y_new);
        let armijo = v <= h + opts.armijo_slope * t * slope;
        // Near the optimum the decrease drops below rounding; accept a full
        // step that does not increase the value and shrinks the gradient.
        let rounding_ok = first
            && v <= h + 1e-14 * (1.0 + h.abs())
            && norm_inf(&problem.gradient(&y_new)) < gnorm;
        if v.is_finite() && (armijo || rounding_ok) {
            let hit_box = truncated && first && problem.at_box(&y_new, opts.box_bound);
            return Step::Accepted { y: y_new, value: v, hit_box };
        }
        first = false;
        t *= opts.armijo_factor;
        if t < 1e-14 {
            return Step::Stalled;
        }
    }
}

/// Cyclic coordinate search on shrinking 1-D grids; returns the best point.
fn grid_search<F: ConvexFunction + ?Sized>(problem: &Reduced<'_, F>, y0: &[f64], h0: f64, bound: f64) -> (Vec<f64>, f64) {
    let mut y = y0.to_vec();
    let mut best = h0;
    let mut radius = (1.0 + norm_inf(y0)).min(bound);
    const POINTS: usize = 41;
    for _ in 0..40 {
        for k in 0..y.len() {
            let center = y[k];
            for p in 0..POINTS {
                let offset = radius * (2.0 * p as f64 / (POINTS - 1) as f64 - 1.0);
                let mut cand = y.clone();
                cand[k] = center + offset;
                if norm_inf(&problem.lift(&cand)) > bound {
                    continue;
                }
                let v = problem.objective(&cand);
                if v < best {
                    best = v;
                    y = cand;
                }
            }
        }
        radius *= 0.5;
        if radius < 1e-12 {
            break;
        }
    }
    (y, best)
}
