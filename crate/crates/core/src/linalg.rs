//! Matrix-free Krylov and power-iteration kernels shared by the implicit
//! differentiation and Hodge modules.
//!
//! Every routine works on flat `f64` slices and takes the operator, the inner
//! product and an optional projector as closures. The projector is applied to
//! right-hand sides and iterates, which is how gauge directions and other known
//! kernels are kept out of a solve.

use ndarray::{Array1, Array2};

/// Outcome of a conjugate-gradient solve.
#[derive(Debug, Clone)]
pub struct CgOutcome {
    pub solution: Vec<f64>,
    pub iterations: usize,
    /// Residual norm relative to the (projected) right-hand side norm.
    pub relative_residual: f64,
    pub converged: bool,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Conjugate gradients for an operator that is self-adjoint and positive
/// semi-definite with respect to `inner`.
///
/// `project` must be the orthogonal projector (in `inner`) onto the subspace
/// the solution should live in; pass a no-op when the operator is definite.
pub fn conjugate_gradient<A, I, P>(
    apply: A,
    inner: I,
    project: P,
    rhs: &[f64],
    tol: f64,
    max_iters: usize,
) -> CgOutcome
where
    A: Fn(&[f64], &mut [f64]),
    I: Fn(&[f64], &[f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let n = rhs.len();
    let mut b = rhs.to_vec();
    project(&mut b);
    let b_norm = inner(&b, &b).max(0.0).sqrt();
    let mut x = vec![0.0; n];
    if b_norm == 0.0 {
        return CgOutcome {
            solution: x,
            iterations: 0,
            relative_residual: 0.0,
            converged: true,
        };
    }
    let mut r = b.clone();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = inner(&r, &r);
    let mut iterations = 0;
    let mut rel = 1.0;
    while iterations < max_iters {
        apply(&p, &mut ap);
        project(&mut ap);
        let pap = inner(&p, &ap);
        if pap <= 0.0 || !pap.is_finite() {
            break;
        }
        let alpha = rr / pap;
        axpy(alpha, &p, &mut x);
        axpy(-alpha, &ap, &mut r);
        iterations += 1;
        let rr_new = inner(&r, &r);
        rel = rr_new.max(0.0).sqrt() / b_norm;
        if rel <= tol {
            break;
        }
        let beta = rr_new / rr;
        rr = rr_new;
        for (pi, ri) in p.iter_mut().zip(&r) {
            *pi = ri + beta * *pi;
        }
    }
    project(&mut x);
    CgOutcome {
        solution: x,
        iterations,
        relative_residual: rel,
        converged: rel <= tol,
    }
}

/// Result of a power or inverse iteration.
#[derive(Debug, Clone)]
pub struct EigenEstimate {
    pub value: f64,
    pub vector: Vec<f64>,
    pub iterations: usize,
}

/// Power iteration for the largest eigenvalue of a self-adjoint PSD operator.
/// Returns the Rayleigh quotient of the final iterate.
pub fn power_iteration<A, I, P>(
    apply: A,
    inner: I,
    project: P,
    start: &[f64],
    iters: usize,
    tol: f64,
) -> EigenEstimate
where
    A: Fn(&[f64], &mut [f64]),
    I: Fn(&[f64], &[f64]) -> f64,
    P: Fn(&mut [f64]),
{
    let n = start.len();
    let mut v = start.to_vec();
    project(&mut v);
    let nv = inner(&v, &v).sqrt();
    if nv == 0.0 {
        return EigenEstimate {
            value: 0.0,
            vector: v,
            iterations: 0,
        };
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut av = vec![0.0; n];
    let mut value = 0.0;
    let mut iterations = 0;
    for _ in 0..iters {
        apply(&v, &mut av);
        project(&mut av);
        let rq = inner(&v, &av);
        iterations += 1;
        let na = inner(&av, &av).sqrt();
        if na == 0.0 {
            value = 0.0;
            break;
        }
        let done = (rq - value).abs() <= tol * rq.abs().max(f64::MIN_POSITIVE) && iterations > 2;
        value = rq;
        for (vi, ai) in v.iter_mut().zip(&av) {
            *vi = ai / na;
        }
        if done {
            break;
        }
    }
    EigenEstimate {
        value,
        vector: v,
        iterations,
    }
}

/// Estimate of the spectral norm of a dense matrix by power iteration on
/// `WᵀW` from the all-ones start vector.
pub fn spectral_norm_estimate(w: &Array2<f64>, iters: usize) -> f64 {
    let cols = w.ncols();
    if cols == 0 || w.nrows() == 0 {
        return 0.0;
    }
    let mut v = Array1::from_elem(cols, 1.0 / (cols as f64).sqrt());
    let mut sigma = 0.0;
    for _ in 0..iters {
        let wv = w.dot(&v);
        sigma = wv.dot(&wv).sqrt();
        let wtwv = w.t().dot(&wv);
        let n = wtwv.dot(&wtwv).sqrt();
        if n == 0.0 {
            return sigma;
        }
        v = wtwv / n;
    }
    let wv = w.dot(&v);
    sigma.max(wv.dot(&wv).sqrt())
}

/// Numerically stable `log Σ exp(x_i)`; `-inf` for an empty or all `-inf` input.
pub fn logsumexp<I>(values: I) -> f64
where
    I: IntoIterator<Item = f64> + Clone,
{
    let max = values.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    let sum: f64 = values.into_iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}
