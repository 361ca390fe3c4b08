//! Gradients of the entropic cost with respect to particle positions.
//!
//! Three routes are provided: the envelope formula evaluated at the current
//! coupling, an implicit-function correction that solves one linear system with
//! the Jacobian of the Sinkhorn optimality conditions, and reverse-mode
//! differentiation through an explicitly unrolled run of `L` iterations.
//!
//! With `r`, `c` the current row and column sums of the coupling `P`, the
//! optimality conditions `(a − r, b − c) = 0` have Jacobian `S / ε` where
//! `S = [[diag r, P], [Pᵀ, diag c]]`. `S` is symmetric positive semi-definite
//! with kernel spanned by the gauge direction `(1, −1)`. The operator
//! `H = diag(r, c)⁻¹ S = [[I, P/r], [Pᵀ/c, I]]` is the block form with
//! row-stochastic off-diagonal blocks.

use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{conjugate_gradient, dot, power_iteration};
use crate::measures::ParticleCloud;
use crate::sinkhorn::{cost_matrix, sinkhorn_solve, SinkhornConfig, SinkhornError, SinkhornSolution};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ImplicitError {
    #[error("linear solve stalled: relative residual {residual:.3e} after {iterations} iterations")]
    SolverStalled { residual: f64, iterations: usize },
    #[error("cotangent has lengths ({f}, {g}) but problem is {n}x{m}")]
    CotangentShape { f: usize, g: usize, n: usize, m: usize },
    #[error("non-finite cotangent")]
    NonFiniteCotangent,
    #[error("unrolled differentiation needs L >= 1")]
    ZeroIterations,
    #[error(transparent)]
    Sinkhorn(#[from] SinkhornError),
}

/// Linear solver for the adjoint system.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AdjointSolver {
    #[default]
    Cg,
    /// Truncated Neumann series with `terms` terms.
    Neumann { terms: usize },
}

/// Default number of Neumann terms.
pub const NEUMANN_TERMS: usize = 50;

/// Matrix-free view of the optimality Jacobian at a solution.
#[derive(Debug, Clone)]
pub struct OptimalityJacobian {
    p: Array2<f64>,
    r: Array1<f64>,
    c: Array1<f64>,
}

impl OptimalityJacobian {
    pub fn new(sol: &SinkhornSolution) -> Self {
        let p = sol.coupling();
        let r = p.sum_axis(Axis(1));
        let c = p.sum_axis(Axis(0));
        Self { p, r, c }
    }

    pub fn n(&self) -> usize {
        self.r.len()
    }

    pub fn m(&self) -> usize {
        self.c.len()
    }

    pub fn coupling(&self) -> &Array2<f64> {
        &self.p
    }

    /// Diagonal of `diag(r, c)`.
    pub fn diagonal(&self) -> Vec<f64> {
        self.r.iter().chain(self.c.iter()).copied().collect()
    }

    /// `y = S v`.
    pub fn apply_s(&self, v: &[f64], y: &mut [f64]) {
        let n = self.n();
        let (vf, vg) = v.split_at(n);
        let pg = self.p.dot(&ArrayView1::from(vg));
        let pf = self.p.t().dot(&ArrayView1::from(vf));
        for i in 0..n {
            y[i] = self.r[i] * vf[i] + pg[i];
        }
        for j in 0..self.m() {
            y[n + j] = pf[j] + self.c[j] * vg[j];
        }
    }

    /// `y = H v` with `H = diag(r, c)⁻¹ S`.
    pub fn apply_h(&self, v: &[f64], y: &mut [f64]) {
        self.apply_s(v, y);
        for (yi, di) in y.iter_mut().zip(self.diagonal()) {
            *yi /= di;
        }
    }

    /// Dense `H`, for tests and small diagnostics.
    pub fn dense_h(&self) -> Array2<f64> {
        let (n, m) = (self.n(), self.m());
        let mut h = Array2::eye(n + m);
        for i in 0..n {
            for j in 0..m {
                h[[i, n + j]] = self.p[[i, j]] / self.r[i];
                h[[n + j, i]] = self.p[[i, j]] / self.c[j];
            }
        }
        h
    }

    /// Dense symmetric `S`.
    pub fn dense_s(&self) -> Array2<f64> {
        let (n, m) = (self.n(), self.m());
        let mut s = Array2::zeros((n + m, n + m));
        s.slice_mut(ndarray::s![..n, n..]).assign(&self.p);
        s.slice_mut(ndarray::s![n.., ..n]).assign(&self.p.t());
        for i in 0..n {
            s[[i, i]] = self.r[i];
        }
        for j in 0..m {
            s[[n + j, n + j]] = self.c[j];
        }
        s
    }

    fn project_gauge(&self, v: &mut [f64]) {
        let n = self.n();
        let len = v.len() as f64;
        let along = (v[..n].iter().sum::<f64>() - v[n..].iter().sum::<f64>()) / len;
        v[..n].iter_mut().for_each(|x| *x -= along);
        v[n..].iter_mut().for_each(|x| *x += along);
    }

    /// Solves `S μ = rhs` on the complement of the gauge direction.
    pub fn solve_s(&self, rhs: &[f64], solver: AdjointSolver, tol: f64, max_iters: usize) -> Result<Vec<f64>, ImplicitError> {
        match solver {
            AdjointSolver::Cg => {
                let out = conjugate_gradient(|v, y| self.apply_s(v, y), dot, |v| self.project_gauge(v), rhs, tol, max_iters);
                if !out.converged {
                    return Err(ImplicitError::SolverStalled { residual: out.relative_residual, iterations: out.iterations });
                }
                Ok(out.solution)
            }
            AdjointSolver::Neumann { terms } => Ok(self.neumann(rhs, terms)),
        }
    }

    /// `S μ = rhs` written as `(I + K) μ = D⁻¹ rhs` with `K = H − I`. `K` is
    /// self-adjoint in the `D`-inner product with eigenvalue `−1` on the gauge
    /// direction and `+1` on `(1, 1)`; both are removed before summing the
    /// series, and the `(1, 1)` component is inverted exactly.
    fn neumann(&self, rhs: &[f64], terms: usize) -> Vec<f64> {
        let d = self.diagonal();
        let n = self.n();
        let mut w: Vec<f64> = rhs.iter().zip(&d).map(|(b, di)| b / di).collect();
        let d_inner = |x: &[f64], y: &[f64]| x.iter().zip(y).zip(&d).map(|((a, b), di)| a * b * di).sum::<f64>();
        let ones: Vec<f64> = vec![1.0; w.len()];
        let gauge: Vec<f64> = (0..w.len()).map(|k| if k < n { 1.0 } else { -1.0 }).collect();
        let total = d_inner(&ones, &ones);
        let alpha = d_inner(&w, &ones) / total;
        let beta = d_inner(&w, &gauge) / total;
        for k in 0..w.len() {
            w[k] -= alpha * ones[k] + beta * gauge[k];
        }
        let mut sum = w.clone();
        let mut term = w;
        let mut next = vec![0.0; sum.len()];
        for _ in 1..terms {
            self.apply_h(&term, &mut next);
            for k in 0..next.len() {
                // (−K) t = t − H t
                term[k] -= next[k];
                sum[k] += term[k];
            }
        }
        sum.iter_mut().for_each(|s| *s += 0.5 * alpha);
        self.project_gauge(&mut sum);
        sum
    }
}

/// Solves `Hᵀ λ = cot` in the gauge-fixed subspace. Since `Hᵀ = S D⁻¹`, this is
/// `S μ = cot` followed by `λ = D μ`.
pub fn ift_adjoint_solve(
    sol: &SinkhornSolution,
    cotangent_f: ArrayView1<f64>,
    cotangent_g: ArrayView1<f64>,
    solver: AdjointSolver,
    tol: f64,
    max_iters: usize,
) -> Result<(Array1<f64>, Array1<f64>), ImplicitError> {
    let (n, m) = (sol.n(), sol.m());
    if cotangent_f.len() != n || cotangent_g.len() != m {
        return Err(ImplicitError::CotangentShape { f: cotangent_f.len(), g: cotangent_g.len(), n, m });
    }
    if cotangent_f.iter().chain(cotangent_g.iter()).any(|v| !v.is_finite()) {
        return Err(ImplicitError::NonFiniteCotangent);
    }
    let jac = OptimalityJacobian::new(sol);
    let rhs: Vec<f64> = cotangent_f.iter().chain(cotangent_g.iter()).copied().collect();
    let mu = jac.solve_s(&rhs, solver, tol, max_iters)?;
    let lambda: Vec<f64> = mu.iter().zip(jac.diagonal()).map(|(x, d)| x * d).collect();
    Ok((Array1::from(lambda[..n].to_vec()), Array1::from(lambda[n..].to_vec())))
}

/// Position gradients from a weight matrix `G`: `gX_i = 2 Σ_j G_ij (x_i − y_j)`,
/// `gY_j = 2 Σ_i G_ij (y_j − x_i)`.
fn chain_to_positions(weights: &Array2<f64>, x: &Array2<f64>, y: &Array2<f64>) -> (Array2<f64>, Array2<f64>) {
    let row = weights.sum_axis(Axis(1));
    let col = weights.sum_axis(Axis(0));
    let wy = weights.dot(y);
    let wtx = weights.t().dot(x);
    let gx = (x * &row.insert_axis(Axis(1)) - wy) * 2.0;
    let gy = (y * &col.insert_axis(Axis(1)) - wtx) * 2.0;
    (gx, gy)
}

fn owned_points(c: &ParticleCloud) -> Array2<f64> {
    c.points().to_owned()
}

/// Envelope gradient of the entropic cost: the cost derivative contracted with
/// the current coupling.
pub fn grad_positions_envelope(sol: &SinkhornSolution) -> (Array2<f64>, Array2<f64>) {
    chain_to_positions(&sol.coupling(), &owned_points(&sol.source), &owned_points(&sol.target))
}

/// Settings for the implicit correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IftOptions {
    pub solver: AdjointSolver,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for IftOptions {
    fn default() -> Self {
        Self { solver: AdjointSolver::Cg, tol: 1e-12, max_iters: 1000 }
    }
}

/// Implicit-function gradient. The cotangent of the dual objective with
/// respect to the potentials is the marginal residual `(a − r, b − c)`; the
/// adjoint `μ = S⁻¹ (a − r, b − c)` reweights the coupling to
/// `P_ij (1 + μ_f,i + μ_g,j)`, which vanishes into the envelope formula at an
/// exact fixed point.
pub fn grad_positions_ift(sol: &SinkhornSolution, opts: &IftOptions) -> Result<(Array2<f64>, Array2<f64>), ImplicitError> {
    let jac = OptimalityJacobian::new(sol);
    let (n, m) = (sol.n(), sol.m());
    let a = sol.source.weights();
    let b = sol.target.weights();
    let rhs: Vec<f64> = (0..n).map(|i| a[i] - jac.r[i]).chain((0..m).map(|j| b[j] - jac.c[j])).collect();
    let mu = if rhs.iter().all(|v| *v == 0.0) {
        vec![0.0; n + m]
    } else {
        jac.solve_s(&rhs, opts.solver, opts.tol, opts.max_iters)?
    };
    let mut w = jac.p.clone();
    for ((i, j), v) in w.indexed_iter_mut() {
        *v *= 1.0 + mu[i] + mu[n + j];
    }
    Ok(chain_to_positions(&w, &owned_points(&sol.source), &owned_points(&sol.target)))
}

/// Scalar cells retained for the reverse pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TapeCounter {
    pub cells_stored: usize,
    pub iterations: usize,
}

/// State kept by the implicit route: one coupling plus both potentials,
/// independent of the number of forward iterations.
pub fn ift_retained_cells(n: usize, m: usize) -> usize {
    n * m + n + m
}

fn row_softmax(log_w: &mut Array2<f64>) {
    log_w.axis_iter_mut(Axis(0)).into_par_iter().for_each(|mut row| {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - max).exp());
        let z = row.sum();
        row /= z;
    });
}

/// Runs exactly `L` alternating updates from `f = g = 0`, records the tape and
/// back-propagates the loss `Σ a_i f_i + Σ b_j g_j` to the positions.
pub fn unrolled_grad(
    src: &ParticleCloud,
    dst: &ParticleCloud,
    epsilon: f64,
    iters: usize,
) -> Result<(Array2<f64>, Array2<f64>, TapeCounter), ImplicitError> {
    if iters == 0 {
        return Err(ImplicitError::ZeroIterations);
    }
    SinkhornConfig::new(epsilon).validate()?;
    let x = owned_points(src);
    let y = owned_points(dst);
    let cost = cost_matrix(x.view(), y.view())?;
    let (n, m) = cost.dim();
    let a = src.weights().to_owned();
    let b = dst.weights().to_owned();
    let log_a = a.mapv(f64::ln);
    let log_b = b.mapv(f64::ln);
    let eps = epsilon;

    // Tape: per iteration the log-coupling at (f^l, g^l) and both potentials.
    let mut tape_logp: Vec<Array2<f64>> = Vec::with_capacity(iters);
    let mut tape_f: Vec<Array1<f64>> = Vec::with_capacity(iters);
    let mut tape_g: Vec<Array1<f64>> = Vec::with_capacity(iters);
    let mut g = Array1::<f64>::zeros(m);
    for _ in 0..iters {
        let f = Array1::from_iter((0..n).map(|i| {
            let row = cost.row(i);
            -eps * crate::linalg::logsumexp((0..m).map(|j| log_b[j] + (g[j] - row[j]) / eps))
        }));
        g = Array1::from_iter((0..m).map(|j| {
            let col = cost.column(j);
            -eps * crate::linalg::logsumexp((0..n).map(|i| log_a[i] + (f[i] - col[i]) / eps))
        }));
        let mut logp = Array2::zeros((n, m));
        for ((i, j), v) in logp.indexed_iter_mut() {
            *v = log_a[i] + log_b[j] + (f[i] + g[j] - cost[[i, j]]) / eps;
        }
        tape_logp.push(logp);
        tape_f.push(f);
        tape_g.push(g.clone());
    }
    let cells_stored = tape_logp.iter().map(|t| t.len()).sum::<usize>()
        + tape_f.iter().map(|v| v.len()).sum::<usize>()
        + tape_g.iter().map(|v| v.len()).sum::<usize>();

    let mut c_bar = Array2::<f64>::zeros((n, m));
    let mut f_bar = a.clone();
    let mut g_bar = b.clone();
    for l in (0..iters).rev() {
        // g^l = T_g(f^l): ∂g_j/∂C_ij = Q_ij, ∂g_j/∂f_i = −Q_ij with Q the
        // column-normalised coupling at (f^l, g^l).
        let mut q = tape_logp[l].t().to_owned();
        row_softmax(&mut q);
        let q = q.reversed_axes();
        c_bar += &(&q * &g_bar.view().insert_axis(Axis(0)));
        f_bar -= &q.dot(&g_bar);
        // f^l = T_f(g^{l−1}): ∂f_i/∂C_ij = R_ij, ∂f_i/∂g_j = −R_ij with R the
        // row-normalised coupling at (f^l, g^{l−1}).
        let mut rmat = tape_logp[l].clone();
        if l > 0 {
            let dg = (&tape_g[l - 1] - &tape_g[l]) / eps;
            rmat += &dg.view().insert_axis(Axis(0));
        } else {
            let dg = -&tape_g[l] / eps;
            rmat += &dg.view().insert_axis(Axis(0));
        }
        row_softmax(&mut rmat);
        c_bar += &(&rmat * &f_bar.view().insert_axis(Axis(1)));
        g_bar = -rmat.t().dot(&f_bar);
        f_bar.fill(0.0);
    }
    let (gx, gy) = chain_to_positions(&c_bar, &x, &y);
    Ok((gx, gy, TapeCounter { cells_stored, iterations: iters }))
}

/// Extremal eigenvalues of `H` on the gauge complement, in the `D`-inner
/// product where it is self-adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConditionEstimate {
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// `λ_max / λ_min`; infinite when the inverse iteration stalled.
    pub kappa: f64,
    pub stalled: bool,
}

/// Power iteration for `λ_max(H)` and inverse iteration (CG inner solves) for
/// `λ_min(H)`, both restricted to the complement of the gauge direction.
pub fn hessian_condition_estimate(sol: &SinkhornSolution, iters: usize) -> ConditionEstimate {
    let jac = OptimalityJacobian::new(sol);
    let n = jac.n();
    let dim = n + jac.m();
    let d = jac.diagonal();
    let d_inner = |x: &[f64], y: &[f64]| x.iter().zip(y).zip(&d).map(|((a, b), di)| a * b * di).sum::<f64>();
    let gauge: Vec<f64> = (0..dim).map(|k| if k < n { 1.0 } else { -1.0 }).collect();
    let gauge_norm = d_inner(&gauge, &gauge);
    let d_project = |v: &mut [f64]| {
        let along = d_inner(v, &gauge) / gauge_norm;
        v.iter_mut().zip(&gauge).for_each(|(x, u)| *x -= along * u);
    };
    // Deterministic start with components on every eigendirection.
    let start: Vec<f64> = (0..dim).map(|k| 1.0 + 0.37 * ((k as f64) * 1.618).sin()).collect();

    let top = power_iteration(|v, y| jac.apply_h(v, y), d_inner, d_project, &start, iters, 1e-14);
    let lambda_max = top.value;

    if dim == 2 {
        // A 1x1 problem leaves a single direction after gauge fixing.
        return ConditionEstimate { lambda_max, lambda_min: lambda_max, kappa: 1.0, stalled: false };
    }

    let mut v = start.clone();
    d_project(&mut v);
    let norm = d_inner(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    let mut lambda_min = f64::NAN;
    let mut hv = vec![0.0; dim];
    let mut stalled = true;
    for _ in 0..iters {
        // H w = v  ⇔  S w = D v.
        let rhs: Vec<f64> = v.iter().zip(&d).map(|(x, di)| x * di).collect();
        let out = conjugate_gradient(|p, y| jac.apply_s(p, y), dot, |p| jac.project_gauge(p), &rhs, 1e-13, 20 * dim);
        if !out.converged || out.solution.iter().any(|x| !x.is_finite()) {
            stalled = true;
            break;
        }
        let mut w = out.solution;
        d_project(&mut w);
        let nw = d_inner(&w, &w).sqrt();
        if nw == 0.0 || !nw.is_finite() {
            stalled = true;
            break;
        }
        w.iter_mut().for_each(|x| *x /= nw);
        jac.apply_h(&w, &mut hv);
        let rq = d_inner(&w, &hv);
        let done = (rq - lambda_min).abs() <= 1e-14 * rq.abs();
        lambda_min = rq;
        v = w;
        stalled = false;
        if done {
            break;
        }
    }
    if stalled || !(lambda_min > 0.0) {
        return ConditionEstimate { lambda_max, lambda_min, kappa: f64::INFINITY, stalled: true };
    }
    ConditionEstimate { lambda_max, lambda_min, kappa: (lambda_max / lambda_min).max(1.0), stalled: false }
}

/// Central finite-difference gradient of the tightly converged entropic cost
/// with respect to every source and target coordinate.
pub fn fd_gradient(
    src: &ParticleCloud,
    dst: &ParticleCloud,
    cfg: &SinkhornConfig,
    h: f64,
) -> Result<(Array2<f64>, Array2<f64>), ImplicitError> {
    let cost_at = |s: &ParticleCloud, t: &ParticleCloud| -> Result<f64, ImplicitError> {
        Ok(sinkhorn_solve(s, t, cfg)?.require_converged()?.entropic_cost())
    };
    let perturb = |cloud: &ParticleCloud, i: usize, k: usize, delta: f64| -> ParticleCloud {
        let mut pts = cloud.points().to_owned();
        pts[[i, k]] += delta;
        cloud.with_points(pts).expect("finite perturbation")
    };
    let coords = |c: &ParticleCloud| (0..c.len()).flat_map(move |i| (0..c.dim()).map(move |k| (i, k))).collect::<Vec<_>>();
    let gx: Result<Vec<f64>, ImplicitError> = coords(src)
        .par_iter()
        .map(|&(i, k)| Ok((cost_at(&perturb(src, i, k, h), dst)? - cost_at(&perturb(src, i, k, -h), dst)?) / (2.0 * h)))
        .collect();
    let gy: Result<Vec<f64>, ImplicitError> = coords(dst)
        .par_iter()
        .map(|&(j, k)| Ok((cost_at(src, &perturb(dst, j, k, h))? - cost_at(src, &perturb(dst, j, k, -h))?) / (2.0 * h)))
        .collect();
    Ok((
        Array2::from_shape_vec(src.points().dim(), gx?).expect("shape"),
        Array2::from_shape_vec(dst.points().dim(), gy?).expect("shape"),
    ))
}

/// `‖g − g_ref‖₁ / ‖g_ref‖₁` over both position blocks.
pub fn l1_relative_error(g: (&Array2<f64>, &Array2<f64>), reference: (&Array2<f64>, &Array2<f64>)) -> f64 {
    let num: f64 = (g.0 - reference.0).mapv(f64::abs).sum() + (g.1 - reference.1).mapv(f64::abs).sum();
    let den: f64 = reference.0.mapv(f64::abs).sum() + reference.1.mapv(f64::abs).sum();
    num / den.max(f64::MIN_POSITIVE)
}

/// One benchmark cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct BenchRow {
    pub N: usize,
    pub L: usize,
    pub epsilon: f64,
    pub grad_err_envelope: f64,
    pub grad_err_ift: f64,
    pub grad_err_unrolled: f64,
    pub tape_cells: usize,
    pub wall_ms: f64,
    pub ift_cells: usize,
    pub wall_ms_ift: f64,
    pub ift_stalled: bool,
}

/// Measures the three gradient routes on one instance. `loose` is the
/// Sinkhorn configuration whose solution feeds the envelope and implicit
/// routes; the reference is a finite difference at `tight` tolerance.
pub fn bench_cell(
    src: &ParticleCloud,
    dst: &ParticleCloud,
    loose: &SinkhornConfig,
    tight: &SinkhornConfig,
    reference: (&Array2<f64>, &Array2<f64>),
    unroll: usize,
) -> Result<BenchRow, ImplicitError> {
    let t0 = Instant::now();
    let sol = sinkhorn_solve(src, dst, loose)?;
    let env = grad_positions_envelope(&sol);
    let (ift, stalled) = match grad_positions_ift(&sol, &IftOptions::default()) {
        Ok(g) => (g, false),
        Err(ImplicitError::SolverStalled { .. }) => (env.clone(), true),
        Err(e) => return Err(e),
    };
    let wall_ms_ift = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let (ux, uy, tape) = unrolled_grad(src, dst, tight.epsilon, unroll)?;
    let wall_ms = t1.elapsed().as_secs_f64() * 1e3;
    Ok(BenchRow {
        N: src.len(),
        L: unroll,
        epsilon: loose.epsilon,
        grad_err_envelope: l1_relative_error((&env.0, &env.1), reference),
        grad_err_ift: l1_relative_error((&ift.0, &ift.1), reference),
        grad_err_unrolled: l1_relative_error((&ux, &uy), reference),
        tape_cells: tape.cells_stored,
        wall_ms,
        ift_cells: ift_retained_cells(sol.n(), sol.m()),
        wall_ms_ift,
        ift_stalled: stalled,
    })
}
