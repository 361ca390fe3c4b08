//! Log-domain entropic optimal transport between particle clouds with the
//! squared Euclidean cost.
//!
//! The solver alternates the two soft-min updates on the dual potentials and
//! never exponentiates the raw kernel. A solution keeps the cost matrix and the
//! log-coupling so that gradients, adjoint solves and diagnostics can reuse them.

use std::cell::RefCell;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::measures::ParticleCloud;

/// Problems smaller than this many cost entries are solved on one thread.
const PAR_THRESHOLD: usize = 16_384;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SinkhornError {
    #[error("source has dim {src} but target has dim {dst}")]
    DimMismatch { src: usize, dst: usize },
    #[error("cost matrix has non-finite entries")]
    NonFiniteCost,
    #[error("dual potentials became non-finite at iteration {0}")]
    NonFinitePotential(usize),
    #[error("Sinkhorn did not converge: marginal error {marginal_error:.3e} after {iterations} iterations")]
    NonConvergence { iterations: usize, marginal_error: f64 },
    #[error("invalid Sinkhorn config: {0}")]
    InvalidConfig(String),
    #[error("warm start has lengths ({f}, {g}) but problem is {n}x{m}")]
    WarmStartShape { f: usize, g: usize, n: usize, m: usize },
}

fn default_max_iters() -> usize {
    5000
}

fn default_tol() -> f64 {
    1e-9
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    /// Stop once the ℓ1 marginal error drops to this value.
    #[serde(default = "default_tol")]
    pub tol: f64,
    /// Anneal ε geometrically from the cost scale on cold starts.
    #[serde(default = "default_true")]
    pub eps_scaling: bool,
    /// Interleave Newton steps on the dual with the alternating sweeps.
    #[serde(default)]
    pub newton: bool,
}

impl SinkhornConfig {
    pub fn new(epsilon: f64) -> Self {
        Self { epsilon, max_iters: default_max_iters(), tol: default_tol(), eps_scaling: true, newton: false }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iters(mut self, max_iters: usize) -> Self {
        self.max_iters = max_iters;
        self
    }

    pub fn with_newton(mut self) -> Self {
        self.newton = true;
        self
    }

    pub fn without_scaling(mut self) -> Self {
        self.eps_scaling = false;
        self
    }

    pub fn validate(&self) -> Result<(), SinkhornError> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(SinkhornError::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if !(self.tol > 0.0) {
            return Err(SinkhornError::InvalidConfig(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iters == 0 {
            return Err(SinkhornError::InvalidConfig("max_iters must be >= 1".into()));
        }
        Ok(())
    }
}

/// `C_ij = ‖x_i − y_j‖²`, computed from differences (no expansion).
pub fn cost_matrix(x: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<Array2<f64>, SinkhornError> {
    if x.ncols() != y.ncols() {
        return Err(SinkhornError::DimMismatch { src: x.ncols(), dst: y.ncols() });
    }
    let mut c = Array2::zeros((x.nrows(), y.nrows()));
    let fill = |(mut row, xi): (ndarray::ArrayViewMut1<f64>, ArrayView1<f64>)| {
        for (cij, yj) in row.iter_mut().zip(y.outer_iter()) {
            *cij = xi.iter().zip(yj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        }
    };
    if x.nrows() * y.nrows() >= PAR_THRESHOLD {
        c.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(x.axis_iter(Axis(0)).into_par_iter())
            .for_each(fill);
    } else {
        c.axis_iter_mut(Axis(0)).zip(x.axis_iter(Axis(0))).for_each(fill);
    }
    Ok(c)
}

/// A (possibly flagged) Sinkhorn fixed point.
#[derive(Debug, Clone)]
pub struct SinkhornSolution {
    pub f: Array1<f64>,
    pub g: Array1<f64>,
    pub log_coupling: Array2<f64>,
    pub cost: Array2<f64>,
    pub source: ParticleCloud,
    pub target: ParticleCloud,
    pub epsilon: f64,
    pub iterations: usize,
    pub marginal_error: f64,
    pub converged: bool,
}

/// Terms below `e^-LSE_CUTOFF` of the largest do not move a log-sum-exp in f64.
const LSE_CUTOFF: f64 = 40.0;
/// Slack kept in the supports so they survive this much drift of the potential (in units of ε).
const SUPPORT_MARGIN: f64 = 20.0;

/// Per-row index sets outside which every soft-min term is below the cutoff.
/// Built against a reference potential and valid while the potential's
/// oscillation relative to it stays under `SUPPORT_MARGIN · ε`.
struct Supports {
    sets: Vec<Vec<u32>>,
    reference: Vec<f64>,
    eps: f64,
}

/// The soft-min `out_i = −ε LSE_j(log w_j + (h_j − C_ij)/ε)` over the rows of `c`.
struct SoftMin<'a> {
    c: &'a Array2<f64>,
    log_w: &'a [f64],
    supports: RefCell<Option<Supports>>,
}

fn drift_oscillation(h: &[f64], reference: &[f64]) -> f64 {
    let (lo, hi) = h
        .iter()
        .zip(reference)
        .map(|(x, r)| x - r)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    hi - lo
}

impl<'a> SoftMin<'a> {
    fn new(c: &'a Array2<f64>, log_w: &'a [f64]) -> Self {
        Self { c, log_w, supports: RefCell::new(None) }
    }

    fn sweep(&self, h: &[f64], eps: f64, out: &mut [f64]) {
        self.refresh(h, eps);
        let guard = self.supports.borrow();
        let sets = &guard.as_ref().expect("supports built").sets;
        let inv = 1.0 / eps;
        let row = |((o, ci), set): ((&mut f64, ArrayView1<f64>), &Vec<u32>)| {
            let ci = ci.as_slice().expect("standard layout");
            let z = |j: &u32| {
                let j = *j as usize;
                self.log_w[j] + (h[j] - ci[j]) * inv
            };
            let max = set.iter().map(z).fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                *o = -eps * max;
                return;
            }
            let sum: f64 = set.iter().map(|j| z(j) - max).filter(|d| *d > -LSE_CUTOFF).map(f64::exp).sum();
            *o = -eps * (max + sum.ln());
        };
        if self.c.len() >= PAR_THRESHOLD {
            out.par_iter_mut().zip(self.c.axis_iter(Axis(0)).into_par_iter()).zip(sets.par_iter()).for_each(row);
        } else {
            out.iter_mut().zip(self.c.axis_iter(Axis(0))).zip(sets).for_each(row);
        }
    }

    /// Rebuilds the supports against `h` when they are missing or stale.
    fn refresh(&self, h: &[f64], eps: f64) {
        let stale = match &*self.supports.borrow() {
            None => true,
            Some(s) => s.eps != eps || !(drift_oscillation(h, &s.reference) <= SUPPORT_MARGIN * eps),
        };
        if !stale {
            return;
        }
        let inv = 1.0 / eps;
        let keep = -(LSE_CUTOFF + SUPPORT_MARGIN);
        let build = |ci: ArrayView1<f64>| -> Vec<u32> {
            let ci = ci.as_slice().expect("standard layout");
            let z = |j: usize| self.log_w[j] + (h[j] - ci[j]) * inv;
            let max = (0..ci.len()).map(z).fold(f64::NEG_INFINITY, f64::max);
            if !max.is_finite() {
                return (0..ci.len() as u32).collect();
            }
            (0..ci.len()).filter(|&j| z(j) - max > keep).map(|j| j as u32).collect()
        };
        let sets = if self.c.len() >= PAR_THRESHOLD {
            self.c.axis_iter(Axis(0)).into_par_iter().map(build).collect()
        } else {
            self.c.axis_iter(Axis(0)).map(build).collect()
        };
        *self.supports.borrow_mut() = Some(Supports { sets, reference: h.to_vec(), eps });
    }
}

struct Problem<'a> {
    rows: SoftMin<'a>,
    cols: SoftMin<'a>,
    a: ArrayView1<'a, f64>,
    b: ArrayView1<'a, f64>,
}

/// Plain sweeps before the first Newton attempt.
const NEWTON_WARMUP: usize = 3;
const NEWTON_DAMPING_INIT: f64 = 1e-3;
const NEWTON_DAMPING_MIN: f64 = 1e-12;
const NEWTON_DAMPING_MAX: f64 = 1e2;

impl Problem<'_> {
    fn row_error(&self, f: &[f64], f_next: &[f64], eps: f64) -> f64 {
        // Row sums of (f, g) are a_i exp((f_i − f̃_i)/ε), where f̃ is the next
        // f sweep, so the check costs nothing extra.
        self.a
            .iter()
            .zip(f.iter().zip(f_next))
            .map(|(ai, (fo, fnew))| ai * (((fo - fnew) / eps).exp() - 1.0).abs())
            .sum()
    }

    /// Runs alternating sweeps at a fixed ε starting from `g`, optionally
    /// interleaved with Newton steps on the dual. Returns the number of
    /// iterations and the row-marginal ℓ1 error of the returned `(f, g)`; the
    /// column marginal is exact after each `g` sweep.
    fn iterate(
        &self,
        eps: f64,
        f: &mut [f64],
        g: &mut [f64],
        tol: f64,
        max_iters: usize,
        newton: bool,
    ) -> Result<(usize, f64), SinkhornError> {
        let mut f_next = vec![0.0; f.len()];
        self.rows.sweep(g, eps, f);
        self.cols.sweep(f, eps, g);
        let mut err;
        let mut it = 1;
        // Levenberg–Marquardt damping of the Newton system; None once given up.
        let mut damping = newton.then_some(NEWTON_DAMPING_INIT);
        loop {
            self.rows.sweep(g, eps, &mut f_next);
            err = self.row_error(f, &f_next, eps);
            if !err.is_finite() || f_next.iter().any(|v| !v.is_finite()) {
                return Err(SinkhornError::NonFinitePotential(it));
            }
            if err <= tol || it >= max_iters {
                break;
            }
            if let Some(delta) = damping.filter(|_| it >= NEWTON_WARMUP) {
                it += 1;
                let gain = self
                    .newton_direction(eps, f, g, err, delta)
                    .and_then(|df| self.try_step(eps, f, g, &df, err));
                damping = match gain {
                    Some(ratio) if ratio < 0.5 => Some((delta * 0.1).max(NEWTON_DAMPING_MIN)),
                    // Slow but steady progress usually means the damping is
                    // masking a weakly coupled mode.
                    Some(_) => Some((delta / 3.0).max(NEWTON_DAMPING_MIN)),
                    None => Some(delta * 10.0).filter(|d| *d <= NEWTON_DAMPING_MAX),
                };
                if gain.is_some() {
                    continue;
                }
                if it >= max_iters {
                    break;
                }
            }
            f.copy_from_slice(&f_next);
            self.cols.sweep(f, eps, g);
            it += 1;
        }
        Ok((it, err))
    }

    /// Moves to `f + df`, re-sweeping `g`, if that lowers the marginal error.
    /// Returns the error ratio on success and leaves `(f, g)` untouched otherwise.
    fn try_step(&self, eps: f64, f: &mut [f64], g: &mut [f64], df: &[f64], err: f64) -> Option<f64> {
        let f2: Vec<f64> = f.iter().zip(df).map(|(fi, d)| fi + d).collect();
        let mut g2 = vec![0.0; g.len()];
        let mut f2_next = vec![0.0; f.len()];
        self.cols.sweep(&f2, eps, &mut g2);
        self.rows.sweep(&g2, eps, &mut f2_next);
        let err2 = self.row_error(&f2, &f2_next, eps);
        if err2.is_finite() && err2 < err {
            f.copy_from_slice(&f2);
            g.copy_from_slice(&g2);
            return Some(err2 / err);
        }
        None
    }

    /// Damped inexact Newton direction on the concave dual restricted to `f`:
    /// `ε (S + δ diag(a, b))⁻¹ ρ` with `S = [[diag r, P], [Pᵀ, diag c]]` and `ρ`
    /// the log-marginal residual, solved by CG on the sparse coupling.
    fn newton_direction(&self, eps: f64, f: &[f64], g: &[f64], err: f64, delta: f64) -> Option<Vec<f64>> {
        let (n, m) = (f.len(), g.len());
        // The row supports are current for g after the sweep that measured err.
        self.rows.refresh(g, eps);
        let guard = self.rows.supports.borrow();
        let sets = &guard.as_ref().expect("supports built").sets;
        let inv = 1.0 / eps;
        let plan: Vec<Vec<(u32, f64)>> = sets
            .iter()
            .enumerate()
            .map(|(i, set)| {
                let base = self.a[i].ln() + f[i] * inv;
                set.iter()
                    .map(|&j| {
                        let ju = j as usize;
                        (j, (base + self.rows.log_w[ju] + (g[ju] - self.rows.c[[i, ju]]) * inv).exp())
                    })
                    .collect()
            })
            .collect();
        let r: Vec<f64> = plan.iter().map(|row| row.iter().map(|(_, p)| p).sum()).collect();
        let mut c = vec![0.0; m];
        for row in &plan {
            for &(j, p) in row {
                c[j as usize] += p;
            }
        }
        // Newton on log-marginals: the residual r·log(a/r) equals a − r to first
        // order but stays bounded on rows that carry almost no mass.
        let log_res = |target: f64, got: f64| if got > 0.0 { got * (target / got).ln() } else { 0.0 };
        let rhs: Vec<f64> = (0..n)
            .map(|i| log_res(self.a[i], r[i]))
            .chain((0..m).map(|j| log_res(self.b[j], c[j])))
            .collect();
        // Jacobi preconditioning: CG on D⁻¹(S + δ diag(a, b)) in the D inner product.
        let diag: Vec<f64> = (0..n).map(|i| r[i] + delta * self.a[i]).chain((0..m).map(|j| c[j] + delta * self.b[j])).collect();
        let apply = |v: &[f64], y: &mut [f64]| {
            let (vf, vg) = v.split_at(n);
            let (yf, yg) = y.split_at_mut(n);
            yg.iter_mut().zip(vg).zip(&diag[n..]).for_each(|((yj, vj), dj)| *yj = dj * vj);
            for (i, row) in plan.iter().enumerate() {
                let mut acc = diag[i] * vf[i];
                for &(j, p) in row {
                    acc += p * vg[j as usize];
                    yg[j as usize] += p * vf[i];
                }
                yf[i] = acc;
            }
            y.iter_mut().zip(&diag).for_each(|(yk, dk)| *yk /= dk);
        };
        let inner = |u: &[f64], v: &[f64]| u.iter().zip(v).zip(&diag).map(|((x, y), d)| x * y * d).sum();
        let rhs: Vec<f64> = rhs.iter().zip(&diag).map(|(x, d)| x / d).collect();
        let forcing = err.sqrt().clamp(1e-10, 0.1);
        let out = crate::linalg::conjugate_gradient(apply, inner, |_: &mut [f64]| {}, &rhs, forcing, 4 * (n + m));
        if out.solution.iter().any(|v| !v.is_finite()) {
            return None;
        }
        // The g part is dropped: the step re-sweeps g exactly from f.
        Some(out.solution[..n].iter().map(|d| eps * d).collect())
    }
}

const WARM_REANNEAL_ERR: f64 = 0.3;
const WARM_REANNEAL_LEVELS: i32 = 3;

/// Solves the entropic problem from a cold start.
pub fn sinkhorn_solve(src: &ParticleCloud, dst: &ParticleCloud, cfg: &SinkhornConfig) -> Result<SinkhornSolution, SinkhornError> {
    sinkhorn_solve_warm(src, dst, cfg, None)
}

/// Solves the entropic problem, optionally starting from a previous `g`.
pub fn sinkhorn_solve_warm(
    src: &ParticleCloud,
    dst: &ParticleCloud,
    cfg: &SinkhornConfig,
    warm_g: Option<ArrayView1<f64>>,
) -> Result<SinkhornSolution, SinkhornError> {
    cfg.validate()?;
    let cost = cost_matrix(src.points(), dst.points())?;
    solve_with_cost(src, dst, cost, cfg, warm_g)
}

/// Solves with a precomputed cost matrix between `src` and `dst`.
pub fn solve_with_cost(
    src: &ParticleCloud,
    dst: &ParticleCloud,
    cost: Array2<f64>,
    cfg: &SinkhornConfig,
    warm_g: Option<ArrayView1<f64>>,
) -> Result<SinkhornSolution, SinkhornError> {
    cfg.validate()?;
    let (n, m) = (src.len(), dst.len());
    if cost.dim() != (n, m) {
        return Err(SinkhornError::DimMismatch { src: cost.nrows(), dst: cost.ncols() });
    }
    if cost.iter().any(|v| !v.is_finite()) {
        return Err(SinkhornError::NonFiniteCost);
    }
    let cost = cost.as_standard_layout().into_owned();
    let ct = cost.t().as_standard_layout().into_owned();
    let a = src.weights();
    let b = dst.weights();
    let log_a: Vec<f64> = a.iter().map(|w| w.ln()).collect();
    let log_b: Vec<f64> = b.iter().map(|w| w.ln()).collect();
    let problem = Problem { rows: SoftMin::new(&cost, &log_b), cols: SoftMin::new(&ct, &log_a), a, b };

    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let mut used = 0;
    match warm_g {
        Some(w) if w.len() != m => {
            return Err(SinkhornError::WarmStartShape { f: n, g: w.len(), n, m });
        }
        Some(w) => {
            g.copy_from_slice(w.as_slice().unwrap_or(&w.to_vec()));
            if cfg.eps_scaling {
                // A warm start that is far off at the target ε is re-annealed
                // from a few doublings above it, keeping its potentials.
                let (it, err) = problem.iterate(cfg.epsilon, &mut f, &mut g, cfg.tol, 1, false)?;
                used += it;
                if err > WARM_REANNEAL_ERR {
                    for level in (1..=WARM_REANNEAL_LEVELS).rev() {
                        let eps = cfg.epsilon * 2f64.powi(level);
                        let (it, _) = problem.iterate(eps, &mut f, &mut g, cfg.tol.max(1e-3), 10, false)?;
                        used += it;
                    }
                }
            }
        }
        None if cfg.eps_scaling => {
            let cmax = cost.iter().copied().fold(0.0, f64::max);
            let mut eps = cmax;
            while eps > 2.0 * cfg.epsilon {
                let (it, _) = problem.iterate(eps, &mut f, &mut g, cfg.tol.max(1e-3), 20, false)?;
                used += it;
                eps *= 0.5;
            }
        }
        None => {}
    }
    let budget = cfg.max_iters.saturating_sub(used).max(1);
    let (it, err) = problem.iterate(cfg.epsilon, &mut f, &mut g, cfg.tol, budget, cfg.newton)?;
    used += it;

    let mut f = Array1::from(f);
    let mut g = Array1::from(g);
    let shift = a.dot(&f);
    f -= shift;
    g += shift;

    let eps = cfg.epsilon;
    let mut log_coupling = Array2::zeros((n, m));
    let fill = |(mut row, (ci, (fi, lai))): (ndarray::ArrayViewMut1<f64>, (ArrayView1<f64>, (&f64, &f64)))| {
        for (((p, cij), gj), lbj) in row.iter_mut().zip(ci.iter()).zip(g.iter()).zip(log_b.iter()) {
            *p = lai + lbj + (fi + gj - cij) / eps;
        }
    };
    log_coupling
        .axis_iter_mut(Axis(0))
        .into_par_iter()
        .zip(cost.axis_iter(Axis(0)).into_par_iter().zip(f.as_slice().unwrap().par_iter().zip(log_a.par_iter())))
        .for_each(fill);

    Ok(SinkhornSolution {
        f,
        g,
        log_coupling,
        cost,
        source: src.clone(),
        target: dst.clone(),
        epsilon: eps,
        iterations: used,
        marginal_error: err,
        converged: err <= cfg.tol,
    })
}

impl SinkhornSolution {
    /// Turns a flagged solution into a hard error.
    pub fn require_converged(self) -> Result<Self, SinkhornError> {
        if self.converged {
            Ok(self)
        } else {
            Err(SinkhornError::NonConvergence { iterations: self.iterations, marginal_error: self.marginal_error })
        }
    }

    pub fn n(&self) -> usize {
        self.f.len()
    }

    pub fn m(&self) -> usize {
        self.g.len()
    }

    pub fn coupling(&self) -> Array2<f64> {
        self.log_coupling.mapv(f64::exp)
    }

    /// Current row sums of the coupling.
    pub fn row_sums(&self) -> Array1<f64> {
        self.coupling().sum_axis(Axis(1))
    }

    /// Current column sums of the coupling.
    pub fn col_sums(&self) -> Array1<f64> {
        self.coupling().sum_axis(Axis(0))
    }

    /// Dual objective `Σ a_i f_i + Σ b_j g_j`.
    pub fn entropic_cost(&self) -> f64 {
        self.source.weights().dot(&self.f) + self.target.weights().dot(&self.g)
    }

    /// Primal objective `⟨P, C⟩ + ε KL(P ‖ a⊗b)` of the current coupling.
    pub fn primal_cost(&self) -> f64 {
        let a = self.source.weights();
        let b = self.target.weights();
        let mut total = 0.0;
        for ((i, j), lp) in self.log_coupling.indexed_iter() {
            let p = lp.exp();
            if p > 0.0 {
                total += p * self.cost[[i, j]] + self.epsilon * p * (lp - a[i].ln() - b[j].ln());
            }
        }
        total - self.epsilon * (self.coupling().sum() - 1.0)
    }

    /// Row `i` is `∇f(x_i) = 2 Σ_j π_ij (x_i − y_j)` with `π` the
    /// row-normalised coupling, i.e. the gradient of the soft-min extension of
    /// `f` at the source atoms.
    pub fn potential_gradient_source(&self) -> Array2<f64> {
        barycentric_gradient(self.log_coupling.view(), self.source.points(), self.target.points())
    }

    /// Row `j` is `∇g(y_j) = 2 Σ_i π_ij (y_j − x_i)` with `π` normalised over `i`.
    pub fn potential_gradient_target(&self) -> Array2<f64> {
        barycentric_gradient(self.log_coupling.t(), self.target.points(), self.source.points())
    }
}

/// `2 (x_i − Σ_j softmax_j(L_i·) y_j)` for every row `i` of `log_p`.
fn barycentric_gradient(log_p: ArrayView2<f64>, x: ArrayView2<f64>, y: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(x.dim());
    let body = |(mut o, (lp, xi)): (ndarray::ArrayViewMut1<f64>, (ArrayView1<f64>, ArrayView1<f64>))| {
        let max = lp.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        o.fill(0.0);
        for (l, yj) in lp.iter().zip(y.outer_iter()) {
            let w = (l - max).exp();
            z += w;
            o.scaled_add(w, &yj);
        }
        Zip::from(&mut o).and(&xi).for_each(|oi, &xv| *oi = 2.0 * (xv - *oi / z));
    };
    if log_p.len() >= PAR_THRESHOLD {
        out.axis_iter_mut(Axis(0))
            .into_par_iter()
            .zip(log_p.axis_iter(Axis(0)).into_par_iter().zip(x.axis_iter(Axis(0)).into_par_iter()))
            .for_each(body);
    } else {
        out.axis_iter_mut(Axis(0)).zip(log_p.axis_iter(Axis(0)).zip(x.axis_iter(Axis(0)))).for_each(body);
    }
    out
}

/// Debiased divergence `OT(α,β) − ½OT(α,α) − ½OT(β,β)`, for diagnostics only.
pub fn sinkhorn_divergence(src: &ParticleCloud, dst: &ParticleCloud, cfg: &SinkhornConfig) -> Result<f64, SinkhornError> {
    let ab = sinkhorn_solve(src, dst, cfg)?.entropic_cost();
    let aa = sinkhorn_solve(src, src, cfg)?.entropic_cost();
    let bb = sinkhorn_solve(dst, dst, cfg)?.entropic_cost();
    Ok(ab - 0.5 * (aa + bb))
}
