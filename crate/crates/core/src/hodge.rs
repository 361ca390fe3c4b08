//! Linearised sheaf operators on per-particle tangent fields.
//!
//! A 0-cochain assigns a tangent vector to every particle of every node; a
//! 1-cochain assigns, for each edge `u → v`, a vector in the child's space to
//! every pushed parent particle `Φ(x_k)`. The coboundary compares the pushed
//! parent motion `J_Φ(x_k) V_u[k]` with the child motion transported onto the
//! pushed support by the row-normalised entropic plan. Node inner products are
//! weighted by particle weights; edge blocks by the parent's weights.

use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{EdgeSolve, FlowState};
use crate::graph::CausalGraph;
use crate::linalg::{conjugate_gradient, power_iteration};
use crate::mechanism::MechanismError;

/// Below this weighted norm the residual counts as exactly zero.
pub const ZERO_RESIDUAL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HodgeError {
    #[error("field shape mismatch: {0}")]
    Shape(String),
    #[error("linear solve stalled: relative residual {residual:.3e} after {iterations} iterations")]
    SolverStalled { residual: f64, iterations: usize },
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// Per-node `N_v × D_v` tangent vectors.
pub type TangentField = Vec<Array2<f64>>;
/// Per-edge `N_u × D_v` vectors on the pushed parent support.
pub type EdgeCochain = Vec<Array2<f64>>;

/// The coboundary and its adjoint, frozen at one state.
#[derive(Debug, Clone)]
pub struct SheafOperator<'a> {
    graph: &'a CausalGraph,
    state: &'a FlowState,
    /// Row-normalised plans `B_e`.
    aligners: Vec<Array2<f64>>,
}

impl<'a> SheafOperator<'a> {
    pub fn new(graph: &'a CausalGraph, state: &'a FlowState, solves: &[EdgeSolve]) -> Result<Self, HodgeError> {
        if solves.len() != graph.edges().len() {
            return Err(HodgeError::Shape(format!("{} solves for {} edges", solves.len(), graph.edges().len())));
        }
        let aligners = solves
            .par_iter()
            .map(|s| {
                let mut b = s.solution.log_coupling.clone();
                for mut row in b.axis_iter_mut(Axis(0)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    row.mapv_inplace(|v| (v - max).exp());
                    let z = row.sum();
                    row /= z;
                }
                b
            })
            .collect();
        Ok(Self { graph, state, aligners })
    }

    pub fn aligners(&self) -> &[Array2<f64>] {
        &self.aligners
    }

    /// Zero field shaped like the node clouds.
    pub fn zero_field(&self) -> TangentField {
        self.state.clouds.iter().map(|c| Array2::zeros((c.len(), c.dim()))).collect()
    }

    /// Zero cochain shaped like the edge blocks.
    pub fn zero_cochain(&self) -> EdgeCochain {
        self.graph
            .edges()
            .iter()
            .map(|e| Array2::zeros((self.state.clouds[e.src].len(), self.state.clouds[e.dst].dim())))
            .collect()
    }

    fn check_field(&self, v: &TangentField) -> Result<(), HodgeError> {
        let z = self.zero_field();
        if v.len() != z.len() || v.iter().zip(&z).any(|(a, b)| a.dim() != b.dim()) {
            return Err(HodgeError::Shape("tangent field does not match the state".into()));
        }
        Ok(())
    }

    fn check_cochain(&self, w: &EdgeCochain) -> Result<(), HodgeError> {
        let z = self.zero_cochain();
        if w.len() != z.len() || w.iter().zip(&z).any(|(a, b)| a.dim() != b.dim()) {
            return Err(HodgeError::Shape("edge cochain does not match the graph".into()));
        }
        Ok(())
    }

    /// `Σ_v Σ_k a_k ⟨V[k], V'[k]⟩`
    pub fn node_inner(&self, v: &TangentField, w: &TangentField) -> f64 {
        v.iter()
            .zip(w)
            .zip(&self.state.clouds)
            .map(|((a, b), c)| weighted_rows(a, b, c.weights()))
            .sum()
    }

    /// `Σ_e Σ_k a^{src(e)}_k ⟨W[k], W'[k]⟩`
    pub fn edge_inner(&self, v: &EdgeCochain, w: &EdgeCochain) -> f64 {
        v.iter()
            .zip(w)
            .zip(self.graph.edges())
            .map(|((a, b), e)| weighted_rows(a, b, self.state.clouds[e.src].weights()))
            .sum()
    }

    /// `(dV)_e[k] = J_Φ(x_k) V_u[k] − Σ_l B_kl V_v[l]`.
    pub fn coboundary(&self, v: &TangentField) -> Result<EdgeCochain, HodgeError> {
        self.check_field(v)?;
        self.graph
            .edges()
            .par_iter()
            .zip(self.aligners.par_iter())
            .map(|(e, b)| {
                let push = e.mechanism.jvp_rows(self.state.clouds[e.src].points(), v[e.src].view())?;
                Ok(push - b.dot(&v[e.dst]))
            })
            .collect()
    }

    /// Adjoint of [`Self::coboundary`] in the weighted inner products: node `u`
    /// receives `J_Φ(x_k)ᵀ W[k]`, node `v` receives `−(1/b_l) Σ_k a_k B_kl W[k]`.
    pub fn coboundary_adjoint(&self, w: &EdgeCochain) -> Result<TangentField, HodgeError> {
        self.check_cochain(w)?;
        let parts: Vec<(Array2<f64>, Array2<f64>)> = self
            .graph
            .edges()
            .par_iter()
            .zip(self.aligners.par_iter())
            .zip(w.par_iter())
            .map(|((e, b), we)| {
                let src = &self.state.clouds[e.src];
                let dst = &self.state.clouds[e.dst];
                let pull = e.mechanism.vjp_rows(src.points(), we.view())?;
                let aw = we * &src.weights().insert_axis(Axis(1));
                let mut back = b.t().dot(&aw);
                back /= &dst.weights().insert_axis(Axis(1));
                Ok((pull, -back))
            })
            .collect::<Result<_, HodgeError>>()?;
        let mut out = self.zero_field();
        for (e, (pull, back)) in self.graph.edges().iter().zip(parts) {
            out[e.src] += &pull;
            out[e.dst] += &back;
        }
        Ok(out)
    }

    /// `Δ_T V = d* d V`.
    pub fn laplacian_apply(&self, v: &TangentField) -> Result<TangentField, HodgeError> {
        self.coboundary_adjoint(&self.coboundary(v)?)
    }

    /// Total length of a flattened node field.
    pub fn field_len(&self) -> usize {
        self.state.clouds.iter().map(|c| c.len() * c.dim()).sum()
    }

    /// Total length of a flattened edge cochain.
    pub fn cochain_len(&self) -> usize {
        self.graph.edges().iter().map(|e| self.state.clouds[e.src].len() * self.state.clouds[e.dst].dim()).sum()
    }

    pub fn flatten(blocks: &[Array2<f64>]) -> Vec<f64> {
        blocks.iter().flat_map(|b| b.iter().copied()).collect()
    }

    pub fn field_from_flat(&self, flat: &[f64]) -> TangentField {
        unflatten(flat, self.zero_field())
    }

    pub fn cochain_from_flat(&self, flat: &[f64]) -> EdgeCochain {
        unflatten(flat, self.zero_cochain())
    }

    fn flat_node_weights(&self) -> Vec<f64> {
        self.state
            .clouds
            .iter()
            .flat_map(|c| c.weights().to_vec().into_iter().flat_map(move |w| std::iter::repeat_n(w, c.dim())))
            .collect()
    }

    fn laplacian_flat(&self, x: &[f64], y: &mut [f64]) {
        let v = self.field_from_flat(x);
        let out = self.laplacian_apply(&v).expect("shapes come from the operator");
        for (yi, oi) in y.iter_mut().zip(out.iter().flat_map(|b| b.iter())) {
            *yi = *oi;
        }
    }

    /// Splits `W = dX + W_h` with `W_h` orthogonal to the range of `d`, by
    /// solving `d*d X = d*W` with CG.
    pub fn hodge_split(&self, w: &EdgeCochain, tol: f64, max_iters: usize) -> Result<(TangentField, EdgeCochain), HodgeError> {
        let rhs = Self::flatten(&self.coboundary_adjoint(w)?);
        let weights = self.flat_node_weights();
        let inner = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(&weights).map(|((x, y), wt)| x * y * wt).sum::<f64>();
        let out = conjugate_gradient(|x, y| self.laplacian_flat(x, y), inner, |_| {}, &rhs, tol, max_iters);
        if !out.converged {
            return Err(HodgeError::SolverStalled { residual: out.relative_residual, iterations: out.iterations });
        }
        let x = self.field_from_flat(&out.solution);
        let dx = self.coboundary(&x)?;
        let harmonic = w.iter().zip(&dx).map(|(a, b)| a - b).collect();
        Ok((x, harmonic))
    }

    /// Largest eigenvalue of `Δ_T` by power iteration in the weighted product.
    pub fn lambda_max(&self, iters: usize) -> f64 {
        let weights = self.flat_node_weights();
        let inner = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(&weights).map(|((x, y), wt)| x * y * wt).sum::<f64>();
        let start = probe_start(self.field_len());
        power_iteration(|x, y| self.laplacian_flat(x, y), inner, |_| {}, &start, iters, 1e-13).value
    }

    /// Smallest eigenvalue of `Δ_T` by inverse iteration on `Δ_T + σ I`, with
    /// CG inner solves; returns the Rayleigh quotient of `Δ_T` at the final iterate.
    pub fn lambda_min(&self, iters: usize, shift: f64) -> Result<f64, HodgeError> {
        let dim = self.field_len();
        let weights = self.flat_node_weights();
        let inner = |a: &[f64], b: &[f64]| a.iter().zip(b).zip(&weights).map(|((x, y), wt)| x * y * wt).sum::<f64>();
        let mut v = probe_start(dim);
        let nv = inner(&v, &v).sqrt();
        v.iter_mut().for_each(|x| *x /= nv);
        let mut lv = vec![0.0; dim];
        let mut value = f64::NAN;
        for _ in 0..iters {
            let out = conjugate_gradient(
                |x, y| {
                    self.laplacian_flat(x, y);
                    y.iter_mut().zip(x).for_each(|(yi, xi)| *yi += shift * xi);
                },
                inner,
                |_| {},
                &v,
                1e-13,
                50 * dim.max(10),
            );
            if !out.converged {
                return Err(HodgeError::SolverStalled { residual: out.relative_residual, iterations: out.iterations });
            }
            let mut w = out.solution;
            let nw = inner(&w, &w).sqrt();
            w.iter_mut().for_each(|x| *x /= nw);
            self.laplacian_flat(&w, &mut lv);
            let rq = inner(&w, &lv);
            let done = (rq - value).abs() <= 1e-13 * (1.0 + rq.abs());
            value = rq;
            v = w;
            if done {
                break;
            }
        }
        Ok(value)
    }
}

fn weighted_rows(a: &Array2<f64>, b: &Array2<f64>, w: ndarray::ArrayView1<f64>) -> f64 {
    a.outer_iter().zip(b.outer_iter()).zip(w.iter()).map(|((x, y), wk)| wk * x.dot(&y)).sum()
}

fn unflatten(flat: &[f64], mut blocks: Vec<Array2<f64>>) -> Vec<Array2<f64>> {
    let mut off = 0;
    for b in blocks.iter_mut() {
        let len = b.len();
        for (dst, src) in b.iter_mut().zip(&flat[off..off + len]) {
            *dst = *src;
        }
        off += len;
    }
    blocks
}

/// Deterministic start vector with components in every direction.
fn probe_start(dim: usize) -> Vec<f64> {
    (0..dim).map(|k| 1.0 + 0.5 * ((k as f64) * 0.7548776662).sin()).collect()
}

/// The stress cochain `R_e = ω_e ∇f_e` on each pushed support, and the
/// stationarity ratio `‖d*R‖ / ‖R‖` (0 when `‖R‖` vanishes).
pub fn harmonic_residual(op: &SheafOperator<'_>, solves: &[EdgeSolve]) -> Result<(EdgeCochain, f64), HodgeError> {
    let r: EdgeCochain = solves
        .iter()
        .map(|s| s.solution.potential_gradient_source() * op.graph.edges()[s.edge].weight)
        .collect();
    let rn = op.edge_inner(&r, &r).sqrt();
    if rn <= ZERO_RESIDUAL {
        return Ok((r, 0.0));
    }
    let dr = op.coboundary_adjoint(&r)?;
    let dn = op.node_inner(&dr, &dr).sqrt();
    Ok((r, dn / rn))
}

/// Probe values attached to a flow summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HodgeProbe {
    pub initial_stationarity: f64,
    pub final_stationarity: f64,
    pub final_residual_norm: f64,
    pub lambda_max: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub lambda_min: Option<f64>,
}

/// Stationarity, residual norm and `λ_max` at a state.
pub fn probe_state(graph: &CausalGraph, state: &FlowState, solves: &[EdgeSolve]) -> Result<(f64, f64, f64), HodgeError> {
    let op = SheafOperator::new(graph, state, solves)?;
    let (r, stat) = harmonic_residual(&op, solves)?;
    let rn = op.edge_inner(&r, &r).sqrt();
    Ok((stat, rn, op.lambda_max(200)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::solve_edges;
    use crate::graph::{EdgeSpec, GraphSpec, NodeSpec};
    use crate::measures::ParticleCloud;
    use crate::mechanism::MechanismSpec;
    use crate::sinkhorn::SinkhornConfig;
    use ndarray::array;

    fn single_edge(n_points: Array2<f64>) -> (CausalGraph, FlowState) {
        let g = CausalGraph::new(&GraphSpec {
            nodes: vec![NodeSpec { name: "U".into(), dim: 2 }, NodeSpec { name: "V".into(), dim: 2 }],
            edges: vec![EdgeSpec { src: "U".into(), dst: "V".into(), mechanism: MechanismSpec::Shift { b: vec![0.0, 0.0] }, weight: 1.0 }],
        })
        .unwrap();
        let c = ParticleCloud::uniform(n_points).unwrap();
        let s = FlowState::new(&g, vec![c.clone(), c]).unwrap();
        (g, s)
    }

    #[test]
    fn zero_maps_to_zero() {
        let (g, s) = single_edge(array![[0.0, 0.0], [3.0, 1.0]]);
        let solves = solve_edges(&g, &s, &SinkhornConfig::new(0.05), None).unwrap();
        let op = SheafOperator::new(&g, &s, &solves).unwrap();
        let dv = op.coboundary(&op.zero_field()).unwrap();
        assert!(dv.iter().all(|b| b.iter().all(|v| *v == 0.0)));
        let dw = op.coboundary_adjoint(&op.zero_cochain()).unwrap();
        assert!(dw.iter().all(|b| b.iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn identity_alignment_gives_difference() {
        let (g, s) = single_edge(array![[0.0, 0.0], [3.0, 1.0], [-2.0, 4.0]]);
        let solves = solve_edges(&g, &s, &SinkhornConfig::new(0.05).with_tol(1e-12), None).unwrap();
        let op = SheafOperator::new(&g, &s, &solves).unwrap();
        let vu = array![[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let vv = array![[-1.0, 0.0], [2.0, 2.0], [0.0, 1.0]];
        let dv = op.coboundary(&vec![vu.clone(), vv.clone()]).unwrap();
        let diff = &vu - &vv;
        assert!((&dv[0] - &diff).iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn shape_errors() {
        let (g, s) = single_edge(array![[0.0, 0.0], [1.0, 1.0]]);
        let solves = solve_edges(&g, &s, &SinkhornConfig::new(0.5), None).unwrap();
        let op = SheafOperator::new(&g, &s, &solves).unwrap();
        assert!(matches!(op.coboundary(&vec![Array2::zeros((2, 2))]), Err(HodgeError::Shape(_))));
    }

    #[test]
    fn no_edges_means_zero_laplacian() {
        let g = CausalGraph::new(&GraphSpec { nodes: vec![NodeSpec { name: "A".into(), dim: 2 }], edges: vec![] }).unwrap();
        let s = FlowState::new(&g, vec![ParticleCloud::uniform(array![[0.0, 1.0], [2.0, 0.0]]).unwrap()]).unwrap();
        let op = SheafOperator::new(&g, &s, &[]).unwrap();
        assert_eq!(op.lambda_max(50), 0.0);
        let (r, stat) = harmonic_residual(&op, &[]).unwrap();
        assert!(r.is_empty());
        assert_eq!(stat, 0.0);
    }
}
