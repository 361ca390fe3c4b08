//! The interacting Langevin flow that descends the causal Dirichlet energy.
//!
//! Every step pushes each parent cloud through its edge mechanism, solves the
//! entropic problem against the child cloud, assembles per-node drifts from the
//! potential gradients (pulled back through the mechanism on the parent side)
//! and takes an Euler–Maruyama step.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::ControlFlow;
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::CausalGraph;
use crate::measures::{MeasureError, ParticleCloud};
use crate::mechanism::MechanismError;
use crate::rng::{substream, DOMAIN_NOISE};
use crate::sinkhorn::{solve_with_cost, cost_matrix, SinkhornConfig, SinkhornError, SinkhornSolution};

/// Solver ε used when the flow itself runs at ε = 0.
pub const ZERO_EPSILON_SOLVER: f64 = 0.01;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("invalid flow config: {0}")]
    InvalidConfig(String),
    #[error("state does not match graph: {0}")]
    StateMismatch(String),
    #[error("non-finite particle coordinates at step {step} in node `{node}`")]
    NonFinite { step: usize, node: String },
    #[error("edge {edge}: {source}")]
    Sinkhorn {
        edge: String,
        #[source]
        source: SinkhornError,
    },
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// Scale of the injected noise per step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseConvention {
    /// `σ = sqrt(2 ε η)`
    #[default]
    Alg1,
    /// `σ = sqrt(ε η)`
    Sde,
}

fn default_flow_tol() -> f64 {
    1e-6
}

fn default_flow_iters() -> usize {
    2000
}

fn default_true() -> bool {
    true
}

/// Sinkhorn settings used inside the flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSinkhorn {
    /// Solver ε; defaults to the flow ε, or [`ZERO_EPSILON_SOLVER`] when that is 0.
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default = "default_flow_iters")]
    pub max_iters: usize,
    #[serde(default = "default_flow_tol")]
    pub tol: f64,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    /// Newton acceleration of the solver.
    #[serde(default = "default_true")]
    pub newton: bool,
}

impl Default for FlowSinkhorn {
    fn default() -> Self {
        Self { epsilon: None, max_iters: default_flow_iters(), tol: default_flow_tol(), warm_start: true, newton: true }
    }
}

fn default_snapshot() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowConfig {
    pub eta: f64,
    pub epsilon: f64,
    pub steps: usize,
    #[serde(default)]
    pub noise: NoiseConvention,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_snapshot")]
    pub snapshot_every: usize,
    #[serde(default)]
    pub drift_clip: Option<f64>,
    /// Report half the once-per-edge energy. Drifts are unaffected.
    #[serde(default)]
    pub half_energy: bool,
    /// Nodes whose particles never move.
    #[serde(default)]
    pub fixed_nodes: Vec<String>,
    #[serde(default)]
    pub sinkhorn: FlowSinkhorn,
}

impl FlowConfig {
    pub fn new(eta: f64, epsilon: f64, steps: usize) -> Self {
        Self {
            eta,
            epsilon,
            steps,
            noise: NoiseConvention::Alg1,
            seed: 0,
            snapshot_every: default_snapshot(),
            drift_clip: None,
            half_energy: false,
            fixed_nodes: Vec::new(),
            sinkhorn: FlowSinkhorn::default(),
        }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(FlowError::InvalidConfig(format!("eta must be > 0, got {}", self.eta)));
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(FlowError::InvalidConfig(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.snapshot_every == 0 {
            return Err(FlowError::InvalidConfig("snapshot_every must be >= 1".into()));
        }
        if let Some(c) = self.drift_clip {
            if !(c > 0.0) {
                return Err(FlowError::InvalidConfig(format!("drift_clip must be > 0, got {c}")));
            }
        }
        self.solver_config().validate().map_err(|e| FlowError::InvalidConfig(e.to_string()))
    }

    pub fn solver_epsilon(&self) -> f64 {
        self.sinkhorn.epsilon.unwrap_or(if self.epsilon > 0.0 { self.epsilon } else { ZERO_EPSILON_SOLVER })
    }

    pub fn solver_config(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.solver_epsilon(),
            max_iters: self.sinkhorn.max_iters,
            tol: self.sinkhorn.tol,
            eps_scaling: true,
            newton: self.sinkhorn.newton,
        }
    }

    pub fn noise_scale(&self) -> f64 {
        match self.noise {
            NoiseConvention::Alg1 => (2.0 * self.epsilon * self.eta).sqrt(),
            NoiseConvention::Sde => (self.epsilon * self.eta).sqrt(),
        }
    }
}

/// Particle clouds for every node, indexed like the graph's node list.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub step: usize,
    pub clouds: Vec<ParticleCloud>,
}

impl FlowState {
    pub fn new(graph: &CausalGraph, clouds: Vec<ParticleCloud>) -> Result<Self, FlowError> {
        if clouds.len() != graph.node_count() {
            return Err(FlowError::StateMismatch(format!(
                "{} clouds for {} nodes",
                clouds.len(),
                graph.node_count()
            )));
        }
        for (c, n) in clouds.iter().zip(graph.nodes()) {
            if c.dim() != n.dim {
                return Err(FlowError::StateMismatch(format!("node `{}` has dim {} but cloud has dim {}", n.name, n.dim, c.dim())));
            }
        }
        Ok(Self { step: 0, clouds })
    }
}

/// Solved entropic problem for one edge: source is the pushed parent cloud.
#[derive(Debug, Clone)]
pub struct EdgeSolve {
    pub edge: usize,
    pub solution: SinkhornSolution,
}

/// Solves every edge problem at the current state, in edge order.
pub fn solve_edges(
    graph: &CausalGraph,
    state: &FlowState,
    cfg: &SinkhornConfig,
    warm: Option<&[EdgeSolve]>,
) -> Result<Vec<EdgeSolve>, FlowError> {
    graph
        .edges()
        .par_iter()
        .enumerate()
        .map(|(k, e)| {
            let pushed = state.clouds[e.src].pushforward(&e.mechanism)?;
            let target = &state.clouds[e.dst];
            let wrap = |source| FlowError::Sinkhorn { edge: e.name.clone(), source };
            let cost = cost_matrix(pushed.points(), target.points()).map_err(wrap)?;
            let warm_g = warm.map(|w| taylor_warm_start(&w[k].solution, target));
            let solution = solve_with_cost(&pushed, target, cost, cfg, warm_g.as_ref().map(|g| g.view())).map_err(wrap)?;
            Ok(EdgeSolve { edge: k, solution })
        })
        .collect()
}

/// Previous target potential moved to the new target positions to first
/// order, `g_j + ∇g(y_j)·(y'_j − y_j)`. Particles move by `O(sqrt(εη))` per
/// step, which shifts `g` by far more than the solver tolerance, so the plain
/// previous `g` is a poor start.
fn taylor_warm_start(prev: &SinkhornSolution, target: &ParticleCloud) -> Array1<f64> {
    let grad = prev.potential_gradient_target();
    let dy = &target.points() - &prev.target.points();
    let mut g = prev.g.clone();
    for ((gj, gr), d) in g.iter_mut().zip(grad.outer_iter()).zip(dy.outer_iter()) {
        *gj += gr.dot(&d);
    }
    g
}

/// Once-per-edge energy `Σ_e ω_e W²_ε(Φ_e#μ_u, μ_v)` and the weighted per-edge terms.
pub fn energy_from_solves(graph: &CausalGraph, solves: &[EdgeSolve]) -> (f64, Vec<f64>) {
    let per_edge: Vec<f64> = solves
        .iter()
        .map(|s| graph.edges()[s.edge].weight * s.solution.entropic_cost())
        .collect();
    (per_edge.iter().sum(), per_edge)
}

/// Dirichlet energy of a state, solving every edge from a cold start.
pub fn dirichlet_energy(graph: &CausalGraph, state: &FlowState, cfg: &FlowConfig) -> Result<(f64, Vec<f64>), FlowError> {
    let solves = solve_edges(graph, state, &cfg.solver_config(), None)?;
    let (total, per_edge) = energy_from_solves(graph, &solves);
    let scale = if cfg.half_energy { 0.5 } else { 1.0 };
    Ok((scale * total, per_edge.into_iter().map(|e| scale * e).collect()))
}

/// Per-edge contributions to the parent and child drifts.
fn edge_drifts(graph: &CausalGraph, state: &FlowState, s: &EdgeSolve) -> Result<(Array2<f64>, Array2<f64>), FlowError> {
    let e = &graph.edges()[s.edge];
    let w = e.weight;
    let grad_f = s.solution.potential_gradient_source();
    let parent = e.mechanism.vjp_rows(state.clouds[e.src].points(), grad_f.view())? * w;
    let child = s.solution.potential_gradient_target() * w;
    Ok((parent, child))
}

/// Drift field of every node: for node `v`, row `k` sums `ω ∇g(x_k)` over
/// incoming edges and `ω J_Φ(x_k)ᵀ ∇f(Φ(x_k))` over outgoing edges.
pub fn node_drifts(graph: &CausalGraph, state: &FlowState, solves: &[EdgeSolve]) -> Result<Vec<Array2<f64>>, FlowError> {
    let parts: Vec<(Array2<f64>, Array2<f64>)> = solves
        .par_iter()
        .map(|s| edge_drifts(graph, state, s))
        .collect::<Result<_, _>>()?;
    let mut drifts: Vec<Array2<f64>> = state.clouds.iter().map(|c| Array2::zeros((c.len(), c.dim()))).collect();
    // Fixed reduction order: edges in declaration order.
    for (s, (parent, child)) in solves.iter().zip(parts) {
        let e = &graph.edges()[s.edge];
        drifts[e.src] += &parent;
        drifts[e.dst] += &child;
    }
    Ok(drifts)
}

/// Drift of a single node, solving only its incident edges.
pub fn node_drift(graph: &CausalGraph, state: &FlowState, node: usize, cfg: &FlowConfig) -> Result<Array2<f64>, FlowError> {
    let solves = solve_edges(graph, state, &cfg.solver_config(), None)?;
    let incident: Vec<EdgeSolve> = solves
        .into_iter()
        .filter(|s| {
            let e = &graph.edges()[s.edge];
            e.src == node || e.dst == node
        })
        .collect();
    let mut drift = Array2::zeros((state.clouds[node].len(), state.clouds[node].dim()));
    for s in &incident {
        let e = &graph.edges()[s.edge];
        let (parent, child) = edge_drifts(graph, state, s)?;
        if e.src == node {
            drift += &parent;
        }
        if e.dst == node {
            drift += &child;
        }
    }
    Ok(drift)
}

fn clip_rows(v: &mut Array2<f64>, clip: f64) {
    for mut row in v.axis_iter_mut(Axis(0)) {
        let n = row.dot(&row).sqrt();
        if n > clip {
            row *= clip / n;
        }
    }
}

/// `X ← X − η V + σ ξ` for every movable node. Noise for node `v` at step `t`
/// comes from its own keyed stream, so the update does not depend on scheduling.
pub fn langevin_step(
    graph: &CausalGraph,
    state: &FlowState,
    drifts: &[Array2<f64>],
    cfg: &FlowConfig,
    fixed: &[bool],
) -> Result<FlowState, FlowError> {
    let sigma = cfg.noise_scale();
    let step = state.step;
    let clouds: Vec<Result<ParticleCloud, FlowError>> = state
        .clouds
        .par_iter()
        .enumerate()
        .map(|(v, cloud)| {
            if fixed[v] {
                return Ok(cloud.clone());
            }
            let mut drift = drifts[v].clone();
            if let Some(c) = cfg.drift_clip {
                clip_rows(&mut drift, c);
            }
            let mut x = cloud.points().to_owned();
            x.scaled_add(-cfg.eta, &drift);
            if sigma > 0.0 {
                let mut rng = substream(cfg.seed, DOMAIN_NOISE, v as u64, step as u64);
                x.iter_mut().for_each(|xi| {
                    let z: f64 = rng.sample(StandardNormal);
                    *xi += sigma * z;
                });
            }
            if x.iter().any(|xi| !xi.is_finite()) {
                return Err(FlowError::NonFinite { step: step + 1, node: graph.nodes()[v].name.clone() });
            }
            Ok(cloud.with_points(x)?)
        })
        .collect();
    Ok(FlowState { step: step + 1, clouds: clouds.into_iter().collect::<Result<_, _>>()? })
}

/// Nearest-neighbour and spread statistics of one cloud.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TearingStats {
    pub median_nn_distance: f64,
    pub min_nn_distance: f64,
    pub total_variance: f64,
}

fn nn_distances(c: &ParticleCloud) -> Vec<f64> {
    let pts = c.points();
    (0..c.len())
        .map(|i| {
            let xi = pts.row(i);
            let mut best = f64::INFINITY;
            for (j, xj) in pts.outer_iter().enumerate() {
                if j != i {
                    let d: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                    best = best.min(d);
                }
            }
            best.sqrt()
        })
        .collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-cloud tearing statistics. Clouds with a single particle report NaN
/// nearest-neighbour distances.
pub fn tearing_stats(c: &ParticleCloud) -> TearingStats {
    let nn = if c.len() >= 2 { nn_distances(c) } else { Vec::new() };
    TearingStats {
        median_nn_distance: median(nn.clone()),
        min_nn_distance: nn.iter().copied().fold(if nn.is_empty() { f64::NAN } else { f64::INFINITY }, f64::min),
        total_variance: c.total_variance(),
    }
}

/// Tearing statistics for every node.
pub fn tearing_diagnostics(state: &FlowState) -> Vec<TearingStats> {
    state.clouds.par_iter().map(tearing_stats).collect()
}

/// One recorded step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub total_energy: f64,
    pub edge_costs: Vec<f64>,
    pub com: Vec<Vec<f64>>,
    pub variance: Vec<f64>,
    pub nn_median: Vec<f64>,
    pub drift_norm: Vec<f64>,
    pub sinkhorn_ok: bool,
}

/// Recorded observables of a flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyTrace {
    pub edge_names: Vec<String>,
    pub node_names: Vec<String>,
    pub node_dims: Vec<usize>,
    pub rows: Vec<TraceRow>,
}

impl EnergyTrace {
    pub fn new(graph: &CausalGraph) -> Self {
        Self {
            edge_names: graph.edges().iter().map(|e| e.name.clone()).collect(),
            node_names: graph.nodes().iter().map(|n| n.name.clone()).collect(),
            node_dims: graph.nodes().iter().map(|n| n.dim).collect(),
            rows: Vec::new(),
        }
    }

    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["step".to_string(), "total_energy".to_string()];
        h.extend(self.edge_names.iter().map(|e| format!("edge:{e}_cost")));
        for (name, &dim) in self.node_names.iter().zip(&self.node_dims) {
            h.extend((0..dim).map(|k| format!("node:{name}_com_{k}")));
            h.push(format!("node:{name}_var"));
            h.push(format!("node:{name}_nn_median"));
            h.push(format!("node:{name}_drift_norm"));
        }
        h.push("sinkhorn_ok".into());
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), FlowError> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(self.header())?;
        for r in &self.rows {
            let mut rec = vec![r.step.to_string(), fmt(r.total_energy)];
            rec.extend(r.edge_costs.iter().map(|v| fmt(*v)));
            for v in 0..self.node_names.len() {
                rec.extend(r.com[v].iter().map(|c| fmt(*c)));
                rec.push(fmt(r.variance[v]));
                rec.push(fmt(r.nn_median[v]));
                rec.push(fmt(r.drift_norm[v]));
            }
            rec.push(u8::from(r.sinkhorn_ok).to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn first(&self) -> Option<&TraceRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&TraceRow> {
        self.rows.last()
    }
}

fn fmt(v: f64) -> String {
    format!("{v:.10e}")
}

/// `sqrt(Σ_k a_k ‖V_k‖²)`, the weighted norm of a drift field.
pub fn weighted_norm(cloud: &ParticleCloud, v: &Array2<f64>) -> f64 {
    v.outer_iter()
        .zip(cloud.weights().iter())
        .map(|(row, w)| w * row.dot(&row))
        .sum::<f64>()
        .sqrt()
}

/// Everything a flow run produces.
#[derive(Debug, Clone)]
pub struct FlowOutcome {
    pub final_state: FlowState,
    pub trace: EnergyTrace,
    /// Edge solves at the final state.
    pub final_solves: Vec<EdgeSolve>,
    pub nonconverged_solves: usize,
    pub wallclock_s: f64,
}

/// Runs the flow for `cfg.steps` steps. Rows are recorded at step 0, every
/// `snapshot_every` steps and at the final step.
pub fn run_flow(graph: &CausalGraph, init: FlowState, cfg: &FlowConfig) -> Result<FlowOutcome, FlowError> {
    run_flow_with(graph, init, cfg, |_, _| ControlFlow::Continue(()))
}

/// As [`run_flow`], calling `observe` on every state (including the initial
/// one); returning `Break` ends the run at that state.
pub fn run_flow_with<F>(graph: &CausalGraph, init: FlowState, cfg: &FlowConfig, mut observe: F) -> Result<FlowOutcome, FlowError>
where
    F: FnMut(usize, &FlowState) -> ControlFlow<()>,
{
    cfg.validate()?;
    let start = Instant::now();
    let fixed: Vec<bool> = graph.nodes().iter().map(|n| cfg.fixed_nodes.contains(&n.name)).collect();
    for name in &cfg.fixed_nodes {
        if graph.node_index(name).is_none() {
            return Err(FlowError::InvalidConfig(format!("fixed node `{name}` is not in the graph")));
        }
    }
    let mut state = FlowState::new(graph, init.clouds)?;
    let solver = cfg.solver_config();
    let scale = if cfg.half_energy { 0.5 } else { 1.0 };
    let mut trace = EnergyTrace::new(graph);
    let mut warm: Option<Vec<EdgeSolve>> = None;
    let mut nonconverged = 0;
    loop {
        let t = state.step;
        let warm_ref = if cfg.sinkhorn.warm_start { warm.as_deref() } else { None };
        let solves = solve_edges(graph, &state, &solver, warm_ref)?;
        let ok = solves.iter().all(|s| s.solution.converged);
        if !ok {
            nonconverged += solves.iter().filter(|s| !s.solution.converged).count();
            log::warn!("step {t}: Sinkhorn did not reach tol on some edges");
        }
        let drifts = node_drifts(graph, &state, &solves)?;
        let stop = observe(t, &state).is_break();
        let last = t >= cfg.steps || stop;
        if t % cfg.snapshot_every == 0 || last {
            let (total, per_edge) = energy_from_solves(graph, &solves);
            let stats = tearing_diagnostics(&state);
            trace.rows.push(TraceRow {
                step: t,
                total_energy: scale * total,
                edge_costs: per_edge.iter().map(|e| scale * e).collect(),
                com: state.clouds.iter().map(|c| c.center_of_mass().to_vec()).collect(),
                variance: stats.iter().map(|s| s.total_variance).collect(),
                nn_median: stats.iter().map(|s| s.median_nn_distance).collect(),
                drift_norm: state.clouds.iter().zip(&drifts).map(|(c, v)| weighted_norm(c, v)).collect(),
                sinkhorn_ok: ok,
            });
        }
        if last {
            return Ok(FlowOutcome {
                final_state: state,
                trace,
                final_solves: solves,
                nonconverged_solves: nonconverged,
                wallclock_s: start.elapsed().as_secs_f64(),
            });
        }
        state = langevin_step(graph, &state, &drifts, cfg, &fixed)?;
        warm = Some(solves);
    }
}

/// Headline numbers of a finished flow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowSummary {
    pub initial_energy: f64,
    pub final_energy: f64,
    /// `100 (E_0 − E_T) / E_0`; 0 when `E_0 = 0`.
    pub reduction_pct: f64,
    pub com_shifts: BTreeMap<String, Vec<f64>>,
    pub final_com: BTreeMap<String, Vec<f64>>,
    pub final_variance: BTreeMap<String, f64>,
    pub steps: usize,
    pub nonconverged_solves: usize,
    pub wallclock: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub hodge: Option<crate::hodge::HodgeProbe>,
}

impl FlowSummary {
    pub fn from_outcome(out: &FlowOutcome) -> Self {
        let first = out.trace.first().expect("trace has the initial row");
        let last = out.trace.last().expect("trace has the final row");
        let reduction_pct = if first.total_energy != 0.0 {
            100.0 * (first.total_energy - last.total_energy) / first.total_energy
        } else {
            0.0
        };
        let names = &out.trace.node_names;
        let com_shifts = names
            .iter()
            .enumerate()
            .map(|(v, n)| {
                let shift = (Array1::from(last.com[v].clone()) - Array1::from(first.com[v].clone())).to_vec();
                (n.clone(), shift)
            })
            .collect();
        Self {
            initial_energy: first.total_energy,
            final_energy: last.total_energy,
            reduction_pct,
            com_shifts,
            final_com: names.iter().enumerate().map(|(v, n)| (n.clone(), last.com[v].clone())).collect(),
            final_variance: names.iter().enumerate().map(|(v, n)| (n.clone(), last.variance[v])).collect(),
            steps: last.step,
            nonconverged_solves: out.nonconverged_solves,
            wallclock: out.wallclock_s,
            hodge: None,
        }
    }
}
