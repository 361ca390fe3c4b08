//! Scoring candidate causal graphs by the energy the flow settles at.
//!
//! A graph whose mechanisms agree with the data can be relaxed to a low
//! residual energy; a graph with a conflicting edge keeps a positive floor no
//! matter how the clouds move. The score is the steady-state tail mean of the
//! total energy.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{run_flow, EnergyTrace, FlowConfig, FlowError, FlowState};
use crate::graph::{CausalGraph, EdgeSpec, GraphError, GraphSpec, NodeSpec};
use crate::measures::{sample_gaussian_with, MeasureError, ParticleCloud};
use crate::mechanism::MechanismSpec;
use crate::rng::{substream, DOMAIN_INIT};

/// Relative tail spread above which a score is flagged as not settled.
pub const SETTLED_SPREAD: f64 = 0.2;

pub const DEFAULT_TAIL: usize = 20;

#[derive(Debug, Error)]
pub enum DiscoveryError {
    #[error("no candidate graphs given")]
    NoCandidates,
    #[error("candidate `{label}`: node `{node}` has no data cloud")]
    MissingData { label: String, node: String },
    #[error("candidate `{label}`: node `{node}` has dim {expected} but its data has dim {found}")]
    DimMismatch { label: String, node: String, expected: usize, found: usize },
    #[error("tail length must be positive")]
    EmptyTail,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Candidate {
    pub label: String,
    pub graph: GraphSpec,
}

/// Observational clouds per node plus the graphs to compare on them.
#[derive(Debug, Clone)]
pub struct CandidateSet {
    pub data: BTreeMap<String, ParticleCloud>,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn validate(&self) -> Result<(), DiscoveryError> {
        if self.candidates.is_empty() {
            return Err(DiscoveryError::NoCandidates);
        }
        for c in &self.candidates {
            self.initial_state(c)?;
        }
        Ok(())
    }

    /// The data clouds in the node order of `candidate`.
    pub fn initial_state(&self, candidate: &Candidate) -> Result<(CausalGraph, FlowState), DiscoveryError> {
        let graph = CausalGraph::new(&candidate.graph)?;
        let mut clouds = Vec::with_capacity(graph.node_count());
        for node in graph.nodes() {
            let cloud = self.data.get(&node.name).ok_or_else(|| DiscoveryError::MissingData {
                label: candidate.label.clone(),
                node: node.name.clone(),
            })?;
            if cloud.dim() != node.dim {
                return Err(DiscoveryError::DimMismatch {
                    label: candidate.label.clone(),
                    node: node.name.clone(),
                    expected: node.dim,
                    found: cloud.dim(),
                });
            }
            clouds.push(cloud.clone());
        }
        let state = FlowState::new(&graph, clouds)?;
        Ok((graph, state))
    }
}

/// Steady-state energy of one graph.
#[derive(Debug, Clone)]
pub struct Score {
    pub score: f64,
    pub tail_mean: f64,
    pub tail_std: f64,
    /// `tail_std / tail_mean ≤ SETTLED_SPREAD`.
    pub converged: bool,
    pub trace: EnergyTrace,
}

fn tail_stats(trace: &EnergyTrace, tail: usize) -> (f64, f64) {
    let rows = &trace.rows[trace.rows.len().saturating_sub(tail)..];
    let n = rows.len() as f64;
    let mean = rows.iter().map(|r| r.total_energy).sum::<f64>() / n;
    let var = rows.iter().map(|r| (r.total_energy - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Runs the flow from the data and averages the total energy over the last
/// `tail` recorded rows.
pub fn topological_score(
    graph: &CausalGraph,
    data: FlowState,
    cfg: &FlowConfig,
    tail: usize,
) -> Result<Score, DiscoveryError> {
    if tail == 0 {
        return Err(DiscoveryError::EmptyTail);
    }
    let out = run_flow(graph, data, cfg)?;
    let (mean, std) = tail_stats(&out.trace, tail);
    let converged = mean == 0.0 || std / mean <= SETTLED_SPREAD;
    if !converged {
        log::warn!("score has not settled: tail std {std:.3e} vs mean {mean:.3e}");
    }
    Ok(Score { score: mean, tail_mean: mean, tail_std: std, converged, trace: out.trace })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreRow {
    pub label: String,
    pub score: Option<f64>,
    pub tail_mean: Option<f64>,
    pub tail_std: Option<f64>,
    pub converged: bool,
    /// `score / best`; absent for failed rows or when the best score is 0.
    pub gap_ratio: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Candidates sorted by ascending score; failed candidates go last.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub rows: Vec<ScoreRow>,
    #[serde(skip)]
    pub traces: BTreeMap<String, EnergyTrace>,
}

impl ScoreReport {
    pub fn best(&self) -> Option<&ScoreRow> {
        self.rows.first().filter(|r| r.score.is_some())
    }

    pub fn row(&self, label: &str) -> Option<&ScoreRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Scores every candidate with the same flow config and seed.
pub fn rank_candidates(cs: &CandidateSet, cfg: &FlowConfig, tail: usize) -> Result<ScoreReport, DiscoveryError> {
    if cs.candidates.is_empty() {
        return Err(DiscoveryError::NoCandidates);
    }
    if tail == 0 {
        return Err(DiscoveryError::EmptyTail);
    }
    let results: Vec<(String, Result<Score, DiscoveryError>)> = cs
        .candidates
        .par_iter()
        .map(|c| {
            let scored = cs.initial_state(c).and_then(|(g, s)| topological_score(&g, s, cfg, tail));
            (c.label.clone(), scored)
        })
        .collect();

    let mut traces = BTreeMap::new();
    let mut rows: Vec<ScoreRow> = results
        .into_iter()
        .map(|(label, res)| match res {
            Ok(s) => {
                traces.insert(label.clone(), s.trace);
                ScoreRow {
                    label,
                    score: Some(s.score),
                    tail_mean: Some(s.tail_mean),
                    tail_std: Some(s.tail_std),
                    converged: s.converged,
                    gap_ratio: None,
                    error: None,
                }
            }
            Err(e) => {
                log::warn!("candidate `{label}` failed: {e}");
                ScoreRow {
                    label,
                    score: None,
                    tail_mean: None,
                    tail_std: None,
                    converged: false,
                    gap_ratio: None,
                    error: Some(e.to_string()),
                }
            }
        })
        .collect();
    // Stable sort keeps the input order among equal scores.
    rows.sort_by(|a, b| match (a.score, b.score) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    if let Some(best) = rows.first().and_then(|r| r.score) {
        for r in &mut rows {
            r.gap_ratio = r.score.and_then(|s| {
                if best > 0.0 {
                    Some(s / best)
                } else if s == best {
                    Some(1.0)
                } else {
                    None
                }
            });
        }
    }
    Ok(ScoreReport { rows, traces })
}

fn shift_edge(src: &str, dst: &str, b: [f64; 2]) -> EdgeSpec {
    EdgeSpec { src: src.into(), dst: dst.into(), mechanism: MechanismSpec::Shift { b: b.to_vec() }, weight: 1.0 }
}

fn abc_nodes() -> Vec<NodeSpec> {
    ["A", "B", "C"].iter().map(|n| NodeSpec { name: n.to_string(), dim: 2 }).collect()
}

/// The chain `A → B → C` with translations `[4, 4]` and `[4, −4]`.
pub fn true_chain() -> GraphSpec {
    GraphSpec { nodes: abc_nodes(), edges: vec![shift_edge("A", "B", [4.0, 4.0]), shift_edge("B", "C", [4.0, -4.0])] }
}

/// The chain plus a direct `A → C` translation by `[0, 8]`, which disagrees
/// with the composed path (`[8, 0]`).
pub fn spurious_chain() -> GraphSpec {
    let mut g = true_chain();
    g.edges.push(shift_edge("A", "C", [0.0, 8.0]));
    g
}

/// Unit-covariance clouds at `[0,0]`, `[4,4]` and `[8,0]`, generated by the
/// true chain, with the chain and its spurious extension as candidates.
pub fn chain_with_conflict(n: usize, seed: u64) -> Result<CandidateSet, DiscoveryError> {
    let means = [("A", [0.0, 0.0]), ("B", [4.0, 4.0]), ("C", [8.0, 0.0])];
    let mut data = BTreeMap::new();
    for (v, (name, mean)) in means.iter().enumerate() {
        let mut rng = substream(seed, DOMAIN_INIT, v as u64, 0);
        data.insert(name.to_string(), sample_gaussian_with(&mut rng, mean, &[1.0, 1.0], n)?);
    }
    Ok(CandidateSet {
        data,
        candidates: vec![
            Candidate { label: "true".into(), graph: true_chain() },
            Candidate { label: "spurious".into(), graph: spurious_chain() },
        ],
    })
}
