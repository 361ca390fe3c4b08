//! Causal DAGs: nodes with state-space dimensions and edges carrying a
//! mechanism and a positive confidence weight.

use std::collections::HashMap;

use petgraph::algo::toposort;
use petgraph::graph::DiGraph;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mechanism::{Mechanism, MechanismError, MechanismSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph contains a cycle through node `{0}`")]
    CycleDetected(String),
    #[error("edge refers to unknown node `{0}`")]
    UnknownNode(String),
    #[error("edge {edge}: mechanism maps {mech_in} -> {mech_out} but nodes have dims {src_dim} -> {dst_dim}")]
    DimMismatch {
        edge: String,
        mech_in: usize,
        mech_out: usize,
        src_dim: usize,
        dst_dim: usize,
    },
    #[error("duplicate node name `{0}`")]
    DuplicateNode(String),
    #[error("duplicate edge `{0}`")]
    DuplicateEdge(String),
    #[error("node `{0}` must have dim >= 1")]
    ZeroDim(String),
    #[error("edge {0} is a self-loop")]
    SelfLoop(String),
    #[error("edge {edge} has non-positive weight {weight}")]
    InvalidWeight { edge: String, weight: f64 },
    #[error("edge {edge}: {source}")]
    Mechanism {
        edge: String,
        #[source]
        source: MechanismError,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub name: String,
    pub dim: usize,
}

fn unit_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpec {
    pub src: String,
    pub dst: String,
    pub mechanism: MechanismSpec,
    #[serde(default = "unit_weight")]
    pub weight: f64,
}

impl EdgeSpec {
    pub fn label(&self) -> String {
        format!("{}->{}", self.src, self.dst)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphSpec {
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub edges: Vec<EdgeSpec>,
}

/// A compiled edge `src → dst` with indices into the node list.
#[derive(Debug, Clone, PartialEq)]
pub struct Edge {
    pub name: String,
    pub src: usize,
    pub dst: usize,
    pub mechanism: Mechanism,
    pub weight: f64,
}

/// Validated causal DAG. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct CausalGraph {
    nodes: Vec<NodeSpec>,
    edges: Vec<Edge>,
    order: Vec<usize>,
    incoming: Vec<Vec<usize>>,
    outgoing: Vec<Vec<usize>>,
}

/// Validates `spec` and returns node names in a topological order.
pub fn validate_graph(spec: &GraphSpec) -> Result<Vec<String>, GraphError> {
    let g = CausalGraph::new(spec)?;
    Ok(g.topological_order().map(|i| g.nodes[i].name.clone()).collect())
}

impl CausalGraph {
    pub fn new(spec: &GraphSpec) -> Result<Self, GraphError> {
        let mut index = HashMap::new();
        for (i, n) in spec.nodes.iter().enumerate() {
            if n.dim == 0 {
                return Err(GraphError::ZeroDim(n.name.clone()));
            }
            if index.insert(n.name.as_str(), i).is_some() {
                return Err(GraphError::DuplicateNode(n.name.clone()));
            }
        }
        let mut edges = Vec::with_capacity(spec.edges.len());
        let mut seen = HashMap::new();
        for e in &spec.edges {
            let name = e.label();
            let src = *index.get(e.src.as_str()).ok_or_else(|| GraphError::UnknownNode(e.src.clone()))?;
            let dst = *index.get(e.dst.as_str()).ok_or_else(|| GraphError::UnknownNode(e.dst.clone()))?;
            if src == dst {
                return Err(GraphError::SelfLoop(name));
            }
            if seen.insert((src, dst), ()).is_some() {
                return Err(GraphError::DuplicateEdge(name));
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(GraphError::InvalidWeight { edge: name, weight: e.weight });
            }
            let mechanism = Mechanism::try_from(&e.mechanism).map_err(|source| GraphError::Mechanism {
                edge: name.clone(),
                source,
            })?;
            let (src_dim, dst_dim) = (spec.nodes[src].dim, spec.nodes[dst].dim);
            if mechanism.input_dim() != src_dim || mechanism.output_dim() != dst_dim {
                return Err(GraphError::DimMismatch {
                    edge: name,
                    mech_in: mechanism.input_dim(),
                    mech_out: mechanism.output_dim(),
                    src_dim,
                    dst_dim,
                });
            }
            edges.push(Edge { name, src, dst, mechanism, weight: e.weight });
        }

        let mut dag = DiGraph::<usize, ()>::with_capacity(spec.nodes.len(), edges.len());
        let ids: Vec<_> = (0..spec.nodes.len()).map(|i| dag.add_node(i)).collect();
        for e in &edges {
            dag.add_edge(ids[e.src], ids[e.dst], ());
        }
        let order = toposort(&dag, None)
            .map_err(|cycle| GraphError::CycleDetected(spec.nodes[dag[cycle.node_id()]].name.clone()))?
            .into_iter()
            .map(|id| dag[id])
            .collect();

        let mut incoming = vec![Vec::new(); spec.nodes.len()];
        let mut outgoing = vec![Vec::new(); spec.nodes.len()];
        for (k, e) in edges.iter().enumerate() {
            incoming[e.dst].push(k);
            outgoing[e.src].push(k);
        }
        Ok(Self { nodes: spec.nodes.clone(), edges, order, incoming, outgoing })
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn topological_order(&self) -> impl Iterator<Item = usize> + '_ {
        self.order.iter().copied()
    }

    /// Indices of edges entering `node`.
    pub fn incoming(&self, node: usize) -> &[usize] {
        &self.incoming[node]
    }

    /// Indices of edges leaving `node`.
    pub fn outgoing(&self, node: usize) -> &[usize] {
        &self.outgoing[node]
    }
}
