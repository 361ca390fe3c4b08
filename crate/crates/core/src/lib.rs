//! Entropic sheaf flow on causal DAGs.
//!
//! Each node of a causal graph carries an empirical measure represented by a
//! weighted particle cloud, and each edge carries a structural mechanism. The
//! flow moves the particles by interacting Langevin dynamics that descend the
//! sum of entropic transport costs between pushed-forward parents and children.

pub mod graph;
pub mod linalg;
pub mod measures;
pub mod mechanism;
pub mod rng;
pub mod sinkhorn;
pub mod implicit;
pub mod flow;
pub mod hodge;
pub mod discovery;
pub mod experiments;
