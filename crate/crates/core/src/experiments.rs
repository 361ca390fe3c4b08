//! Config-driven experiments: schema, embedded defaults, dotted-path
//! overrides, runners and artifact writing.
//!
//! A config is JSON with a top-level `experiment` tag. Unknown keys are
//! rejected and schema errors carry the path of the offending key.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufWriter;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::discovery::{self, Candidate, CandidateSet, DiscoveryError, ScoreReport};
use crate::flow::{run_flow_with, FlowConfig, FlowError, FlowOutcome, FlowState, FlowSummary, EnergyTrace};
use crate::graph::{CausalGraph, EdgeSpec, GraphError, GraphSpec, NodeSpec};
use crate::hodge::{probe_state, HodgeError, HodgeProbe};
use crate::implicit::{bench_cell, fd_gradient, BenchRow, ImplicitError};
use crate::measures::{load_cloud, sample_gaussian_with, store_cloud, MeasureError, ParticleCloud};
use crate::mechanism::MechanismSpec;
use crate::rng::{substream, DOMAIN_INIT, DOMAIN_INSTANCE};
use crate::sinkhorn::SinkhornConfig;

/// Environment variable naming the base directory for run artifacts.
pub const OUT_ENV: &str = "SHEAF_FLOW_OUT";
pub const DEFAULT_OUT: &str = "runs";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Discovery(#[from] DiscoveryError),
    #[error(transparent)]
    Implicit(#[from] ImplicitError),
    #[error(transparent)]
    Hodge(#[from] HodgeError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl ExperimentError {
    /// 2 for config problems, 1 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config { .. } | Self::Invalid(_) | Self::Graph(_) => 2,
            Self::Discovery(DiscoveryError::MissingData { .. } | DiscoveryError::DimMismatch { .. }) => 2,
            Self::Flow(FlowError::InvalidConfig(_)) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Run,
    Demo2d,
    Score,
    BenchIft,
    Tear,
    Kramers,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Run => "run",
            Self::Demo2d => "demo2d",
            Self::Score => "score",
            Self::BenchIft => "bench-ift",
            Self::Tear => "tear",
            Self::Kramers => "kramers",
        }
    }
}

/// How a node's initial cloud is produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitSpec {
    /// `n` draws from a Gaussian with diagonal covariance.
    Gaussian { mean: Vec<f64>, cov_diag: Vec<f64>, n: usize },
    /// A CSV cloud with header `x0..x{D-1}[,w]`.
    File { path: PathBuf },
    /// Explicit points, uniformly weighted unless `weights` is given.
    Points {
        points: Vec<Vec<f64>>,
        #[serde(default)]
        weights: Option<Vec<f64>>,
    },
}

impl InitSpec {
    fn build<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParticleCloud, ExperimentError> {
        match self {
            Self::Gaussian { mean, cov_diag, n } => Ok(sample_gaussian_with(rng, mean, cov_diag, *n)?),
            Self::File { path } => Ok(load_cloud(path)?),
            Self::Points { points, weights } => {
                let d = points.first().map_or(0, Vec::len);
                if points.iter().any(|p| p.len() != d) {
                    return Err(ExperimentError::Invalid("init points have ragged rows".into()));
                }
                let flat: Vec<f64> = points.iter().flatten().copied().collect();
                let pts = Array2::from_shape_vec((points.len(), d), flat)
                    .map_err(|e| ExperimentError::Invalid(e.to_string()))?;
                Ok(match weights {
                    Some(w) => ParticleCloud::from_unnormalized(pts, w.clone().into())?,
                    None => ParticleCloud::uniform(pts)?,
                })
            }
        }
    }
}

fn default_tail() -> usize {
    discovery::DEFAULT_TAIL
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreSpec {
    pub candidates: Vec<CandidateSpec>,
    #[serde(default = "default_tail")]
    pub tail: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CandidateSpec {
    pub label: String,
    pub graph: GraphSpec,
}

fn default_bench_seed() -> u64 {
    0
}

fn default_span() -> f64 {
    2.0
}

fn default_loose_tol() -> f64 {
    1e-2
}

fn default_fd_step() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(non_snake_case)]
pub struct BenchSpec {
    pub N: Vec<usize>,
    pub L: Vec<usize>,
    pub epsilon: Vec<f64>,
    #[serde(default = "default_bench_seed")]
    pub seed: u64,
    /// Side of the square the instance points are drawn from.
    #[serde(default = "default_span")]
    pub span: f64,
    /// Tolerance of the solve that feeds the envelope and implicit gradients.
    #[serde(default = "default_loose_tol")]
    pub loose_tol: f64,
    #[serde(default = "default_fd_step")]
    pub fd_step: f64,
}

fn default_tear_pair() -> [f64; 2] {
    [0.0, 0.1]
}

fn default_tear_seeds() -> Vec<u64> {
    (0..5).collect()
}

fn default_tear_node() -> String {
    "C".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TearSpec {
    /// Flow ε of the tearing run and of the reference run.
    #[serde(default = "default_tear_pair")]
    pub epsilon: [f64; 2],
    #[serde(default = "default_tear_seeds")]
    pub seeds: Vec<u64>,
    /// Node whose nearest-neighbour statistics are compared.
    #[serde(default = "default_tear_node")]
    pub node: String,
}

fn default_kramers_node() -> String {
    "X".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KramersSpec {
    pub epsilon: Vec<f64>,
    pub seeds: usize,
    /// The run stops once the node's first COM coordinate exceeds this.
    pub threshold: f64,
    pub max_steps: usize,
    #[serde(default = "default_kramers_node")]
    pub node: String,
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub graph: Option<GraphSpec>,
    #[serde(default)]
    pub init: BTreeMap<String, InitSpec>,
    pub flow: FlowConfig,
    /// Attach Hodge stationarity probes to flow summaries.
    #[serde(default)]
    pub hodge: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<ScoreSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bench: Option<BenchSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tear: Option<TearSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kramers: Option<KramersSpec>,
}

fn shift_edge(src: &str, dst: &str, b: &[f64]) -> EdgeSpec {
    EdgeSpec { src: src.into(), dst: dst.into(), mechanism: MechanismSpec::Shift { b: b.to_vec() }, weight: 1.0 }
}

fn gaussian(mean: &[f64], var: f64, n: usize) -> InitSpec {
    InitSpec::Gaussian { mean: mean.to_vec(), cov_diag: vec![var; mean.len()], n }
}

/// The three-node conflict: `A → B` by `[4,4]`, `B → C` by `[4,−4]` and a
/// direct `A → C` by `[0,8]`.
pub fn demo2d_graph() -> GraphSpec {
    GraphSpec {
        nodes: ["A", "B", "C"].iter().map(|n| NodeSpec { name: n.to_string(), dim: 2 }).collect(),
        edges: vec![shift_edge("A", "B", &[4.0, 4.0]), shift_edge("B", "C", &[4.0, -4.0]), shift_edge("A", "C", &[0.0, 8.0])],
    }
}

fn demo2d_init(n: usize) -> BTreeMap<String, InitSpec> {
    BTreeMap::from([
        ("A".into(), gaussian(&[0.0, 0.0], 1.0, n)),
        ("B".into(), gaussian(&[0.0, 0.0], 1.0, n)),
        ("C".into(), gaussian(&[8.0, 0.0], 1.0, n)),
    ])
}

/// Location of both Kramers anchors. The small offset tilts the potential so
/// the right well is deeper.
pub const KRAMERS_ANCHOR: f64 = 0.0212;

/// Double-well construction for escape times. A 1-D node `X` feeds two fixed
/// single-atom anchors through residual mechanisms `x − c tanh(k x ± 0.7)` with `c k = 0.9`
/// whose roots disagree; the resulting potential has a shallow well near
/// `−0.72` and a deeper one near `+0.78`, separated by a barrier of about
/// 0.31 at `ω = 4`.
pub fn kramers_graph() -> GraphSpec {
    let lambda = 1.0607;
    let k = 1.0 / lambda;
    let c = 0.9 * lambda;
    let kd = 0.7;
    let edge = |dst: &str, sign: f64| EdgeSpec {
        src: "X".into(),
        dst: dst.into(),
        mechanism: MechanismSpec::SmoothResidual {
            w1: vec![vec![k]],
            w2: vec![vec![-c]],
            b1: vec![sign * kd],
            scale: 0.95,
        },
        weight: 4.0,
    };
    GraphSpec {
        nodes: ["X", "L", "R"].iter().map(|n| NodeSpec { name: n.to_string(), dim: 1 }).collect(),
        edges: vec![edge("L", 1.0), edge("R", -1.0)],
    }
}

impl ExperimentConfig {
    /// The embedded default for each experiment.
    pub fn default_for(kind: ExperimentKind) -> Self {
        let base = |flow: FlowConfig| Self {
            experiment: kind,
            graph: None,
            init: BTreeMap::new(),
            flow,
            hodge: false,
            score: None,
            bench: None,
            tear: None,
            kramers: None,
        };
        match kind {
            ExperimentKind::Run | ExperimentKind::Demo2d => Self {
                graph: Some(demo2d_graph()),
                init: demo2d_init(300),
                ..base(FlowConfig::new(0.01, 0.1, 500))
            },
            ExperimentKind::Tear => Self {
                graph: Some(demo2d_graph()),
                init: demo2d_init(300),
                tear: Some(TearSpec { epsilon: default_tear_pair(), seeds: default_tear_seeds(), node: default_tear_node() }),
                ..base(FlowConfig::new(0.01, 0.1, 500))
            },
            ExperimentKind::Score => Self {
                init: BTreeMap::from([
                    ("A".into(), gaussian(&[0.0, 0.0], 1.0, 200)),
                    ("B".into(), gaussian(&[4.0, 4.0], 1.0, 200)),
                    ("C".into(), gaussian(&[8.0, 0.0], 1.0, 200)),
                ]),
                score: Some(ScoreSpec {
                    candidates: vec![
                        CandidateSpec { label: "true".into(), graph: discovery::true_chain() },
                        CandidateSpec { label: "spurious".into(), graph: discovery::spurious_chain() },
                    ],
                    tail: default_tail(),
                }),
                ..base(FlowConfig::new(0.01, 0.2, 300))
            },
            ExperimentKind::BenchIft => Self {
                bench: Some(BenchSpec {
                    N: vec![20],
                    L: vec![10, 100, 1000],
                    epsilon: vec![0.2],
                    seed: default_bench_seed(),
                    span: default_span(),
                    loose_tol: default_loose_tol(),
                    fd_step: default_fd_step(),
                }),
                ..base(FlowConfig::new(0.01, 0.2, 0))
            },
            ExperimentKind::Kramers => {
                let mut flow = FlowConfig::new(0.01, 0.1, 20_000);
                flow.fixed_nodes = vec!["L".into(), "R".into()];
                flow.snapshot_every = 1000;
                Self {
                    graph: Some(kramers_graph()),
                    init: BTreeMap::from([
                        ("X".into(), gaussian(&[-0.725], 0.01, 100)),
                        ("L".into(), InitSpec::Points { points: vec![vec![KRAMERS_ANCHOR]], weights: None }),
                        ("R".into(), InitSpec::Points { points: vec![vec![KRAMERS_ANCHOR]], weights: None }),
                    ]),
                    kramers: Some(KramersSpec {
                        epsilon: vec![0.4, 0.2, 0.1],
                        seeds: 20,
                        threshold: 0.0,
                        max_steps: 20_000,
                        node: default_kramers_node(),
                    }),
                    ..base(flow)
                }
            }
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// Parses a config value, reporting the path of the first offending key.
    pub fn from_value(v: Value) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_path_to_error::deserialize(v).map_err(|e| ExperimentError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<Self, ExperimentError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| ExperimentError::Config {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks cross-field requirements that the schema alone cannot express.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.flow.validate()?;
        let need = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(ExperimentError::Config { path: what.into(), message: format!("`{what}` is required for {}", self.experiment.name()) })
            }
        };
        match self.experiment {
            ExperimentKind::Run | ExperimentKind::Demo2d | ExperimentKind::Tear | ExperimentKind::Kramers => {
                need(self.graph.is_some(), "graph")?;
                let graph = CausalGraph::new(self.graph.as_ref().expect("checked"))?;
                for node in graph.nodes() {
                    if !self.init.contains_key(&node.name) {
                        return Err(ExperimentError::Config {
                            path: format!("init.{}", node.name),
                            message: "missing initial cloud for graph node".into(),
                        });
                    }
                }
            }
            ExperimentKind::Score => need(self.score.is_some(), "score")?,
            ExperimentKind::BenchIft => need(self.bench.is_some(), "bench")?,
        }
        if self.experiment == ExperimentKind::Tear {
            need(self.tear.is_some(), "tear")?;
        }
        if self.experiment == ExperimentKind::Kramers {
            need(self.kramers.is_some(), "kramers")?;
        }
        Ok(())
    }

    /// Draws the initial clouds of every `init` entry; node `v` (in name
    /// order) uses the stream `(seed, init, v)`.
    pub fn initial_clouds(&self, seed: u64) -> Result<BTreeMap<String, ParticleCloud>, ExperimentError> {
        self.init
            .iter()
            .enumerate()
            .map(|(v, (name, spec))| {
                let mut rng = substream(seed, DOMAIN_INIT, v as u64, 0);
                spec.build(&mut rng).map(|c| (name.clone(), c))
            })
            .collect()
    }

    fn graph_and_state(&self, seed: u64) -> Result<(CausalGraph, FlowState), ExperimentError> {
        let spec = self.graph.as_ref().ok_or_else(|| ExperimentError::Invalid("no graph in config".into()))?;
        let graph = CausalGraph::new(spec)?;
        let mut clouds = self.initial_clouds(seed)?;
        let ordered = graph
            .nodes()
            .iter()
            .map(|n| {
                clouds.remove(&n.name).ok_or_else(|| ExperimentError::Config {
                    path: format!("init.{}", n.name),
                    message: "missing initial cloud for graph node".into(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        let state = FlowState::new(&graph, ordered)?;
        Ok((graph, state))
    }
}

/// Parses an override value: JSON when it parses as JSON, a string otherwise.
fn parse_override_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot-separated keys; numeric segments index arrays) in `root`,
/// creating intermediate objects as needed.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), ExperimentError> {
    let bad = |msg: &str| ExperimentError::Config { path: path.to_string(), message: msg.to_string() };
    let segments: Vec<&str> = path.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        return Err(bad("empty path segment"));
    }
    let mut cur = root;
    for (i, seg) in segments.iter().enumerate() {
        let last = i + 1 == segments.len();
        if let Value::Array(items) = cur {
            let idx: usize = seg.parse().map_err(|_| bad("expected an array index"))?;
            let slot = items.get_mut(idx).ok_or_else(|| bad("array index out of range"))?;
            if last {
                *slot = value;
                return Ok(());
            }
            cur = slot;
            continue;
        }
        if cur.is_null() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().ok_or_else(|| bad("cannot descend into a scalar"))?;
        if last {
            obj.insert(seg.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(seg.to_string()).or_insert(Value::Null);
    }
    Ok(())
}

/// Applies `key.path=value` overrides in order.
pub fn apply_overrides(root: &mut Value, sets: &[String]) -> Result<(), ExperimentError> {
    for s in sets {
        let (path, raw) = s.split_once('=').ok_or_else(|| ExperimentError::Config {
            path: s.clone(),
            message: "override must look like key.path=value".into(),
        })?;
        set_path(root, path.trim(), parse_override_value(raw.trim()))?;
    }
    Ok(())
}

/// Resolves the artifact directory: an explicit run dir, else
/// `<base>/<experiment>-<timestamp>` with base from `out`, then
/// [`OUT_ENV`], then [`DEFAULT_OUT`].
pub fn resolve_run_dir(kind: ExperimentKind, out: Option<&Path>, run_dir: Option<&Path>) -> PathBuf {
    if let Some(d) = run_dir {
        return d.to_path_buf();
    }
    let base = out
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S%.3f");
    base.join(format!("{}-{stamp}", kind.name()))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, v: &T) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(io_err(&path))?;
    serde_json::to_writer_pretty(BufWriter::new(f), v)?;
    Ok(())
}

fn write_trace(dir: &Path, name: &str, trace: &EnergyTrace) -> Result<(), ExperimentError> {
    let path = dir.join(name);
    let f = File::create(&path).map_err(io_err(&path))?;
    trace.write_csv(BufWriter::new(f))?;
    Ok(())
}

fn write_clouds(dir: &Path, graph: &CausalGraph, state: &FlowState, suffix: &str) -> Result<(), ExperimentError> {
    let sub = dir.join("clouds");
    fs::create_dir_all(&sub).map_err(io_err(&sub))?;
    for (node, cloud) in graph.nodes().iter().zip(&state.clouds) {
        store_cloud(cloud, &sub.join(format!("{}_{suffix}.csv", node.name)))?;
    }
    Ok(())
}

/// Stationarity probes at the start and end of a flow. `λ_min` is left out:
/// the inverse iteration is too costly at flow sizes.
pub fn hodge_probe(graph: &CausalGraph, init: &FlowState, cfg: &FlowConfig, out: &FlowOutcome) -> Result<HodgeProbe, ExperimentError> {
    let solves0 = crate::flow::solve_edges(graph, init, &cfg.solver_config(), None)?;
    let (s0, _, _) = probe_state(graph, init, &solves0)?;
    let (s1, rn, lambda_max) = probe_state(graph, &out.final_state, &out.final_solves)?;
    Ok(HodgeProbe {
        initial_stationarity: s0,
        final_stationarity: s1,
        final_residual_norm: rn,
        lambda_max,
        lambda_min: None,
    })
}

/// Result of a plain flow experiment (`run`, `demo2d`).
#[derive(Debug, Clone)]
pub struct FlowReport {
    pub summary: FlowSummary,
    pub outcome: FlowOutcome,
    pub initial: FlowState,
}

/// Runs the configured flow. With a directory, writes `trace.csv`,
/// `summary.json`, initial and final clouds, and cloud snapshots at every
/// recorded step under `snapshots/`.
pub fn run_flow_experiment(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<FlowReport, ExperimentError> {
    let (graph, init) = cfg.graph_and_state(cfg.flow.seed)?;
    let snap_dir = dir.map(|d| d.join("snapshots"));
    if let Some(s) = &snap_dir {
        fs::create_dir_all(s).map_err(io_err(s))?;
    }
    let mut snap_err = None;
    let every = cfg.flow.snapshot_every.max(1);
    let outcome = run_flow_with(&graph, init.clone(), &cfg.flow, |t, state| {
        if let (Some(s), true) = (&snap_dir, t % every == 0 || t == cfg.flow.steps) {
            for (node, cloud) in graph.nodes().iter().zip(&state.clouds) {
                if let Err(e) = store_cloud(cloud, &s.join(format!("step{t:06}_{}.csv", node.name))) {
                    snap_err.get_or_insert(e);
                }
            }
        }
        ControlFlow::Continue(())
    })?;
    if let Some(e) = snap_err {
        return Err(e.into());
    }
    let mut summary = FlowSummary::from_outcome(&outcome);
    if cfg.hodge {
        summary.hodge = Some(hodge_probe(&graph, &init, &cfg.flow, &outcome)?);
    }
    if let Some(d) = dir {
        write_trace(d, "trace.csv", &outcome.trace)?;
        write_json(d, "summary.json", &summary)?;
        write_clouds(d, &graph, &init, "initial")?;
        write_clouds(d, &graph, &outcome.final_state, "final")?;
    }
    Ok(FlowReport { summary, outcome, initial: init })
}

/// The candidate set described by a `score` config.
pub fn candidate_set(cfg: &ExperimentConfig) -> Result<CandidateSet, ExperimentError> {
    let spec = cfg.score.as_ref().ok_or_else(|| ExperimentError::Invalid("no score block".into()))?;
    let cs = CandidateSet {
        data: cfg.initial_clouds(cfg.flow.seed)?,
        candidates: spec.candidates.iter().map(|c| Candidate { label: c.label.clone(), graph: c.graph.clone() }).collect(),
    };
    cs.validate()?;
    Ok(cs)
}

/// Ranks the candidates. With a directory, writes `report.json` and one
/// `trace_<label>.csv` per scored candidate.
pub fn run_score(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<ScoreReport, ExperimentError> {
    let cs = candidate_set(cfg)?;
    let tail = cfg.score.as_ref().map_or(discovery::DEFAULT_TAIL, |s| s.tail);
    let report = discovery::rank_candidates(&cs, &cfg.flow, tail)?;
    if let Some(d) = dir {
        write_json(d, "report.json", &report)?;
        for (label, trace) in &report.traces {
            write_trace(d, &format!("trace_{label}.csv"), trace)?;
        }
    }
    Ok(report)
}

/// Source and target clouds drawn uniformly from `[0, span]²`.
pub fn bench_instance(seed: u64, n: usize, span: f64) -> Result<(ParticleCloud, ParticleCloud), ExperimentError> {
    let draw = |idx: u64| -> Result<ParticleCloud, ExperimentError> {
        let mut rng = substream(seed, DOMAIN_INSTANCE, idx, n as u64);
        let pts = Array2::from_shape_fn((n, 2), |_| rng.random::<f64>() * span);
        Ok(ParticleCloud::uniform(pts)?)
    };
    Ok((draw(0)?, draw(1)?))
}

/// One row per `(N, ε, L)` cell; the same instance and reference gradient
/// are shared across `L`. With a directory, writes `bench.json`.
pub fn run_bench(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<BenchRow>, ExperimentError> {
    let spec = cfg.bench.as_ref().ok_or_else(|| ExperimentError::Invalid("no bench block".into()))?;
    let mut rows = Vec::new();
    for &n in &spec.N {
        let (src, dst) = bench_instance(spec.seed, n, spec.span)?;
        for &eps in &spec.epsilon {
            let tight = SinkhornConfig::new(eps).with_tol(1e-13).with_max_iters(200_000);
            let loose = SinkhornConfig::new(eps).with_tol(spec.loose_tol).without_scaling();
            let reference = fd_gradient(&src, &dst, &tight, spec.fd_step)?;
            for &l in &spec.L {
                let row = bench_cell(&src, &dst, &loose, &tight, (&reference.0, &reference.1), l)?;
                if row.ift_stalled {
                    log::warn!("N={n} ε={eps}: adjoint solve stalled; envelope gradient reported for IFT");
                }
                rows.push(row);
            }
        }
    }
    if let Some(d) = dir {
        write_json(d, "bench.json", &rows)?;
    }
    Ok(rows)
}

/// One seed of the tearing comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TearRow {
    pub seed: u64,
    /// Median nearest-neighbour distance of the compared node, torn run over reference run.
    pub final_nn_ratio: f64,
    pub variance_ratio: f64,
    /// Step at which the torn run produced non-finite coordinates, if it did.
    pub abort_step: Option<usize>,
    /// Last step the torn run reached with finite state.
    pub torn_steps: usize,
    pub reference_steps: usize,
    pub reference_finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TearReport {
    pub epsilon: [f64; 2],
    pub node: String,
    pub rows: Vec<TearRow>,
}

struct TornRun {
    trace: EnergyTrace,
    last: FlowState,
    abort_step: Option<usize>,
}

fn flow_until_abort(graph: &CausalGraph, init: FlowState, cfg: &FlowConfig) -> Result<TornRun, ExperimentError> {
    let mut last = init.clone();
    let mut trace = EnergyTrace::new(graph);
    let res = run_flow_with(graph, init, cfg, |_, s| {
        last = s.clone();
        ControlFlow::Continue(())
    });
    match res {
        Ok(out) => Ok(TornRun { trace: out.trace, last: out.final_state, abort_step: None }),
        Err(FlowError::NonFinite { step, .. }) => {
            trace.rows.clear();
            Ok(TornRun { trace, last, abort_step: Some(step) })
        }
        Err(FlowError::Sinkhorn { source: crate::sinkhorn::SinkhornError::NonFinitePotential(_), .. }) => {
            let step = last.step + 1;
            Ok(TornRun { trace, last, abort_step: Some(step) })
        }
        Err(e) => Err(e.into()),
    }
}

/// Paired runs with shared initial clouds per seed. With a directory, writes
/// `trace_eps<ε>_seed<s>.csv` for both runs and `comparison.json`.
pub fn run_tear(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<TearReport, ExperimentError> {
    let spec = cfg.tear.as_ref().ok_or_else(|| ExperimentError::Invalid("no tear block".into()))?;
    let graph = CausalGraph::new(cfg.graph.as_ref().ok_or_else(|| ExperimentError::Invalid("no graph".into()))?)?;
    let node = graph.node_index(&spec.node).ok_or_else(|| ExperimentError::Config {
        path: "tear.node".into(),
        message: format!("`{}` is not a graph node", spec.node),
    })?;
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let (_, init) = cfg.graph_and_state(seed)?;
        let mut torn_cfg = cfg.flow.clone();
        torn_cfg.seed = seed;
        torn_cfg.epsilon = spec.epsilon[0];
        let mut ref_cfg = torn_cfg.clone();
        ref_cfg.epsilon = spec.epsilon[1];
        let torn = flow_until_abort(&graph, init.clone(), &torn_cfg)?;
        let reference = run_flow_with(&graph, init, &ref_cfg, |_, _| ControlFlow::Continue(()))?;
        let stats_t = crate::flow::tearing_stats(&torn.last.clouds[node]);
        let stats_r = crate::flow::tearing_stats(&reference.final_state.clouds[node]);
        let reference_finite = reference.trace.rows.iter().all(|r| r.total_energy.is_finite());
        if let Some(d) = dir {
            write_trace(d, &format!("trace_eps{}_seed{seed}.csv", spec.epsilon[0]), &torn.trace)?;
            write_trace(d, &format!("trace_eps{}_seed{seed}.csv", spec.epsilon[1]), &reference.trace)?;
        }
        rows.push(TearRow {
            seed,
            final_nn_ratio: stats_t.median_nn_distance / stats_r.median_nn_distance,
            variance_ratio: stats_t.total_variance / stats_r.total_variance,
            abort_step: torn.abort_step,
            torn_steps: torn.last.step,
            reference_steps: reference.final_state.step,
            reference_finite,
        });
    }
    let report = TearReport { epsilon: spec.epsilon, node: spec.node.clone(), rows };
    if let Some(d) = dir {
        write_json(d, "comparison.json", &report)?;
    }
    Ok(report)
}

/// Escape statistics at one ε. Censored runs count as `max_steps` in the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KramersCell {
    pub epsilon: f64,
    pub mean_tau: f64,
    pub std_tau: f64,
    pub censored_count: usize,
    pub fully_censored: bool,
    /// `ε · ln(mean τ)`.
    pub eps_log_tau: f64,
    /// Hitting step per seed; `None` when censored.
    pub taus: Vec<Option<usize>>,
}

/// First step at which the COM of `node` exceeds `threshold`, or `None`.
pub fn hitting_time(graph: &CausalGraph, init: FlowState, cfg: &FlowConfig, node: usize, threshold: f64) -> Result<Option<usize>, ExperimentError> {
    let mut hit = None;
    run_flow_with(graph, init, cfg, |t, s| {
        if s.clouds[node].center_of_mass()[0] > threshold {
            hit = Some(t);
            ControlFlow::Break(())
        } else {
            ControlFlow::Continue(())
        }
    })?;
    Ok(hit)
}

/// Hitting times for every ε and seed. With a directory, writes `kramers.json`.
pub fn run_kramers(cfg: &ExperimentConfig, dir: Option<&Path>) -> Result<Vec<KramersCell>, ExperimentError> {
    let spec = cfg.kramers.as_ref().ok_or_else(|| ExperimentError::Invalid("no kramers block".into()))?;
    let graph = CausalGraph::new(cfg.graph.as_ref().ok_or_else(|| ExperimentError::Invalid("no graph".into()))?)?;
    let node = graph.node_index(&spec.node).ok_or_else(|| ExperimentError::Config {
        path: "kramers.node".into(),
        message: format!("`{}` is not a graph node", spec.node),
    })?;
    let mut cells = Vec::new();
    for &eps in &spec.epsilon {
        let mut taus = Vec::with_capacity(spec.seeds);
        for seed in 0..spec.seeds as u64 {
            let (_, init) = cfg.graph_and_state(seed)?;
            let mut flow = cfg.flow.clone();
            flow.epsilon = eps;
            flow.seed = seed;
            flow.steps = spec.max_steps;
            taus.push(hitting_time(&graph, init, &flow, node, spec.threshold)?);
        }
        let vals: Vec<f64> = taus.iter().map(|t| t.unwrap_or(spec.max_steps) as f64).collect();
        let n = vals.len().max(1) as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        let censored = taus.iter().filter(|t| t.is_none()).count();
        let fully = censored == taus.len();
        if fully {
            log::warn!("ε = {eps}: every run was censored at {} steps", spec.max_steps);
        }
        cells.push(KramersCell {
            epsilon: eps,
            mean_tau: mean,
            std_tau: std,
            censored_count: censored,
            fully_censored: fully,
            eps_log_tau: eps * mean.max(1.0).ln(),
            taus,
        });
    }
    if let Some(d) = dir {
        write_json(d, "kramers.json", &cells)?;
    }
    Ok(cells)
}

/// Runs whatever `cfg.experiment` names, writing artifacts and the resolved
/// config into `dir`. Returns the headline JSON that was written.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Value, ExperimentError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_json(dir, "config.resolved.json", cfg)?;
    let d = Some(dir);
    let v = match cfg.experiment {
        ExperimentKind::Run | ExperimentKind::Demo2d => serde_json::to_value(run_flow_experiment(cfg, d)?.summary)?,
        ExperimentKind::Score => serde_json::to_value(run_score(cfg, d)?)?,
        ExperimentKind::BenchIft => serde_json::to_value(run_bench(cfg, d)?)?,
        ExperimentKind::Tear => serde_json::to_value(run_tear(cfg, d)?)?,
        ExperimentKind::Kramers => serde_json::to_value(run_kramers(cfg, d)?)?,
    };
    Ok(v)
}
