//! `sheaf-flow`: run flow experiments from JSON configs or built-in defaults.
//!
//! Exit codes: 0 on success, 1 on runtime failure, 2 on bad configuration.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;
use sheaf_flow::experiments::{apply_overrides, resolve_run_dir, run_experiment, ExperimentConfig, ExperimentError, ExperimentKind};

#[derive(Parser, Debug)]
#[command(name = "sheaf-flow", version, about = "Entropic sheaf flow on causal DAGs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run whatever experiment the config names (a plain flow by default).
    Run(Common),
    /// Three-node conflicting-shift flow in 2-D.
    Demo2d(Common),
    /// Rank candidate graphs by their settled flow energy.
    Score(Common),
    /// Gradient accuracy and memory of unrolled vs implicit differentiation.
    BenchIft(Common),
    /// Compare a zero-temperature flow against a small-ε reference.
    Tear(Common),
    /// Escape times from a double well across ε.
    Kramers(Common),
}

#[derive(Args, Debug)]
struct Common {
    /// JSON config; the experiment's built-in default when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of flow steps.
    #[arg(long)]
    steps: Option<usize>,
    /// Master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Step size.
    #[arg(long)]
    eta: Option<f64>,
    /// Entropic regularisation and temperature.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Particles per Gaussian-initialised node (instance size for bench-ift).
    #[arg(long)]
    n: Option<usize>,
    /// Worker threads for the global pool.
    #[arg(long)]
    threads: Option<usize>,
    /// Base directory for run directories [env: SHEAF_FLOW_OUT, default: runs].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exact run directory, overriding --out.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Attach Hodge stationarity probes to the summary.
    #[arg(long)]
    hodge: bool,
    /// Override a config value by dotted path, e.g. `flow.sinkhorn.tol=1e-8`. Repeatable.
    #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
    set: Vec<String>,
}

fn load(kind: ExperimentKind, common: &Common) -> Result<ExperimentConfig, ExperimentError> {
    let mut value = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.clone(), source })?;
            // Parse once for schema errors with key paths, then work on the value.
            ExperimentConfig::from_json_str(&text)?.to_value()
        }
        None => ExperimentConfig::default_for(kind).to_value(),
    };
    if kind != ExperimentKind::Run {
        let named = value.get("experiment").cloned().unwrap_or(Value::Null);
        if named != Value::String(kind.name().into()) {
            return Err(ExperimentError::Config {
                path: "experiment".into(),
                message: format!("config describes {named}, not {}", kind.name()),
            });
        }
    }
    let mut sets = Vec::new();
    if let Some(s) = common.steps {
        sets.push(format!("flow.steps={s}"));
    }
    if let Some(s) = common.seed {
        sets.push(format!("flow.seed={s}"));
    }
    if let Some(e) = common.eta {
        sets.push(format!("flow.eta={e}"));
    }
    if let Some(e) = common.epsilon {
        sets.push(format!("flow.epsilon={e}"));
    }
    if common.hodge {
        sets.push("hodge=true".into());
    }
    if let Some(n) = common.n {
        if let Some(init) = value.get("init").and_then(Value::as_object) {
            for (name, spec) in init {
                if spec.get("gaussian").is_some() {
                    sets.push(format!("init.{name}.gaussian.n={n}"));
                }
            }
        }
        if value.get("bench").is_some_and(|b| !b.is_null()) {
            sets.push(format!("bench.N=[{n}]"));
        }
    }
    apply_overrides(&mut value, &sets)?;
    apply_overrides(&mut value, &common.set)?;
    ExperimentConfig::from_value(value)
}

fn execute(kind: ExperimentKind, common: &Common) -> Result<(), ExperimentError> {
    let cfg = load(kind, common)?;
    if let Some(t) = common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(t).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let dir = resolve_run_dir(cfg.experiment, common.out.as_deref(), common.run_dir.as_deref());
    log::info!("writing artifacts to {}", dir.display());
    let headline = run_experiment(&cfg, &dir)?;
    println!("{}", serde_json::to_string_pretty(&headline)?);
    eprintln!("run directory: {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (kind, common) = match &cli.command {
        Command::Run(c) => (ExperimentKind::Run, c),
        Command::Demo2d(c) => (ExperimentKind::Demo2d, c),
        Command::Score(c) => (ExperimentKind::Score, c),
        Command::BenchIft(c) => (ExperimentKind::BenchIft, c),
        Command::Tear(c) => (ExperimentKind::Tear, c),
        Command::Kramers(c) => (ExperimentKind::Kramers, c),
    };
    match execute(kind, common) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
