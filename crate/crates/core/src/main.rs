use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use kubeadaptor::metrics::{
    run_experiment, EngineKind, ExperimentConfig, ExperimentParams, TransportKind, WorkflowChoice,
};
use kubeadaptor::time::SimTime;

/// Run a workflow against the simulated cluster and report timing and
/// resource metrics.
#[derive(Debug, Parser)]
#[command(name = "kubeadaptor", version)]
struct Cli {
    /// adaptor, batchjob or argo
    #[arg(long, default_value = "adaptor")]
    engine: EngineKind,

    /// Built-in workflow (montage, epigenomics, cybershake, ligo, or a
    /// generator such as pipeline:8), or a path to a workflow file.
    /// Defaults to the config's workflow_path, then montage.
    #[arg(long)]
    workflow: Option<WorkflowChoice>,

    /// Number of times the workflow is injected, back to back.
    #[arg(long)]
    repeat: Option<usize>,

    /// Seed for scheduling and failure draws.
    #[arg(long)]
    seed: Option<u64>,

    /// Seconds between resource samples.
    #[arg(long)]
    sample_period: Option<f64>,

    /// Probability that a pod fails at volume mount.
    #[arg(long)]
    failure_prob: Option<f64>,

    /// direct, channel or tcp
    #[arg(long)]
    transport: Option<TransportKind>,

    /// TOML or JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Directory for samples.csv, tasks.csv, summary.csv, events.csv and
    /// trace.jsonl.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<(), Box<dyn std::error::Error>> {
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.sim.rng_seed = seed;
    }
    if let Some(p) = cli.failure_prob {
        config.sim.mount_failure_probability = p;
    }
    if let Some(s) = cli.sample_period {
        if !(s.is_finite() && s > 0.0) {
            return Err(format!("sample period must be positive, got {s}").into());
        }
        config.metrics.sample_period = SimTime::from_secs_f64(s);
    }
    if let Some(t) = cli.transport {
        config.injector.transport = t;
    }
    if let Some(r) = cli.repeat {
        config.injector.repeat = r;
    }
    let workflow = match (cli.workflow, &config.injector.workflow_path) {
        (Some(w), _) => w,
        (None, Some(p)) => p.parse::<WorkflowChoice>()?,
        (None, None) => "montage".parse::<WorkflowChoice>()?,
    };
    let params = ExperimentParams {
        engine: cli.engine,
        workflow,
        repeat: config.injector.repeat,
        config,
        record_transcript: false,
    };
    let result = run_experiment(&params)?;
    emit(&result.report())?;
    if let Some(dir) = &cli.out_dir {
        result.write_outputs(dir)?;
        emit(&format!("outputs written to {}", dir.display()))?;
    }
    if result.summary.completed_runs < params.repeat {
        return Err(format!(
            "only {} of {} runs completed",
            result.summary.completed_runs, params.repeat
        )
        .into());
    }
    Ok(())
}

/// Writes a line to stdout; a reader that went away is not an error.
fn emit(line: &str) -> io::Result<()> {
    match writeln!(io::stdout().lock(), "{line}") {
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => Ok(()),
        other => other,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
