use std::fmt;
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    aggregate, collect_runs, sample_resources, write_samples_csv, write_summary_csv,
    write_tasks_csv, MetricsError, ResourceSample, RunMetrics, Summary,
};
use crate::baselines::{ArgoLikeConfig, ArgoLikeRunner, BatchJobConfig, BatchJobRunner};
use crate::engine::{
    drive, write_trace_jsonl, AdaptorEngine, EngineConfig, EngineError, Feed, ListSource,
    Outcome, WorkflowController,
};
use crate::injector::{
    channel_pair, load_plan, resolve_endpoint, EngineEndpoint, EngineListener, InjectionPlan,
    Injector, InjectorError, RecordingTransport, StreamTransport, TranscriptEntry, Transport,
};
use crate::sim::{write_event_csv, SimConfig};
use crate::time::SimTime;
use crate::workflow::{builtin_workflow, BuiltinWorkflow, WorkflowError, WorkflowSpec};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Workflow(#[from] WorkflowError),
    #[error(transparent)]
    Injector(#[from] InjectorError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("injector thread: {0}")]
    InjectorThread(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EngineKind {
    Adaptor,
    #[serde(alias = "batch")]
    BatchJob,
    Argo,
}

impl EngineKind {
    pub const ALL: [EngineKind; 3] = [EngineKind::Adaptor, EngineKind::BatchJob, EngineKind::Argo];
}

impl fmt::Display for EngineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EngineKind::Adaptor => "adaptor",
            EngineKind::BatchJob => "batchjob",
            EngineKind::Argo => "argo",
        })
    }
}

impl FromStr for EngineKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "adaptor" => Ok(EngineKind::Adaptor),
            "batchjob" | "batch" | "batch-job" => Ok(EngineKind::BatchJob),
            "argo" => Ok(EngineKind::Argo),
            _ => Err(format!("unknown engine {s:?} (expected adaptor, batchjob or argo)")),
        }
    }
}

/// How workflows reach the controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    /// Straight from memory, no message boundary.
    Direct,
    /// Injector thread over an in-process channel.
    #[default]
    Channel,
    /// Injector thread over TCP.
    Tcp,
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "direct" => Ok(TransportKind::Direct),
            "channel" => Ok(TransportKind::Channel),
            "tcp" | "socket" => Ok(TransportKind::Tcp),
            _ => Err(format!("unknown transport {s:?} (expected direct, channel or tcp)")),
        }
    }
}

/// A shipped workflow by name, or a path to a workflow file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum WorkflowChoice {
    Builtin(BuiltinWorkflow, Option<usize>),
    Path(PathBuf),
}

impl FromStr for WorkflowChoice {
    type Err = String;

    /// `montage`, `pipeline:8` or a file path.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (name, size) = match s.split_once(':') {
            Some((n, k)) => match k.parse::<usize>() {
                Ok(k) => (n, Some(k)),
                Err(_) => (s, None),
            },
            None => (s, None),
        };
        match name.parse::<BuiltinWorkflow>() {
            Ok(w) => Ok(WorkflowChoice::Builtin(w, size)),
            Err(_) if Path::new(s).exists() => Ok(WorkflowChoice::Path(PathBuf::from(s))),
            Err(_) => Err(format!("{s:?} is neither a built-in workflow nor an existing file")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectorSettings {
    pub endpoint: Option<String>,
    pub repeat: usize,
    pub workflow_path: Option<String>,
    pub transport: TransportKind,
}

impl Default for InjectorSettings {
    fn default() -> Self {
        InjectorSettings {
            endpoint: None,
            repeat: 1,
            workflow_path: None,
            transport: TransportKind::Channel,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsSettings {
    pub sample_period: SimTime,
}

impl Default for MetricsSettings {
    fn default() -> Self {
        MetricsSettings {
            sample_period: SimTime::from_millis(500),
        }
    }
}

/// The config file: `[sim]`, `[engine]`, `[batch]`, `[argo]`, `[injector]`,
/// `[metrics]`. TOML, or JSON when the file ends in `.json`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub engine: EngineConfig,
    pub batch: BatchJobConfig,
    pub argo: ArgoLikeConfig,
    pub injector: InjectorSettings,
    pub metrics: MetricsSettings,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))?;
        let cfg: ExperimentConfig = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| ExperimentError::Config(e.to_string()))?
        };
        cfg.sim.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentParams {
    pub engine: EngineKind,
    pub workflow: WorkflowChoice,
    pub repeat: usize,
    pub config: ExperimentConfig,
    /// Keep the engine-side message transcript.
    pub record_transcript: bool,
}

impl ExperimentParams {
    pub fn new(engine: EngineKind, workflow: WorkflowChoice, repeat: usize) -> Self {
        ExperimentParams {
            engine,
            workflow,
            repeat,
            config: ExperimentConfig::default(),
            record_transcript: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.config.sim.rng_seed = seed;
        self
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub engine: EngineKind,
    pub workflow: WorkflowSpec,
    pub outcome: Outcome,
    pub samples: Vec<ResourceSample>,
    pub runs: Vec<RunMetrics>,
    pub summary: Summary,
    pub transcript: Vec<TranscriptEntry>,
    pub delivered: Option<usize>,
}

impl ExperimentResult {
    /// Writes samples.csv, tasks.csv, summary.csv, events.csv and
    /// trace.jsonl into `dir`.
    pub fn write_outputs(&self, dir: impl AsRef<Path>) -> Result<(), ExperimentError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| File::create(dir.join(name)).map(BufWriter::new);
        write_samples_csv(&self.samples, open("samples.csv")?)?;
        write_tasks_csv(&self.runs, open("tasks.csv")?)?;
        write_summary_csv(
            &self.engine.to_string(),
            self.workflow.name(),
            &self.runs,
            open("summary.csv")?,
        )?;
        write_event_csv(&self.outcome.events, open("events.csv")?)
            .map_err(MetricsError::from)?;
        write_trace_jsonl(&self.outcome.trace, open("trace.jsonl")?)?;
        Ok(())
    }

    /// Human-readable aggregate for standard output.
    pub fn report(&self) -> String {
        let s = &self.summary;
        format!(
            "engine={} workflow={} runs={} completed={} retries={}\n\
             task_time_mean={:.3} min={:.3} max={:.3}\n\
             lifecycle_mean={:.3} min={:.3} max={:.3}\n\
             cpu_usage_rate={:.4} mem_usage_rate={:.4} peak_cpu_milli={} peak_mem_mib={}",
            self.engine,
            self.workflow.name(),
            s.runs,
            s.completed_runs,
            s.retries,
            s.task_time.mean,
            s.task_time.min,
            s.task_time.max,
            s.lifecycle.mean,
            s.lifecycle.min,
            s.lifecycle.max,
            s.cpu_usage_rate,
            s.mem_usage_rate,
            s.peak_used_cpu_milli,
            s.peak_used_mem_mib,
        )
    }
}

fn resolve_plan(params: &ExperimentParams) -> Result<InjectionPlan, ExperimentError> {
    match &params.workflow {
        WorkflowChoice::Builtin(w, size) => {
            Ok(InjectionPlan::new(vec![builtin_workflow(*w, *size)?], params.repeat)?)
        }
        WorkflowChoice::Path(p) => Ok(load_plan(p, params.repeat)?),
    }
}

fn controller_run<C: WorkflowController + 'static>(
    sim: SimConfig,
    c: C,
    deadline: SimTime,
) -> Result<Outcome, EngineError> {
    drive(sim, c, deadline).map(|(o, _)| o)
}

fn run_controller(
    params: &ExperimentParams,
    feed: Feed,
    deadline: SimTime,
) -> Result<Outcome, EngineError> {
    let cfg = &params.config;
    let sim = cfg.sim.clone();
    let engine = cfg.engine.clone();
    match params.engine {
        EngineKind::Adaptor => controller_run(sim, AdaptorEngine::new(engine, feed), deadline),
        EngineKind::BatchJob => {
            controller_run(sim, BatchJobRunner::new(cfg.batch, engine, feed), deadline)
        }
        EngineKind::Argo => controller_run(sim, ArgoLikeRunner::new(cfg.argo, engine, feed), deadline),
    }
}

type Recorded = (Box<dyn Transport>, Option<std::sync::Arc<std::sync::Mutex<Vec<TranscriptEntry>>>>);

fn maybe_record<T: Transport + 'static>(t: T, record: bool) -> Recorded {
    if record {
        let r = RecordingTransport::new(t, "engine", "injector");
        let log = r.transcript();
        (Box::new(r), Some(log))
    } else {
        (Box::new(t), None)
    }
}

/// Runs one controller over a fresh cluster for the whole plan and derives
/// the metrics.
pub fn run_experiment(params: &ExperimentParams) -> Result<ExperimentResult, ExperimentError> {
    if params.repeat == 0 {
        return Err(InjectorError::InvalidRepeat.into());
    }
    params
        .config
        .sim
        .validate()
        .map_err(|e| ExperimentError::Config(e.to_string()))?;
    let plan = resolve_plan(params)?;
    let workflow = plan.workflows()[0].clone();
    let per_run: SimTime = workflow
        .tasks()
        .values()
        .fold(SimTime::ZERO, |acc, t| acc + t.emulated_duration());
    // Ten times the summed task durations per run, plus slack for setup.
    let deadline = SimTime::from_millis(
        (per_run.as_millis() * 10 + 600_000) * plan.total() as u64,
    );

    let (outcome, transcript, delivered) = match params.config.injector.transport {
        TransportKind::Direct => {
            let source = ListSource(
                (0..plan.total())
                    .map(|i| plan.workflows()[i % plan.workflows().len()].clone())
                    .collect(),
            );
            let o = run_controller(params, Feed::new(Box::new(source)), deadline)?;
            (o, None, None)
        }
        TransportKind::Channel => {
            let (inj_side, eng_side) = channel_pair();
            let injector = thread::spawn(move || Injector::new(plan, inj_side).run());
            let (transport, log) = maybe_record(eng_side, params.record_transcript);
            let feed = Feed::new(Box::new(EngineEndpoint::new(transport)));
            let o = run_controller(params, feed, deadline);
            let delivered = join(injector)?;
            (o?, log, Some(delivered))
        }
        TransportKind::Tcp => {
            let endpoint = resolve_endpoint(params.config.injector.endpoint.as_deref());
            let listener = EngineListener::bind(&endpoint)?;
            let addr = listener.local_addr();
            let injector = thread::spawn(move || {
                let t = StreamTransport::connect(&addr)?;
                Injector::new(plan, t).run()
            });
            let stream = listener.accept()?;
            let (transport, log) = maybe_record(stream, params.record_transcript);
            let feed = Feed::new(Box::new(EngineEndpoint::new(transport)));
            let o = run_controller(params, feed, deadline);
            let delivered = join(injector)?;
            (o?, log, Some(delivered))
        }
    };

    let period = params.config.metrics.sample_period;
    if period == SimTime::ZERO {
        return Err(ExperimentError::Config("sample_period must be positive".into()));
    }
    let samples = sample_resources(&outcome.events, &outcome.sim_config, period, outcome.end);
    let runs = collect_runs(&outcome.events, &samples);
    let summary = aggregate(&runs)?;
    let transcript = transcript
        .map(|l| l.lock().expect("transcript lock").clone())
        .unwrap_or_default();
    Ok(ExperimentResult {
        engine: params.engine,
        workflow,
        outcome,
        samples,
        runs,
        summary,
        transcript,
        delivered,
    })
}

fn join(
    handle: thread::JoinHandle<Result<usize, InjectorError>>,
) -> Result<usize, ExperimentError> {
    match handle.join() {
        Ok(Ok(n)) => Ok(n),
        Ok(Err(e)) => Err(ExperimentError::InjectorThread(e.to_string())),
        Err(_) => Err(ExperimentError::InjectorThread("panicked".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_sections_parse_from_toml() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(
            &path,
            "[sim]\nrng_seed = 9\nmount_failure_probability = 0.1\n\
             [argo]\nper_task_controller_overhead = 4.5\n\
             [injector]\nrepeat = 4\ntransport = \"tcp\"\n\
             [metrics]\nsample_period = 1.0\n",
        )
        .unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.sim.rng_seed, 9);
        assert_eq!(cfg.argo.per_task_controller_overhead, SimTime::from_millis(4500));
        assert_eq!(cfg.argo.reconcile_interval, SimTime::from_millis(1000));
        assert_eq!((cfg.injector.repeat, cfg.injector.transport), (4, TransportKind::Tcp));
        assert_eq!(cfg.metrics.sample_period, SimTime::from_millis(1000));
    }

    #[test]
    fn unknown_config_section_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[scheduler]\nx = 1\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&path), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn workflow_choice_parsing() {
        assert_eq!(
            "ligo".parse::<WorkflowChoice>().unwrap(),
            WorkflowChoice::Builtin(BuiltinWorkflow::Ligo, None)
        );
        assert_eq!(
            "pipeline:5".parse::<WorkflowChoice>().unwrap(),
            WorkflowChoice::Builtin(BuiltinWorkflow::Pipeline, Some(5))
        );
        assert!("/no/such/file.json".parse::<WorkflowChoice>().is_err());
        assert_eq!("batch".parse::<EngineKind>().unwrap(), EngineKind::BatchJob);
    }

    #[test]
    fn transports_give_identical_outcomes() {
        let mut base = ExperimentParams::new(
            EngineKind::Adaptor,
            WorkflowChoice::Builtin(BuiltinWorkflow::CyberShake, None),
            3,
        );
        base.config.sim.mount_failure_probability = 0.2;
        let mut events = Vec::new();
        for t in [TransportKind::Direct, TransportKind::Channel, TransportKind::Tcp] {
            let mut p = base.clone();
            p.config.injector.transport = t;
            let r = run_experiment(&p).unwrap();
            assert_eq!(r.summary.completed_runs, 3);
            if t != TransportKind::Direct {
                assert_eq!(r.delivered, Some(3));
            }
            events.push(r.outcome.events);
        }
        assert_eq!(events[0], events[1]);
        assert_eq!(events[1], events[2]);
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let p = ExperimentParams::new(
            EngineKind::BatchJob,
            WorkflowChoice::Builtin(BuiltinWorkflow::Pipeline, Some(3)),
            1,
        );
        run_experiment(&p).unwrap().write_outputs(dir.path()).unwrap();
        for f in ["samples.csv", "tasks.csv", "summary.csv", "events.csv", "trace.jsonl"] {
            let text = std::fs::read_to_string(dir.path().join(f)).unwrap();
            assert!(text.lines().count() > 1, "{f}");
        }
    }

    #[test]
    fn zero_repeat_rejected() {
        let p = ExperimentParams::new(
            EngineKind::Adaptor,
            WorkflowChoice::Builtin(BuiltinWorkflow::Montage, None),
            0,
        );
        assert!(run_experiment(&p).is_err());
    }
}
