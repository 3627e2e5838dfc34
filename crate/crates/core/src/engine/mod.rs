//! Workflow controllers and the loop that drives one over a simulation.

mod adaptor;

use std::cell::RefCell;
use std::collections::VecDeque;
use std::fmt;
use std::io::Write;
use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use adaptor::{AdaptorEngine, ClusterFreeResources, WorkflowRun};

use crate::informer::{Ctx, EventHandler, InformerError, Simulation, SubscriptionId};
use crate::sim::{ResourceEvent, ResourceKind, SimConfig, SimError};
use crate::time::SimTime;
use crate::workflow::{WorkflowError, WorkflowSpec};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("workflow rejected: {0}")]
    ValidationFailed(#[from] WorkflowError),
    #[error("a workflow is already running and multi-run mode is off")]
    Busy,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Informer(#[from] InformerError),
    #[error("workflow source failed: {0}")]
    Source(String),
    #[error("workflow source produced no initial workflow")]
    NoWorkflow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub retry_backoff: SimTime,
    pub claim_capacity_mib: u64,
    pub storage_class: String,
    /// Accept a new workflow while another is still running.
    pub multi_run: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            retry_backoff: SimTime::from_millis(1000),
            claim_capacity_mib: 1024,
            storage_class: "nfs-client".to_string(),
            multi_run: false,
        }
    }
}

/// Supplies workflows to a controller: one up front, then one per
/// completed run until exhausted.
pub trait WorkflowSource {
    fn initial(&mut self) -> Result<Option<WorkflowSpec>, String>;
    fn next(&mut self) -> Result<Option<WorkflowSpec>, String>;
}

/// An in-memory list of workflows.
#[derive(Debug, Clone, Default)]
pub struct ListSource(pub VecDeque<WorkflowSpec>);

impl ListSource {
    pub fn repeat(spec: &WorkflowSpec, times: usize) -> Self {
        ListSource(std::iter::repeat_n(spec.clone(), times).collect())
    }
}

impl WorkflowSource for ListSource {
    fn initial(&mut self) -> Result<Option<WorkflowSpec>, String> {
        Ok(self.0.pop_front())
    }

    fn next(&mut self) -> Result<Option<WorkflowSpec>, String> {
        Ok(self.0.pop_front())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceAction {
    SubmitWorkflow,
    CreateNamespace,
    CreateClaim,
    ClaimBound,
    QueueTask,
    CreatePod,
    PodRunning,
    PodSucceeded,
    PodFailed,
    DeletePod,
    PodDeleted,
    Retry,
    DuplicatePod,
    DeleteNamespace,
    WorkflowComplete,
    RequestNext,
    SourceExhausted,
    Error,
}

impl fmt::Display for TraceAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("unit variant");
        f.write_str(s.as_str().expect("string"))
    }
}

/// One controller action, as written to the JSON-lines trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub time: SimTime,
    pub action: TraceAction,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub task: Option<String>,
    pub namespace: String,
}

pub fn write_trace_jsonl<W: Write>(trace: &[TraceRecord], mut out: W) -> std::io::Result<()> {
    for rec in trace {
        serde_json::to_writer(&mut out, rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

/// Pulls workflows from a source and remembers whether it ran dry.
pub struct Feed {
    source: Box<dyn WorkflowSource>,
    started: bool,
    exhausted: bool,
}

impl Feed {
    pub fn new(source: Box<dyn WorkflowSource>) -> Self {
        Feed {
            source,
            started: false,
            exhausted: false,
        }
    }

    pub fn empty() -> Self {
        Self::new(Box::new(ListSource::default()))
    }

    /// The next workflow, or `None` once the source is done or failed.
    pub fn pull(&mut self, trace: &mut Vec<TraceRecord>, now: SimTime) -> Option<WorkflowSpec> {
        if self.exhausted {
            return None;
        }
        let got = if self.started {
            trace.push(TraceRecord {
                time: now,
                action: TraceAction::RequestNext,
                task: None,
                namespace: String::new(),
            });
            self.source.next()
        } else {
            self.started = true;
            self.source.initial()
        };
        match got {
            Ok(Some(spec)) => Some(spec),
            Ok(None) => {
                self.exhausted = true;
                trace.push(TraceRecord {
                    time: now,
                    action: TraceAction::SourceExhausted,
                    task: None,
                    namespace: String::new(),
                });
                None
            }
            Err(msg) => {
                self.exhausted = true;
                trace.push(TraceRecord {
                    time: now,
                    action: TraceAction::Error,
                    task: None,
                    namespace: msg,
                });
                None
            }
        }
    }
}

/// Common surface of the adaptor engine and the baselines.
pub trait WorkflowController: EventHandler {
    /// Resource kinds the controller watches.
    fn watched_kinds(&self) -> &'static [ResourceKind];
    /// Pulls the first workflow from the feed and submits it.
    fn start(&mut self, ctx: &mut Ctx<'_>) -> Result<(), EngineError>;
    fn completed_runs(&self) -> usize;
    fn retries(&self) -> u64;
    fn trace(&self) -> &[TraceRecord];
}

/// Everything a finished simulation leaves behind.
#[derive(Debug, Clone)]
pub struct Outcome {
    pub events: Vec<ResourceEvent>,
    pub trace: Vec<TraceRecord>,
    pub completed_runs: usize,
    pub retries: u64,
    pub end: SimTime,
    pub resync_corrections: usize,
    pub sim_config: SimConfig,
}

/// Runs `controller` over a fresh simulation until the queue drains.
pub fn drive<C>(
    sim_config: SimConfig,
    controller: C,
    deadline: SimTime,
) -> Result<(Outcome, Rc<RefCell<C>>), EngineError>
where
    C: WorkflowController + 'static,
{
    let mut sim = Simulation::new(sim_config.clone())?;
    let kinds = controller.watched_kinds();
    let handle = Rc::new(RefCell::new(controller));
    let id: SubscriptionId = sim.subscribe(kinds, handle.clone());
    let h = Rc::clone(&handle);
    sim.with_ctx(id, |ctx| h.borrow_mut().start(ctx))?;
    sim.run_until_quiescent(deadline)?;
    sim.cluster()
        .check_invariants()
        .map_err(|e| SimError::InvalidConfig(format!("ledger check failed: {e}")))?;
    let resync_corrections = sim.resync();
    let c = handle.borrow();
    let outcome = Outcome {
        events: sim.log().to_vec(),
        trace: c.trace().to_vec(),
        completed_runs: c.completed_runs(),
        retries: c.retries(),
        end: sim.now(),
        resync_corrections,
        sim_config,
    };
    drop(c);
    Ok((outcome, handle))
}
