use std::collections::{BTreeMap, BTreeSet, VecDeque};

use crate::informer::{CacheStore, Ctx, EventHandler, InformerError};
use crate::sim::{EventAction, ObjectSnapshot, PodPhase, PodRecord, PodRequest, ResourceEvent, ResourceKind, SimError};
use crate::time::SimTime;
use crate::workflow::WorkflowSpec;

use super::{EngineConfig, EngineError, Feed, TraceAction, TraceRecord, WorkflowController};

/// Resources the engine may still hand out, computed from the listers:
/// Σ allocatable of non-master nodes minus Σ requests of listed pods minus
/// what the engine has admitted but not yet seen listed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClusterFreeResources {
    pub free_cpu_milli: u64,
    pub free_mem_mib: u64,
}

impl ClusterFreeResources {
    pub fn compute(store: &CacheStore, reserved: (u64, u64)) -> Result<Self, InformerError> {
        let (alloc_cpu, alloc_mem) = store
            .list_nodes()?
            .into_iter()
            .filter(|n| !n.is_master)
            .fold((0u64, 0u64), |(c, m), n| {
                (c + n.allocatable_cpu_milli, m + n.allocatable_mem_mib)
            });
        let (req_cpu, req_mem) = store
            .list_pods(None)?
            .into_iter()
            .fold((0u64, 0u64), |(c, m), p| {
                (c + p.request_cpu_milli, m + p.request_mem_mib)
            });
        Ok(ClusterFreeResources {
            free_cpu_milli: alloc_cpu.saturating_sub(req_cpu + reserved.0),
            free_mem_mib: alloc_mem.saturating_sub(req_mem + reserved.1),
        })
    }

    pub fn covers(&self, cpu_milli: u64, mem_mib: u64) -> bool {
        cpu_milli <= self.free_cpu_milli && mem_mib <= self.free_mem_mib
    }
}

/// Progress of one submitted workflow.
#[derive(Debug, Clone)]
pub struct WorkflowRun {
    pub workflow: WorkflowSpec,
    pub namespace: String,
    pub claim_name: String,
    pub succeeded: BTreeSet<String>,
    /// Tasks queued for admission or with a live pod.
    pub in_flight: BTreeSet<String>,
    pub failed_attempts: u64,
    pub create_calls: u64,
    pub started_at: SimTime,
    pub completed_at: Option<SimTime>,
    namespace_requested: bool,
    claim_requested: bool,
    claim_bound: bool,
    namespace_delete_issued: bool,
    /// uid of the pod currently owned for each task.
    pod_uid: BTreeMap<String, u64>,
    delete_issued: BTreeSet<u64>,
    /// Pods with our name that we did not create, being cleared away.
    foreign: BTreeSet<String>,
}

impl WorkflowRun {
    fn new(workflow: WorkflowSpec, namespace: String, now: SimTime) -> Self {
        WorkflowRun {
            claim_name: format!("{namespace}-data"),
            workflow,
            namespace,
            succeeded: BTreeSet::new(),
            in_flight: BTreeSet::new(),
            failed_attempts: 0,
            create_calls: 0,
            started_at: now,
            completed_at: None,
            namespace_requested: false,
            claim_requested: false,
            claim_bound: false,
            namespace_delete_issued: false,
            pod_uid: BTreeMap::new(),
            delete_issued: BTreeSet::new(),
            foreign: BTreeSet::new(),
        }
    }

    pub fn is_complete(&self) -> bool {
        self.completed_at.is_some()
    }
}

pub fn pod_name(task: &str) -> String {
    format!("task-{task}")
}

fn task_of(pod: &str) -> Option<&str> {
    pod.strip_prefix("task-")
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Action {
    CreateNamespace(usize),
    CreateClaim(usize),
    CreatePod(usize, String),
    DeletePod(usize, String),
    Requeue(usize, String),
    DeleteNamespace(usize),
}

/// The event-driven workflow engine.
///
/// Every apiserver call is issued `api_call_overhead` after the decision to
/// make it. Successors of a task are admitted when its pod's `Deleted` event
/// arrives.
pub struct AdaptorEngine {
    config: EngineConfig,
    feed: Feed,
    runs: Vec<WorkflowRun>,
    by_namespace: BTreeMap<String, usize>,
    admission: VecDeque<(usize, String)>,
    reservations: BTreeMap<(String, String), (u64, u64)>,
    actions: BTreeMap<u64, Action>,
    next_token: u64,
    next_seq: u64,
    trace: Vec<TraceRecord>,
    /// Largest Σ request ever admitted (listed plus reserved), for safety
    /// checks.
    peak_admitted: (u64, u64),
}

impl AdaptorEngine {
    pub fn new(config: EngineConfig, feed: Feed) -> Self {
        AdaptorEngine {
            config,
            feed,
            runs: Vec::new(),
            by_namespace: BTreeMap::new(),
            admission: VecDeque::new(),
            reservations: BTreeMap::new(),
            actions: BTreeMap::new(),
            next_token: 0,
            next_seq: 1,
            trace: Vec::new(),
            peak_admitted: (0, 0),
        }
    }

    pub fn runs(&self) -> &[WorkflowRun] {
        &self.runs
    }

    pub fn peak_admitted(&self) -> (u64, u64) {
        self.peak_admitted
    }

    fn active_runs(&self) -> usize {
        self.runs.iter().filter(|r| !r.is_complete()).count()
    }

    /// Accepts a workflow and starts its namespace creation.
    pub fn submit_workflow(
        &mut self,
        spec: WorkflowSpec,
        ctx: &mut Ctx<'_>,
    ) -> Result<usize, EngineError> {
        if !self.config.multi_run && self.active_runs() > 0 {
            return Err(EngineError::Busy);
        }
        let namespace = format!("{}-{:03}", spec.name(), self.next_seq);
        self.next_seq += 1;
        let idx = self.runs.len();
        self.by_namespace.insert(namespace.clone(), idx);
        self.runs.push(WorkflowRun::new(spec, namespace.clone(), ctx.now));
        self.record(ctx.now, TraceAction::SubmitWorkflow, None, &namespace);
        self.ensure_namespace(idx, ctx);
        Ok(idx)
    }

    /// Requests the namespace, or moves on to the claim if it is already
    /// listed. Repeated calls do nothing new.
    pub fn ensure_namespace(&mut self, run: usize, ctx: &mut Ctx<'_>) {
        let r = &self.runs[run];
        if ctx.store.get_namespace(&r.namespace).is_some() {
            self.ensure_claim(run, ctx);
        } else if !r.namespace_requested {
            self.runs[run].namespace_requested = true;
            self.later(ctx, Action::CreateNamespace(run));
        }
    }

    fn ensure_claim(&mut self, run: usize, ctx: &mut Ctx<'_>) {
        let r = &self.runs[run];
        match ctx.store.get_claim(&r.namespace, &r.claim_name) {
            Some(c) if c.bound => self.on_claim_bound(run, ctx),
            Some(_) => {}
            None if !r.claim_requested => {
                self.runs[run].claim_requested = true;
                self.later(ctx, Action::CreateClaim(run));
            }
            None => {}
        }
    }

    fn on_claim_bound(&mut self, run: usize, ctx: &mut Ctx<'_>) {
        if self.runs[run].claim_bound {
            return;
        }
        self.runs[run].claim_bound = true;
        let ns = self.runs[run].namespace.clone();
        self.record(ctx.now, TraceAction::ClaimBound, None, &ns);
        self.enqueue_ready(run, ctx.now);
        self.try_admit(ctx);
    }

    fn enqueue_ready(&mut self, run: usize, now: SimTime) {
        let r = &self.runs[run];
        let ready = r
            .workflow
            .ready_tasks(&r.succeeded, &r.in_flight)
            .expect("run bookkeeping uses known, disjoint task ids");
        for task in ready {
            self.runs[run].in_flight.insert(task.clone());
            let ns = self.runs[run].namespace.clone();
            self.record(now, TraceAction::QueueTask, Some(&task), &ns);
            self.admission.push_back((run, task));
        }
    }

    /// Creates pods for queued tasks, in FIFO order, while the listed free
    /// resources cover them.
    pub fn try_admit(&mut self, ctx: &mut Ctx<'_>) {
        while let Some((run, task)) = self.admission.front().cloned() {
            let reserved = self
                .reservations
                .values()
                .fold((0, 0), |(c, m), (rc, rm)| (c + rc, m + rm));
            let Ok(free) = ClusterFreeResources::compute(ctx.store, reserved) else {
                return;
            };
            let spec = &self.runs[run].workflow.tasks()[&task];
            let (cpu, mem) = (spec.cpu_milli, spec.mem_mib);
            if !free.covers(cpu, mem) {
                return;
            }
            self.admission.pop_front();
            let ns = self.runs[run].namespace.clone();
            self.reservations.insert((ns, pod_name(&task)), (cpu, mem));
            self.note_admitted(ctx.store, reserved.0 + cpu, reserved.1 + mem);
            self.later(ctx, Action::CreatePod(run, task));
        }
    }

    fn note_admitted(&mut self, store: &CacheStore, cpu: u64, mem: u64) {
        let (pc, pm) = store
            .pods
            .values()
            .fold((0, 0), |(c, m), p| (c + p.request_cpu_milli, m + p.request_mem_mib));
        self.peak_admitted.0 = self.peak_admitted.0.max(pc + cpu);
        self.peak_admitted.1 = self.peak_admitted.1.max(pm + mem);
    }

    fn later(&mut self, ctx: &mut Ctx<'_>, action: Action) {
        self.at(ctx, ctx.now + ctx.cluster.config().latencies.api_call_overhead, action);
    }

    fn at(&mut self, ctx: &mut Ctx<'_>, at: SimTime, action: Action) {
        let token = self.next_token;
        self.next_token += 1;
        self.actions.insert(token, action);
        ctx.schedule_timer(at, token);
    }

    fn record(&mut self, time: SimTime, action: TraceAction, task: Option<&str>, ns: &str) {
        self.trace.push(TraceRecord {
            time,
            action,
            task: task.map(str::to_string),
            namespace: ns.to_string(),
        });
    }

    fn perform(&mut self, action: Action, ctx: &mut Ctx<'_>) {
        match action {
            Action::CreateNamespace(run) => {
                let ns = self.runs[run].namespace.clone();
                self.record(ctx.now, TraceAction::CreateNamespace, None, &ns);
                match ctx.cluster.create_namespace(&ns) {
                    Ok(_) | Err(SimError::AlreadyExists { .. }) => {}
                    Err(e) => self.fail(ctx.now, &ns, e),
                }
            }
            Action::CreateClaim(run) => {
                let (ns, claim) = (self.runs[run].namespace.clone(), self.runs[run].claim_name.clone());
                self.record(ctx.now, TraceAction::CreateClaim, None, &ns);
                let res = ctx.cluster.create_claim(
                    &ns,
                    &claim,
                    &self.config.storage_class,
                    self.config.claim_capacity_mib,
                );
                match res {
                    Ok(_) | Err(SimError::AlreadyExists { .. }) => {}
                    Err(e) => self.fail(ctx.now, &ns, e),
                }
            }
            Action::CreatePod(run, task) => self.create_pod(run, task, ctx),
            Action::DeletePod(run, task) => {
                let ns = self.runs[run].namespace.clone();
                self.record(ctx.now, TraceAction::DeletePod, Some(&task), &ns);
                match ctx.cluster.delete_pod(&ns, &pod_name(&task)) {
                    Ok(()) | Err(SimError::NotFound { .. }) => {}
                    Err(e) => self.fail(ctx.now, &ns, e),
                }
            }
            Action::Requeue(run, task) => {
                let ns = self.runs[run].namespace.clone();
                self.record(ctx.now, TraceAction::Retry, Some(&task), &ns);
                self.admission.push_back((run, task));
                self.try_admit(ctx);
            }
            Action::DeleteNamespace(run) => {
                let ns = self.runs[run].namespace.clone();
                self.record(ctx.now, TraceAction::DeleteNamespace, None, &ns);
                if let Err(e) = ctx.cluster.delete_namespace(&ns) {
                    self.fail(ctx.now, &ns, e);
                }
            }
        }
    }

    fn create_pod(&mut self, run: usize, task: String, ctx: &mut Ctx<'_>) {
        let r = &self.runs[run];
        let spec = &r.workflow.tasks()[&task];
        let req = PodRequest {
            namespace: r.namespace.clone(),
            name: pod_name(&task),
            task_id: task.clone(),
            cpu_milli: spec.cpu_milli,
            mem_mib: spec.mem_mib,
            volume_claim: Some(r.claim_name.clone()),
            run_duration: spec.emulated_duration(),
        };
        let ns = r.namespace.clone();
        self.runs[run].create_calls += 1;
        self.record(ctx.now, TraceAction::CreatePod, Some(&task), &ns);
        match ctx.cluster.create_pod(req) {
            Ok(pod) => {
                self.runs[run].pod_uid.insert(task, pod.uid);
            }
            Err(SimError::DuplicatePodName { name, .. }) => {
                // Clear the stale pod; its Deleted event re-queues the task.
                self.record(ctx.now, TraceAction::DuplicatePod, Some(&task), &ns);
                self.runs[run].foreign.insert(name.clone());
                self.runs[run].failed_attempts += 1;
                self.reservations.remove(&(ns.clone(), name));
                self.later(ctx, Action::DeletePod(run, task));
            }
            Err(e) => {
                self.reservations.remove(&(ns.clone(), pod_name(&task)));
                self.fail(ctx.now, &ns, e);
            }
        }
    }

    fn fail(&mut self, now: SimTime, ns: &str, err: SimError) {
        self.trace.push(TraceRecord {
            time: now,
            action: TraceAction::Error,
            task: Some(err.to_string()),
            namespace: ns.to_string(),
        });
    }

    fn on_pod(&mut self, action: EventAction, pod: &PodRecord, ctx: &mut Ctx<'_>) {
        let Some(&run) = self.by_namespace.get(&pod.namespace) else {
            return;
        };
        let Some(task) = task_of(&pod.name).map(str::to_string) else {
            return;
        };
        let ns = pod.namespace.clone();
        let ours = self.runs[run].pod_uid.get(&task) == Some(&pod.uid);
        if !ours {
            if action == EventAction::Deleted && self.runs[run].foreign.remove(&pod.name) {
                self.admission.push_back((run, task));
                self.try_admit(ctx);
            }
            return;
        }
        match action {
            EventAction::Added => {
                self.reservations.remove(&(ns, pod.name.clone()));
            }
            EventAction::Modified => {
                if pod.terminating || self.runs[run].delete_issued.contains(&pod.uid) {
                    return;
                }
                match pod.phase {
                    PodPhase::Running => {
                        self.record(ctx.now, TraceAction::PodRunning, Some(&task), &ns);
                    }
                    PodPhase::Succeeded => {
                        self.record(ctx.now, TraceAction::PodSucceeded, Some(&task), &ns);
                        self.runs[run].delete_issued.insert(pod.uid);
                        self.later(ctx, Action::DeletePod(run, task));
                    }
                    PodPhase::Failed => {
                        self.record(ctx.now, TraceAction::PodFailed, Some(&task), &ns);
                        self.runs[run].failed_attempts += 1;
                        self.runs[run].delete_issued.insert(pod.uid);
                        self.later(ctx, Action::DeletePod(run, task));
                    }
                    PodPhase::Pending => {}
                }
            }
            EventAction::Deleted => {
                self.reservations.remove(&(ns.clone(), pod.name.clone()));
                self.runs[run].pod_uid.remove(&task);
                self.record(ctx.now, TraceAction::PodDeleted, Some(&task), &ns);
                if pod.phase == PodPhase::Succeeded {
                    let r = &mut self.runs[run];
                    r.in_flight.remove(&task);
                    r.succeeded.insert(task);
                    if r.succeeded.len() == r.workflow.len() {
                        if !r.namespace_delete_issued {
                            r.namespace_delete_issued = true;
                            self.later(ctx, Action::DeleteNamespace(run));
                        }
                    } else {
                        self.enqueue_ready(run, ctx.now);
                    }
                } else {
                    let at = ctx.now + self.config.retry_backoff;
                    self.at(ctx, at, Action::Requeue(run, task));
                }
                self.try_admit(ctx);
            }
        }
    }

    fn on_namespace(&mut self, action: EventAction, name: &str, ctx: &mut Ctx<'_>) {
        let Some(&run) = self.by_namespace.get(name) else {
            return;
        };
        match action {
            EventAction::Added => self.ensure_namespace(run, ctx),
            EventAction::Modified => {}
            EventAction::Deleted => {
                if self.runs[run].is_complete() || !self.runs[run].namespace_delete_issued {
                    return;
                }
                self.runs[run].completed_at = Some(ctx.now);
                self.record(ctx.now, TraceAction::WorkflowComplete, None, name);
                self.submit_next(ctx);
            }
        }
    }

    fn submit_next(&mut self, ctx: &mut Ctx<'_>) {
        if let Some(spec) = self.feed.pull(&mut self.trace, ctx.now) {
            if let Err(e) = self.submit_workflow(spec, ctx) {
                self.trace.push(TraceRecord {
                    time: ctx.now,
                    action: TraceAction::Error,
                    task: Some(e.to_string()),
                    namespace: String::new(),
                });
            }
        }
    }
}

impl EventHandler for AdaptorEngine {
    fn on_event(&mut self, event: &ResourceEvent, ctx: &mut Ctx<'_>) {
        match &event.object {
            ObjectSnapshot::Pod(p) => self.on_pod(event.action, p, ctx),
            ObjectSnapshot::Namespace(n) => self.on_namespace(event.action, &n.name, ctx),
            ObjectSnapshot::Claim(c) => {
                if let Some(&run) = self.by_namespace.get(&c.namespace) {
                    if c.bound && c.name == self.runs[run].claim_name && event.action != EventAction::Deleted {
                        self.on_claim_bound(run, ctx);
                    }
                }
            }
            ObjectSnapshot::Node(_) => {}
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if let Some(action) = self.actions.remove(&token) {
            self.perform(action, ctx);
        }
    }
}

impl WorkflowController for AdaptorEngine {
    fn watched_kinds(&self) -> &'static [ResourceKind] {
        &[ResourceKind::Pod, ResourceKind::Namespace, ResourceKind::Claim]
    }

    fn start(&mut self, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        let spec = self.feed.pull(&mut self.trace, ctx.now).ok_or(EngineError::NoWorkflow)?;
        self.submit_workflow(spec, ctx).map(|_| ())
    }

    fn completed_runs(&self) -> usize {
        self.runs.iter().filter(|r| r.is_complete()).count()
    }

    fn retries(&self) -> u64 {
        self.runs.iter().map(|r| r.failed_attempts).sum()
    }

    fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}
