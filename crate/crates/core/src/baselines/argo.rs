use std::collections::{BTreeMap, BTreeSet};

use crate::engine::{
    EngineConfig, EngineError, Feed, TraceAction, TraceRecord, WorkflowController,
};
use crate::informer::{Ctx, EventHandler};
use crate::sim::{EventAction, ObjectSnapshot, PodPhase, PodRequest, ResourceEvent, ResourceKind};
use crate::time::SimTime;
use crate::workflow::WorkflowSpec;

use super::{record, ArgoLikeConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    CreateNamespace,
    CreateClaim,
    CreatePod(String),
    DeletePod(String),
    DeleteNamespace,
    Reconcile,
}

struct Run {
    namespace: String,
    claim: String,
    workflow: WorkflowSpec,
    depth: BTreeMap<String, usize>,
    ready_to_run: bool,
    /// Tasks handed to the worker and not yet cleared for a retry.
    queued: BTreeSet<String>,
    /// Pods whose terminal phase the controller has acted on.
    seen: BTreeSet<u64>,
    succeeded_gone: BTreeSet<String>,
    uid: BTreeMap<String, u64>,
    namespace_delete_issued: bool,
    done: bool,
}

/// Per-edge triggering like the adaptor, but state changes are noticed only
/// on reconcile ticks, pod creations pass through one serialized worker that
/// costs a fixed overhead each, and finished pods are garbage-collected after
/// a delay.
pub struct ArgoLikeRunner {
    config: ArgoLikeConfig,
    engine: EngineConfig,
    feed: Feed,
    run: Option<Run>,
    worker_free: SimTime,
    tick_pending: bool,
    ops: BTreeMap<u64, Op>,
    next_token: u64,
    next_seq: u64,
    completed: usize,
    retries: u64,
    trace: Vec<TraceRecord>,
}

impl ArgoLikeRunner {
    pub fn new(config: ArgoLikeConfig, engine: EngineConfig, feed: Feed) -> Self {
        ArgoLikeRunner {
            config,
            engine,
            feed,
            run: None,
            worker_free: SimTime::ZERO,
            tick_pending: false,
            ops: BTreeMap::new(),
            next_token: 0,
            next_seq: 1,
            completed: 0,
            retries: 0,
            trace: Vec::new(),
        }
    }

    pub fn submit_workflow(&mut self, spec: WorkflowSpec, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        if self.run.as_ref().is_some_and(|r| !r.done) {
            return Err(EngineError::Busy);
        }
        let namespace = format!("{}-{:03}", spec.name(), self.next_seq);
        self.next_seq += 1;
        record(&mut self.trace, ctx.now, TraceAction::SubmitWorkflow, None, &namespace);
        self.run = Some(Run {
            claim: format!("{namespace}-data"),
            namespace,
            depth: spec.depths(),
            workflow: spec,
            ready_to_run: false,
            queued: BTreeSet::new(),
            seen: BTreeSet::new(),
            succeeded_gone: BTreeSet::new(),
            uid: BTreeMap::new(),
            namespace_delete_issued: false,
            done: false,
        });
        self.api(ctx, Op::CreateNamespace);
        Ok(())
    }

    fn api(&mut self, ctx: &mut Ctx<'_>, op: Op) {
        let at = ctx.now + ctx.cluster.config().latencies.api_call_overhead;
        self.at(ctx, at, op);
    }

    fn at(&mut self, ctx: &mut Ctx<'_>, at: SimTime, op: Op) {
        let token = self.next_token;
        self.next_token += 1;
        self.ops.insert(token, op);
        ctx.schedule_timer(at, token);
    }

    fn event_driven(&self) -> bool {
        self.config.reconcile_interval == SimTime::ZERO
    }

    fn schedule_tick(&mut self, ctx: &mut Ctx<'_>, at: SimTime) {
        if !self.tick_pending {
            self.tick_pending = true;
            self.at(ctx, at, Op::Reconcile);
        }
    }

    /// One pass of the controller loop over the cached state.
    fn reconcile(&mut self, ctx: &mut Ctx<'_>) {
        let api = ctx.cluster.config().latencies.api_call_overhead;
        let Some(run) = self.run.as_mut() else {
            return;
        };
        if !run.ready_to_run || run.done {
            return;
        }
        let ns = run.namespace.clone();
        let mut gc = Vec::new();
        for (task, uid) in &run.uid {
            let Some(pod) = ctx.store.get_pod(&ns, &format!("task-{task}")) else {
                continue;
            };
            if pod.uid != *uid || run.seen.contains(uid) {
                continue;
            }
            match pod.phase {
                PodPhase::Succeeded => {
                    run.seen.insert(*uid);
                    gc.push((task.clone(), self.config.pod_gc_delay + api));
                }
                PodPhase::Failed => {
                    run.seen.insert(*uid);
                    gc.push((task.clone(), api));
                }
                _ => {}
            }
        }
        for (task, delay) in gc {
            let at = ctx.now + delay;
            self.at(ctx, at, Op::DeletePod(task));
        }

        let run = self.run.as_mut().expect("checked above");
        if run.succeeded_gone.len() == run.workflow.len() {
            if !run.namespace_delete_issued {
                run.namespace_delete_issued = true;
                self.api(ctx, Op::DeleteNamespace);
            }
            return;
        }
        let shallowest = run
            .workflow
            .tasks()
            .keys()
            .filter(|t| !run.succeeded_gone.contains(*t))
            .map(|t| run.depth[t])
            .min()
            .unwrap_or(0);
        let mut ready: Vec<(usize, String)> = run
            .workflow
            .tasks()
            .values()
            .filter(|t| !run.queued.contains(&t.id))
            .filter(|t| t.inputs.iter().all(|p| run.succeeded_gone.contains(p)))
            .filter(|t| !self.config.depth_gated || run.depth[&t.id] <= shallowest)
            .map(|t| (run.depth[&t.id], t.id.clone()))
            .collect();
        ready.sort();
        run.queued.extend(ready.iter().map(|(_, t)| t.clone()));
        self.worker_free = self.worker_free.max(ctx.now);
        for (_, task) in ready {
            self.worker_free += self.config.per_task_controller_overhead;
            let at = self.worker_free + api;
            record(&mut self.trace, ctx.now, TraceAction::QueueTask, Some(&task), &ns);
            self.at(ctx, at, Op::CreatePod(task));
        }
        if !self.event_driven() {
            let next = ctx.now + self.config.reconcile_interval;
            self.schedule_tick(ctx, next);
        }
    }

    fn perform(&mut self, op: Op, ctx: &mut Ctx<'_>) {
        if op == Op::Reconcile {
            self.tick_pending = false;
            self.reconcile(ctx);
            return;
        }
        let Some(run) = self.run.as_mut() else {
            return;
        };
        let ns = run.namespace.clone();
        match op {
            Op::CreateNamespace => {
                record(&mut self.trace, ctx.now, TraceAction::CreateNamespace, None, &ns);
                let _ = ctx.cluster.create_namespace(&ns);
            }
            Op::CreateClaim => {
                record(&mut self.trace, ctx.now, TraceAction::CreateClaim, None, &ns);
                let claim = run.claim.clone();
                let _ = ctx.cluster.create_claim(
                    &ns,
                    &claim,
                    &self.engine.storage_class,
                    self.engine.claim_capacity_mib,
                );
            }
            Op::CreatePod(task) => {
                let spec = &run.workflow.tasks()[&task];
                let req = PodRequest {
                    namespace: ns.clone(),
                    name: format!("task-{task}"),
                    task_id: task.clone(),
                    cpu_milli: spec.cpu_milli,
                    mem_mib: spec.mem_mib,
                    volume_claim: Some(run.claim.clone()),
                    run_duration: spec.emulated_duration(),
                };
                record(&mut self.trace, ctx.now, TraceAction::CreatePod, Some(&task), &ns);
                if let Ok(pod) = ctx.cluster.create_pod(req) {
                    run.uid.insert(task, pod.uid);
                }
            }
            Op::DeletePod(task) => {
                record(&mut self.trace, ctx.now, TraceAction::DeletePod, Some(&task), &ns);
                let _ = ctx.cluster.delete_pod(&ns, &format!("task-{task}"));
            }
            Op::DeleteNamespace => {
                record(&mut self.trace, ctx.now, TraceAction::DeleteNamespace, None, &ns);
                let _ = ctx.cluster.delete_namespace(&ns);
            }
            Op::Reconcile => unreachable!(),
        }
    }

    fn begin(&mut self, ctx: &mut Ctx<'_>) {
        let run = self.run.as_mut().expect("active run");
        if run.ready_to_run {
            return;
        }
        run.ready_to_run = true;
        if self.event_driven() {
            self.reconcile(ctx);
        } else {
            let at = ctx.now.ceil_to(self.config.reconcile_interval);
            self.schedule_tick(ctx, at);
        }
    }
}

impl EventHandler for ArgoLikeRunner {
    fn on_event(&mut self, event: &ResourceEvent, ctx: &mut Ctx<'_>) {
        let Some(run) = self.run.as_mut() else {
            return;
        };
        match &event.object {
            ObjectSnapshot::Namespace(n) if n.name == run.namespace => match event.action {
                EventAction::Added => self.api(ctx, Op::CreateClaim),
                EventAction::Deleted if run.namespace_delete_issued && !run.done => {
                    run.done = true;
                    let ns = run.namespace.clone();
                    self.completed += 1;
                    record(&mut self.trace, ctx.now, TraceAction::WorkflowComplete, None, &ns);
                    if let Some(spec) = self.feed.pull(&mut self.trace, ctx.now) {
                        let _ = self.submit_workflow(spec, ctx);
                    }
                }
                _ => {}
            },
            ObjectSnapshot::Claim(c)
                if c.namespace == run.namespace && c.bound && event.action == EventAction::Modified =>
            {
                self.begin(ctx);
            }
            ObjectSnapshot::Pod(p) if p.namespace == run.namespace => {
                let Some(task) = p.name.strip_prefix("task-").map(str::to_string) else {
                    return;
                };
                if run.uid.get(&task) != Some(&p.uid) {
                    return;
                }
                if event.action == EventAction::Deleted {
                    run.uid.remove(&task);
                    if p.phase == PodPhase::Succeeded {
                        run.succeeded_gone.insert(task);
                    } else {
                        run.queued.remove(&task);
                        self.retries += 1;
                    }
                }
                if self.event_driven() {
                    self.reconcile(ctx);
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if let Some(op) = self.ops.remove(&token) {
            self.perform(op, ctx);
        }
    }
}

impl WorkflowController for ArgoLikeRunner {
    fn watched_kinds(&self) -> &'static [ResourceKind] {
        &[ResourceKind::Pod, ResourceKind::Namespace, ResourceKind::Claim]
    }

    fn start(&mut self, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        let spec = self.feed.pull(&mut self.trace, ctx.now).ok_or(EngineError::NoWorkflow)?;
        self.submit_workflow(spec, ctx)
    }

    fn completed_runs(&self) -> usize {
        self.completed
    }

    fn retries(&self) -> u64 {
        self.retries
    }

    fn trace(&self) -> &[TraceRecord] {
        &self.trace
    }
}
