use std::collections::{BTreeMap, BTreeSet};

use crate::engine::{
    EngineConfig, EngineError, Feed, TraceAction, TraceRecord, WorkflowController,
};
use crate::informer::{Ctx, EventHandler};
use crate::sim::{EventAction, ObjectSnapshot, PodPhase, PodRequest, ResourceEvent, ResourceKind};
use crate::time::SimTime;
use crate::workflow::WorkflowSpec;

use super::{record, BatchJobConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
enum Cmd {
    CreateNamespace,
    CreateClaim,
    CreatePod(String),
    DeletePod(String),
    DeleteNamespace,
    Poll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Stage {
    Namespace,
    Claim,
    Creating,
    Polling,
    Deleting,
    Teardown,
    Done,
}

struct Run {
    namespace: String,
    claim: String,
    workflow: WorkflowSpec,
    levels: Vec<Vec<String>>,
    level: usize,
    stage: Stage,
    /// Level pods still to be created in the current stage.
    to_create: usize,
    /// Pods of the current level awaiting their Deleted event.
    awaiting_delete: BTreeSet<String>,
    /// Failed pods being cleared before re-creation.
    retrying: BTreeSet<String>,
    uid: BTreeMap<String, u64>,
}

/// Submits one level at a time through a serial command stream, checks for
/// level completion on a polling grid, and deletes each finished level before
/// starting the next.
pub struct BatchJobRunner {
    config: BatchJobConfig,
    engine: EngineConfig,
    feed: Feed,
    run: Option<Run>,
    script_free: SimTime,
    cmds: BTreeMap<u64, Cmd>,
    next_token: u64,
    next_seq: u64,
    completed: usize,
    retries: u64,
    trace: Vec<TraceRecord>,
}

impl BatchJobRunner {
    pub fn new(config: BatchJobConfig, engine: EngineConfig, feed: Feed) -> Self {
        BatchJobRunner {
            config,
            engine,
            feed,
            run: None,
            script_free: SimTime::ZERO,
            cmds: BTreeMap::new(),
            next_token: 0,
            next_seq: 1,
            completed: 0,
            retries: 0,
            trace: Vec::new(),
        }
    }

    pub fn submit_workflow(&mut self, spec: WorkflowSpec, ctx: &mut Ctx<'_>) -> Result<(), EngineError> {
        if self.run.as_ref().is_some_and(|r| r.stage != Stage::Done) {
            return Err(EngineError::Busy);
        }
        let namespace = format!("{}-{:03}", spec.name(), self.next_seq);
        self.next_seq += 1;
        let levels = spec
            .level_partition()
            .into_iter()
            .map(|l| l.into_iter().collect())
            .collect();
        record(&mut self.trace, ctx.now, TraceAction::SubmitWorkflow, None, &namespace);
        self.run = Some(Run {
            claim: format!("{namespace}-data"),
            namespace,
            workflow: spec,
            levels,
            level: 0,
            stage: Stage::Namespace,
            to_create: 0,
            awaiting_delete: BTreeSet::new(),
            retrying: BTreeSet::new(),
            uid: BTreeMap::new(),
        });
        self.issue(ctx, Cmd::CreateNamespace);
        Ok(())
    }

    /// Queues a command behind whatever the script is already doing.
    fn issue(&mut self, ctx: &mut Ctx<'_>, cmd: Cmd) {
        let at = self.script_free.max(ctx.now) + self.config.per_command_overhead;
        self.script_free = at;
        self.at(ctx, at, cmd);
    }

    fn at(&mut self, ctx: &mut Ctx<'_>, at: SimTime, cmd: Cmd) {
        let token = self.next_token;
        self.next_token += 1;
        self.cmds.insert(token, cmd);
        ctx.schedule_timer(at, token);
    }

    fn poll_soon(&mut self, ctx: &mut Ctx<'_>) {
        let at = ctx.now.ceil_to(self.config.poll_interval);
        self.at(ctx, at, Cmd::Poll);
    }

    fn poll_later(&mut self, ctx: &mut Ctx<'_>) {
        let at = ctx.now.next_tick(self.config.poll_interval).max(ctx.now + SimTime::from_millis(1));
        self.at(ctx, at, Cmd::Poll);
    }

    fn create_level(&mut self, ctx: &mut Ctx<'_>) {
        let run = self.run.as_mut().expect("active run");
        run.stage = Stage::Creating;
        let tasks = run.levels[run.level].clone();
        run.to_create = tasks.len();
        for t in tasks {
            self.issue(ctx, Cmd::CreatePod(t));
        }
    }

    fn execute(&mut self, cmd: Cmd, ctx: &mut Ctx<'_>) {
        let Some(run) = self.run.as_mut() else {
            return;
        };
        let ns = run.namespace.clone();
        match cmd {
            Cmd::CreateNamespace => {
                record(&mut self.trace, ctx.now, TraceAction::CreateNamespace, None, &ns);
                let _ = ctx.cluster.create_namespace(&ns);
                self.poll_soon(ctx);
            }
            Cmd::CreateClaim => {
                record(&mut self.trace, ctx.now, TraceAction::CreateClaim, None, &ns);
                let claim = run.claim.clone();
                let _ = ctx.cluster.create_claim(
                    &ns,
                    &claim,
                    &self.engine.storage_class,
                    self.engine.claim_capacity_mib,
                );
                self.poll_soon(ctx);
            }
            Cmd::CreatePod(task) => {
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
                if run.stage == Stage::Creating {
                    run.to_create -= 1;
                    if run.to_create == 0 {
                        run.stage = Stage::Polling;
                        self.poll_soon(ctx);
                    }
                }
            }
            Cmd::DeletePod(task) => {
                record(&mut self.trace, ctx.now, TraceAction::DeletePod, Some(&task), &ns);
                let _ = ctx.cluster.delete_pod(&ns, &format!("task-{task}"));
            }
            Cmd::DeleteNamespace => {
                record(&mut self.trace, ctx.now, TraceAction::DeleteNamespace, None, &ns);
                let _ = ctx.cluster.delete_namespace(&ns);
            }
            Cmd::Poll => self.poll(ctx),
        }
    }

    fn poll(&mut self, ctx: &mut Ctx<'_>) {
        let run = self.run.as_mut().expect("active run");
        match run.stage {
            Stage::Namespace => {
                if ctx.store.get_namespace(&run.namespace).is_some() {
                    run.stage = Stage::Claim;
                    self.issue(ctx, Cmd::CreateClaim);
                } else {
                    self.poll_later(ctx);
                }
            }
            Stage::Claim => {
                if ctx.store.get_claim(&run.namespace, &run.claim).is_some_and(|c| c.bound) {
                    self.create_level(ctx);
                } else {
                    self.poll_later(ctx);
                }
            }
            Stage::Polling => {
                let ns = run.namespace.clone();
                let mut all_done = true;
                let mut failed = Vec::new();
                for task in &run.levels[run.level] {
                    let pod = ctx.store.get_pod(&ns, &format!("task-{task}"));
                    match pod.map(|p| p.phase) {
                        Some(PodPhase::Succeeded) => {}
                        Some(PodPhase::Failed) if !run.retrying.contains(task) => {
                            all_done = false;
                            failed.push(task.clone());
                        }
                        _ => all_done = false,
                    }
                }
                if all_done {
                    run.stage = Stage::Deleting;
                    let tasks = run.levels[run.level].clone();
                    run.awaiting_delete = tasks.iter().cloned().collect();
                    for t in tasks {
                        self.issue(ctx, Cmd::DeletePod(t));
                    }
                } else {
                    for t in failed {
                        self.retries += 1;
                        self.run.as_mut().expect("active").retrying.insert(t.clone());
                        self.issue(ctx, Cmd::DeletePod(t));
                    }
                    self.poll_later(ctx);
                }
            }
            Stage::Creating | Stage::Deleting | Stage::Teardown | Stage::Done => {}
        }
    }

    fn on_pod_deleted(&mut self, task: String, uid: u64, ctx: &mut Ctx<'_>) {
        let Some(run) = self.run.as_mut() else {
            return;
        };
        if run.uid.get(&task) != Some(&uid) {
            return;
        }
        run.uid.remove(&task);
        record(&mut self.trace, ctx.now, TraceAction::PodDeleted, Some(&task), &run.namespace);
        if run.retrying.remove(&task) {
            self.issue(ctx, Cmd::CreatePod(task));
            return;
        }
        if run.stage != Stage::Deleting || !run.awaiting_delete.remove(&task) {
            return;
        }
        if run.awaiting_delete.is_empty() {
            run.level += 1;
            if run.level < run.levels.len() {
                self.create_level(ctx);
            } else {
                run.stage = Stage::Teardown;
                self.issue(ctx, Cmd::DeleteNamespace);
            }
        }
    }
}

impl EventHandler for BatchJobRunner {
    fn on_event(&mut self, event: &ResourceEvent, ctx: &mut Ctx<'_>) {
        let Some(run) = self.run.as_ref() else {
            return;
        };
        match &event.object {
            ObjectSnapshot::Pod(p) if p.namespace == run.namespace => {
                if event.action == EventAction::Deleted {
                    if let Some(task) = p.name.strip_prefix("task-") {
                        self.on_pod_deleted(task.to_string(), p.uid, ctx);
                    }
                }
            }
            ObjectSnapshot::Namespace(n)
                if n.name == run.namespace
                    && event.action == EventAction::Deleted
                    && run.stage == Stage::Teardown =>
            {
                let ns = run.namespace.clone();
                self.run.as_mut().expect("active").stage = Stage::Done;
                self.completed += 1;
                record(&mut self.trace, ctx.now, TraceAction::WorkflowComplete, None, &ns);
                if let Some(spec) = self.feed.pull(&mut self.trace, ctx.now) {
                    let _ = self.submit_workflow(spec, ctx);
                }
            }
            _ => {}
        }
    }

    fn on_timer(&mut self, token: u64, ctx: &mut Ctx<'_>) {
        if let Some(cmd) = self.cmds.remove(&token) {
            self.execute(cmd, ctx);
        }
    }
}

impl WorkflowController for BatchJobRunner {
    fn watched_kinds(&self) -> &'static [ResourceKind] {
        &[ResourceKind::Pod, ResourceKind::Namespace]
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
