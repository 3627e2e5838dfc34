use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    EventAction, FailureReason, NamespaceRecord, NodeState, ObjectSnapshot, PodPhase, PodRecord,
    ResourceEvent, ResourceKind, SchedulerPolicy, SimConfig, SimError, VolumeClaim,
};
use crate::time::SimTime;

/// What a client asks for when creating a pod.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PodRequest {
    pub namespace: String,
    pub name: String,
    pub task_id: String,
    pub cpu_milli: u64,
    pub mem_mib: u64,
    pub volume_claim: Option<String>,
    pub run_duration: SimTime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Op {
    NamespaceVisible(String),
    NamespaceRemove(String),
    ClaimBind {
        namespace: String,
        name: String,
        created_at: SimTime,
    },
    SchedulePass,
    PodStart(PodRef),
    PodFinish(PodRef),
    PodRemove(PodRef),
    Timer { target: u64, token: u64 },
    Deliver(Box<ResourceEvent>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct PodRef {
    namespace: String,
    name: String,
    uid: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Scheduled {
    at: SimTime,
    seq: u64,
    op: Op,
}

impl Ord for Scheduled {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at, self.seq).cmp(&(other.at, other.seq))
    }
}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

/// Result of processing one queue item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Fired {
    /// Cluster state changed; any new events are in the outbox.
    Applied,
    Timer { target: u64, token: u64 },
    Deliver(Box<ResourceEvent>),
}

/// Authoritative cluster state plus the virtual-time event queue.
///
/// All mutations either happen at the current instant (client calls) or are
/// queued and applied by [`Cluster::pop`] in `(time, sequence)` order.
#[derive(Debug)]
pub struct Cluster {
    config: SimConfig,
    now: SimTime,
    seq: u64,
    next_uid: u64,
    queue: BinaryHeap<Reverse<Scheduled>>,
    pass_times: BTreeSet<SimTime>,
    nodes: BTreeMap<String, NodeState>,
    namespaces: BTreeMap<String, NamespaceRecord>,
    pending_namespaces: BTreeMap<String, NamespaceRecord>,
    claims: BTreeMap<(String, String), VolumeClaim>,
    pods: BTreeMap<(String, String), PodRecord>,
    rng: ChaCha8Rng,
    log: Vec<ResourceEvent>,
    outbox: Vec<ResourceEvent>,
}

impl Cluster {
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        config.validate()?;
        let nodes = config
            .nodes
            .iter()
            .map(|n| {
                (
                    n.name.clone(),
                    NodeState {
                        name: n.name.clone(),
                        is_master: n.is_master,
                        allocatable_cpu_milli: n.cpu_milli,
                        allocatable_mem_mib: n.mem_mib,
                        bound_pods: BTreeSet::new(),
                        requested_cpu_milli: 0,
                        requested_mem_mib: 0,
                    },
                )
            })
            .collect();
        Ok(Cluster {
            rng: ChaCha8Rng::seed_from_u64(config.rng_seed),
            config,
            now: SimTime::ZERO,
            seq: 0,
            next_uid: 1,
            queue: BinaryHeap::new(),
            pass_times: BTreeSet::new(),
            nodes,
            namespaces: BTreeMap::new(),
            pending_namespaces: BTreeMap::new(),
            claims: BTreeMap::new(),
            pods: BTreeMap::new(),
            log: Vec::new(),
            outbox: Vec::new(),
        })
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    // ---- reads -------------------------------------------------------------

    pub fn nodes(&self) -> &BTreeMap<String, NodeState> {
        &self.nodes
    }

    pub fn namespaces(&self) -> &BTreeMap<String, NamespaceRecord> {
        &self.namespaces
    }

    pub fn namespace(&self, name: &str) -> Option<&NamespaceRecord> {
        self.namespaces.get(name)
    }

    pub fn claims(&self) -> &BTreeMap<(String, String), VolumeClaim> {
        &self.claims
    }

    pub fn claim(&self, namespace: &str, name: &str) -> Option<&VolumeClaim> {
        self.claims.get(&(namespace.to_string(), name.to_string()))
    }

    pub fn pods(&self) -> &BTreeMap<(String, String), PodRecord> {
        &self.pods
    }

    pub fn pod(&self, namespace: &str, name: &str) -> Option<&PodRecord> {
        self.pods.get(&(namespace.to_string(), name.to_string()))
    }

    /// Every event emitted so far, in emission order.
    pub fn log(&self) -> &[ResourceEvent] {
        &self.log
    }

    /// `true` when a node may host task pods.
    pub fn is_schedulable(&self, node: &NodeState) -> bool {
        !(node.is_master && self.config.exclude_master)
    }

    /// Σ requests of bound pods on schedulable nodes.
    pub fn used_resources(&self) -> (u64, u64) {
        self.nodes
            .values()
            .filter(|n| self.is_schedulable(n))
            .fold((0, 0), |(c, m), n| {
                (c + n.requested_cpu_milli, m + n.requested_mem_mib)
            })
    }

    pub fn allocatable_resources(&self) -> (u64, u64) {
        self.config.schedulable_capacity()
    }

    pub fn is_quiescent(&self) -> bool {
        self.queue.is_empty() && self.outbox.is_empty()
    }

    pub fn next_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|Reverse(s)| s.at)
    }

    /// Checks the per-node resource ledger and namespace membership.
    pub fn check_invariants(&self) -> Result<(), String> {
        for node in self.nodes.values() {
            let (mut cpu, mut mem) = (0, 0);
            for key in &node.bound_pods {
                let (ns, name) = key.split_once('/').expect("namespace/name key");
                let pod = self
                    .pod(ns, name)
                    .ok_or_else(|| format!("{} lists missing pod {key}", node.name))?;
                if pod.node.as_deref() != Some(node.name.as_str()) {
                    return Err(format!("pod {key} not bound to {}", node.name));
                }
                cpu += pod.request_cpu_milli;
                mem += pod.request_mem_mib;
            }
            if cpu != node.requested_cpu_milli || mem != node.requested_mem_mib {
                return Err(format!("ledger mismatch on {}", node.name));
            }
            if cpu > node.allocatable_cpu_milli || mem > node.allocatable_mem_mib {
                return Err(format!("{} is overcommitted", node.name));
            }
            if !self.is_schedulable(node) && !node.bound_pods.is_empty() {
                return Err(format!("excluded node {} hosts pods", node.name));
            }
        }
        for ((ns, name), pod) in &self.pods {
            let record = self
                .namespaces
                .get(ns)
                .ok_or_else(|| format!("pod {ns}/{name} in missing namespace"))?;
            if !record.pods.contains(name) || pod.namespace != *ns {
                return Err(format!("namespace {ns} does not list pod {name}"));
            }
        }
        for (ns, record) in &self.namespaces {
            for p in &record.pods {
                if !self.pods.contains_key(&(ns.clone(), p.clone())) {
                    return Err(format!("namespace {ns} lists missing pod {p}"));
                }
            }
            for c in &record.claims {
                if !self.claims.contains_key(&(ns.clone(), c.clone())) {
                    return Err(format!("namespace {ns} lists missing claim {c}"));
                }
            }
        }
        Ok(())
    }

    // ---- client calls --------------------------------------------------------

    /// Accepts a namespace; it becomes visible after `namespace_create`.
    pub fn create_namespace(&mut self, name: &str) -> Result<NamespaceRecord, SimError> {
        if self.namespaces.contains_key(name) || self.pending_namespaces.contains_key(name) {
            return Err(SimError::AlreadyExists {
                kind: ResourceKind::Namespace,
                name: name.to_string(),
            });
        }
        let record = NamespaceRecord {
            name: name.to_string(),
            claims: BTreeSet::new(),
            pods: BTreeSet::new(),
            terminating: false,
            created_at: self.now,
            deleted_at: None,
        };
        self.pending_namespaces.insert(name.to_string(), record.clone());
        let at = self.now + self.config.latencies.namespace_create;
        self.push(at, Op::NamespaceVisible(name.to_string()));
        Ok(record)
    }

    /// Marks a namespace terminating; it and everything in it disappear
    /// after `namespace_delete`.
    pub fn delete_namespace(&mut self, name: &str) -> Result<(), SimError> {
        let record = self.namespaces.get_mut(name).ok_or_else(|| SimError::NotFound {
            kind: ResourceKind::Namespace,
            name: name.to_string(),
        })?;
        if record.terminating {
            return Ok(());
        }
        record.terminating = true;
        let snapshot = record.clone();
        self.emit(EventAction::Modified, ObjectSnapshot::Namespace(snapshot));
        let at = self.now + self.config.latencies.namespace_delete;
        self.push(at, Op::NamespaceRemove(name.to_string()));
        Ok(())
    }

    pub fn create_claim(
        &mut self,
        namespace: &str,
        name: &str,
        storage_class: &str,
        capacity_mib: u64,
    ) -> Result<VolumeClaim, SimError> {
        self.live_namespace(namespace)?;
        let key = (namespace.to_string(), name.to_string());
        if self.claims.contains_key(&key) {
            return Err(SimError::AlreadyExists {
                kind: ResourceKind::Claim,
                name: name.to_string(),
            });
        }
        let claim = VolumeClaim {
            name: name.to_string(),
            namespace: namespace.to_string(),
            storage_class: storage_class.to_string(),
            capacity_mib,
            bound: false,
            created_at: self.now,
        };
        self.claims.insert(key, claim.clone());
        let ns = self.namespaces.get_mut(namespace).expect("checked above");
        ns.claims.insert(name.to_string());
        self.emit(EventAction::Added, ObjectSnapshot::Claim(claim.clone()));
        self.touch_namespace(namespace);
        let at = self.now + self.config.latencies.claim_create_and_bind;
        self.push(
            at,
            Op::ClaimBind {
                namespace: namespace.to_string(),
                name: name.to_string(),
                created_at: self.now,
            },
        );
        Ok(claim)
    }

    /// Admits a pod in `Pending`. Pods that do not fit anywhere stay pending
    /// until resources are released.
    pub fn create_pod(&mut self, req: PodRequest) -> Result<PodRecord, SimError> {
        self.live_namespace(&req.namespace)?;
        if req.cpu_milli == 0 || req.mem_mib == 0 {
            return Err(SimError::InvalidRequest);
        }
        if let Some(claim) = &req.volume_claim {
            if self.claim(&req.namespace, claim).is_none() {
                return Err(SimError::ClaimNotFound {
                    namespace: req.namespace.clone(),
                    claim: claim.clone(),
                });
            }
        }
        let key = (req.namespace.clone(), req.name.clone());
        if self.pods.contains_key(&key) {
            return Err(SimError::DuplicatePodName {
                namespace: req.namespace,
                name: req.name,
            });
        }
        let uid = self.next_uid;
        self.next_uid += 1;
        let pod = PodRecord {
            name: req.name.clone(),
            namespace: req.namespace.clone(),
            uid,
            task_id: req.task_id,
            request_cpu_milli: req.cpu_milli,
            request_mem_mib: req.mem_mib,
            volume_claim: req.volume_claim,
            phase: PodPhase::Pending,
            reason: None,
            node: None,
            terminating: false,
            created_at: self.now,
            started_at: None,
            finished_at: None,
            deleted_at: None,
            run_duration: req.run_duration,
        };
        self.pods.insert(key, pod.clone());
        self.namespaces
            .get_mut(&req.namespace)
            .expect("checked above")
            .pods
            .insert(req.name);
        self.emit(EventAction::Added, ObjectSnapshot::Pod(pod.clone()));
        self.touch_namespace(&pod.namespace);
        let at = self.now + self.config.latencies.pod_schedule;
        self.request_pass(at);
        Ok(pod)
    }

    /// Starts graceful deletion; the pod is removed after `pod_delete`.
    pub fn delete_pod(&mut self, namespace: &str, name: &str) -> Result<(), SimError> {
        let key = (namespace.to_string(), name.to_string());
        let pod = self.pods.get_mut(&key).ok_or_else(|| SimError::NotFound {
            kind: ResourceKind::Pod,
            name: format!("{namespace}/{name}"),
        })?;
        if pod.terminating {
            return Ok(());
        }
        pod.terminating = true;
        let snapshot = pod.clone();
        let target = PodRef {
            namespace: namespace.to_string(),
            name: name.to_string(),
            uid: snapshot.uid,
        };
        self.emit(EventAction::Modified, ObjectSnapshot::Pod(snapshot));
        let at = self.now + self.config.latencies.pod_delete;
        self.push(at, Op::PodRemove(target));
        Ok(())
    }

    pub fn schedule_timer(&mut self, at: SimTime, target: u64, token: u64) {
        let at = at.max(self.now);
        self.push(at, Op::Timer { target, token });
    }

    pub fn schedule_delivery(&mut self, at: SimTime, event: ResourceEvent) {
        let at = at.max(self.now);
        self.push(at, Op::Deliver(Box::new(event)));
    }

    /// Events emitted since the last drain, in emission order.
    pub fn drain_outbox(&mut self) -> Vec<ResourceEvent> {
        std::mem::take(&mut self.outbox)
    }

    /// Moves the clock forward without processing anything. Never moves it
    /// past a queued item.
    pub fn advance_to(&mut self, t: SimTime) {
        let limit = self.next_time().map_or(t, |n| n.min(t));
        self.now = self.now.max(limit);
    }

    /// Processes the earliest queued item.
    pub fn pop(&mut self) -> Option<Fired> {
        let Reverse(item) = self.queue.pop()?;
        debug_assert!(item.at >= self.now);
        self.now = item.at;
        Some(match item.op {
            Op::Timer { target, token } => Fired::Timer { target, token },
            Op::Deliver(ev) => Fired::Deliver(ev),
            op => {
                self.apply(op);
                Fired::Applied
            }
        })
    }

    // ---- internals -----------------------------------------------------------

    fn push(&mut self, at: SimTime, op: Op) {
        let seq = self.seq;
        self.seq += 1;
        self.queue.push(Reverse(Scheduled { at, seq, op }));
    }

    fn request_pass(&mut self, at: SimTime) {
        if self.pass_times.insert(at) {
            self.push(at, Op::SchedulePass);
        }
    }

    fn emit(&mut self, action: EventAction, object: ObjectSnapshot) {
        let ev = ResourceEvent {
            at: self.now,
            seq: self.log.len() as u64,
            action,
            object,
        };
        self.log.push(ev.clone());
        self.outbox.push(ev);
    }

    /// Publishes a namespace whose pod or claim membership changed.
    fn touch_namespace(&mut self, name: &str) {
        if let Some(record) = self.namespaces.get(name) {
            let snapshot = record.clone();
            self.emit(EventAction::Modified, ObjectSnapshot::Namespace(snapshot));
        }
    }

    fn live_namespace(&self, name: &str) -> Result<&NamespaceRecord, SimError> {
        match self.namespaces.get(name) {
            None => Err(SimError::NamespaceNotFound(name.to_string())),
            Some(ns) if ns.terminating => Err(SimError::NamespaceTerminating(name.to_string())),
            Some(ns) => Ok(ns),
        }
    }

    fn apply(&mut self, op: Op) {
        match op {
            Op::NamespaceVisible(name) => {
                if let Some(record) = self.pending_namespaces.remove(&name) {
                    self.namespaces.insert(name, record.clone());
                    self.emit(EventAction::Added, ObjectSnapshot::Namespace(record));
                }
            }
            Op::NamespaceRemove(name) => self.remove_namespace(&name),
            Op::ClaimBind {
                namespace,
                name,
                created_at,
            } => {
                let key = (namespace, name);
                if let Some(claim) = self.claims.get_mut(&key) {
                    if claim.created_at == created_at && !claim.bound {
                        claim.bound = true;
                        let snapshot = claim.clone();
                        self.emit(EventAction::Modified, ObjectSnapshot::Claim(snapshot));
                        if self.has_unbound_pods() {
                            self.request_pass(self.now);
                        }
                    }
                }
            }
            Op::SchedulePass => {
                self.pass_times.remove(&self.now);
                self.schedule_pass();
            }
            Op::PodStart(target) => self.start_pod(&target),
            Op::PodFinish(target) => {
                let key = (target.namespace, target.name);
                let now = self.now;
                if let Some(pod) = self.pods.get_mut(&key) {
                    if pod.uid == target.uid && pod.phase == PodPhase::Running && !pod.terminating
                    {
                        pod.phase = PodPhase::Succeeded;
                        pod.finished_at = Some(now);
                        let snapshot = pod.clone();
                        self.emit(EventAction::Modified, ObjectSnapshot::Pod(snapshot));
                    }
                }
            }
            Op::PodRemove(target) => {
                let key = (target.namespace, target.name);
                if self.pods.get(&key).is_some_and(|p| p.uid == target.uid) {
                    self.remove_pod(&key);
                    self.touch_namespace(&key.0);
                    if self.has_unbound_pods() {
                        let at = self.now + self.config.latencies.pod_schedule;
                        self.request_pass(at);
                    }
                }
            }
            Op::Timer { .. } | Op::Deliver(_) => unreachable!("handled in pop"),
        }
    }

    fn has_unbound_pods(&self) -> bool {
        self.pods
            .values()
            .any(|p| p.phase == PodPhase::Pending && p.node.is_none() && !p.terminating)
    }

    fn schedule_pass(&mut self) {
        let ready_by = self.now;
        let pod_schedule = self.config.latencies.pod_schedule;
        let mut candidates: Vec<(SimTime, u64, (String, String))> = self
            .pods
            .iter()
            .filter(|(_, p)| {
                p.phase == PodPhase::Pending
                    && p.node.is_none()
                    && !p.terminating
                    && p.created_at + pod_schedule <= ready_by
                    && p.volume_claim.as_ref().is_none_or(|c| {
                        self.claim(&p.namespace, c).is_some_and(|c| c.bound)
                    })
            })
            .map(|(k, p)| (p.created_at, p.uid, k.clone()))
            .collect();
        candidates.sort();
        if self.config.scheduler_policy == SchedulerPolicy::Arbitrary {
            candidates.shuffle(&mut self.rng);
        }
        for (_, _, key) in candidates {
            let (cpu, mem) = {
                let p = &self.pods[&key];
                (p.request_cpu_milli, p.request_mem_mib)
            };
            let feasible: Vec<String> = self
                .nodes
                .values()
                .filter(|n| self.is_schedulable(n) && n.fits(cpu, mem))
                .map(|n| n.name.clone())
                .collect();
            if feasible.is_empty() {
                continue;
            }
            let chosen = match self.config.scheduler_policy {
                SchedulerPolicy::Arbitrary => feasible[self.rng.gen_range(0..feasible.len())].clone(),
                SchedulerPolicy::Spread => feasible
                    .iter()
                    .max_by(|a, b| {
                        let (na, nb) = (&self.nodes[*a], &self.nodes[*b]);
                        na.free_cpu_milli()
                            .cmp(&nb.free_cpu_milli())
                            .then_with(|| nb.name.cmp(&na.name))
                    })
                    .expect("non-empty")
                    .clone(),
            };
            self.bind(&key, &chosen);
        }
    }

    fn bind(&mut self, key: &(String, String), node_name: &str) {
        let pod = self.pods.get_mut(key).expect("candidate exists");
        pod.node = Some(node_name.to_string());
        let (cpu, mem, uid) = (pod.request_cpu_milli, pod.request_mem_mib, pod.uid);
        let node = self.nodes.get_mut(node_name).expect("feasible node exists");
        node.requested_cpu_milli += cpu;
        node.requested_mem_mib += mem;
        node.bound_pods.insert(format!("{}/{}", key.0, key.1));
        assert!(
            node.requested_cpu_milli <= node.allocatable_cpu_milli
                && node.requested_mem_mib <= node.allocatable_mem_mib,
            "node {node_name} overcommitted"
        );
        let snapshot = node.clone();
        self.emit(EventAction::Modified, ObjectSnapshot::Node(snapshot));
        let at = self.now + self.config.latencies.pod_create;
        self.push(
            at,
            Op::PodStart(PodRef {
                namespace: key.0.clone(),
                name: key.1.clone(),
                uid,
            }),
        );
    }

    fn start_pod(&mut self, target: &PodRef) {
        let key = (target.namespace.clone(), target.name.clone());
        let live = self.pods.get(&key).is_some_and(|p| {
            p.uid == target.uid && p.phase == PodPhase::Pending && !p.terminating
        });
        if !live {
            return;
        }
        let p = self.config.mount_failure_probability;
        let mount_failed = p > 0.0 && self.rng.gen::<f64>() < p;
        let now = self.now;
        let pod = self.pods.get_mut(&key).expect("checked live");
        if mount_failed {
            pod.phase = PodPhase::Failed;
            pod.reason = Some(FailureReason::MountFailure);
            pod.finished_at = Some(now);
        } else {
            pod.phase = PodPhase::Running;
            pod.started_at = Some(now);
        }
        let snapshot = pod.clone();
        let finish_at = now + snapshot.run_duration;
        let running = snapshot.phase == PodPhase::Running;
        self.emit(EventAction::Modified, ObjectSnapshot::Pod(snapshot));
        if running {
            self.push(finish_at, Op::PodFinish(target.clone()));
        }
    }

    fn remove_pod(&mut self, key: &(String, String)) {
        let mut pod = self.pods.remove(key).expect("pod exists");
        pod.deleted_at = Some(self.now);
        if let Some(node_name) = &pod.node {
            let node = self.nodes.get_mut(node_name).expect("bound node exists");
            node.requested_cpu_milli -= pod.request_cpu_milli;
            node.requested_mem_mib -= pod.request_mem_mib;
            node.bound_pods.remove(&format!("{}/{}", key.0, key.1));
            let snapshot = node.clone();
            self.emit(EventAction::Modified, ObjectSnapshot::Node(snapshot));
        }
        if let Some(ns) = self.namespaces.get_mut(&key.0) {
            ns.pods.remove(&key.1);
        }
        self.emit(EventAction::Deleted, ObjectSnapshot::Pod(pod));
    }

    fn remove_namespace(&mut self, name: &str) {
        let Some(record) = self.namespaces.get(name) else {
            return;
        };
        let pods: Vec<String> = record.pods.iter().cloned().collect();
        let claims: Vec<String> = record.claims.iter().cloned().collect();
        for pod in pods {
            self.remove_pod(&(name.to_string(), pod));
        }
        for claim in claims {
            if let Some(c) = self.claims.remove(&(name.to_string(), claim)) {
                self.emit(EventAction::Deleted, ObjectSnapshot::Claim(c));
            }
        }
        let mut record = self.namespaces.remove(name).expect("checked above");
        record.pods.clear();
        record.claims.clear();
        record.deleted_at = Some(self.now);
        self.emit(EventAction::Deleted, ObjectSnapshot::Namespace(record));
        if self.has_unbound_pods() {
            let at = self.now + self.config.latencies.pod_schedule;
            self.request_pass(at);
        }
    }
}
