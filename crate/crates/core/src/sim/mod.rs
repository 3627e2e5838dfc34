//! Deterministic virtual-time model of a Kubernetes-like cluster.

mod cluster;
mod config;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use cluster::{Cluster, Fired, PodRequest};
pub use config::{Latencies, NodeSpec, SchedulerPolicy, SimConfig};

use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SimError {
    #[error("{kind} {name:?} already exists")]
    AlreadyExists { kind: ResourceKind, name: String },
    #[error("{kind} {name:?} not found")]
    NotFound { kind: ResourceKind, name: String },
    #[error("namespace {0:?} not found")]
    NamespaceNotFound(String),
    #[error("namespace {0:?} is terminating")]
    NamespaceTerminating(String),
    #[error("claim {claim:?} not found in namespace {namespace:?}")]
    ClaimNotFound { namespace: String, claim: String },
    #[error("pod {name:?} already exists in namespace {namespace:?}")]
    DuplicatePodName { namespace: String, name: String },
    #[error("pod request must be positive and equal to its limit")]
    InvalidRequest,
    #[error("work remains at virtual time {now} past deadline {deadline}")]
    DeadlineExceeded { now: SimTime, deadline: SimTime },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PodPhase {
    Pending,
    Running,
    Succeeded,
    Failed,
}

impl PodPhase {
    pub fn is_terminal(self) -> bool {
        matches!(self, PodPhase::Succeeded | PodPhase::Failed)
    }

    /// Allowed forward transitions. A pod whose volume mount fails never
    /// runs, so `Pending -> Failed` is permitted.
    pub fn can_transition_to(self, next: PodPhase) -> bool {
        matches!(
            (self, next),
            (PodPhase::Pending, PodPhase::Running)
                | (PodPhase::Pending, PodPhase::Failed)
                | (PodPhase::Running, PodPhase::Succeeded)
                | (PodPhase::Running, PodPhase::Failed)
        )
    }
}

impl fmt::Display for PodPhase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureReason {
    MountFailure,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeState {
    pub name: String,
    pub is_master: bool,
    pub allocatable_cpu_milli: u64,
    pub allocatable_mem_mib: u64,
    /// `namespace/name` of every pod bound here.
    pub bound_pods: BTreeSet<String>,
    pub requested_cpu_milli: u64,
    pub requested_mem_mib: u64,
}

impl NodeState {
    pub fn free_cpu_milli(&self) -> u64 {
        self.allocatable_cpu_milli - self.requested_cpu_milli
    }

    pub fn free_mem_mib(&self) -> u64 {
        self.allocatable_mem_mib - self.requested_mem_mib
    }

    pub fn fits(&self, cpu_milli: u64, mem_mib: u64) -> bool {
        self.free_cpu_milli() >= cpu_milli && self.free_mem_mib() >= mem_mib
    }
}

/// A simulated pod. Limits always equal requests.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PodRecord {
    pub name: String,
    pub namespace: String,
    pub uid: u64,
    pub task_id: String,
    pub request_cpu_milli: u64,
    pub request_mem_mib: u64,
    pub volume_claim: Option<String>,
    pub phase: PodPhase,
    pub reason: Option<FailureReason>,
    pub node: Option<String>,
    pub terminating: bool,
    pub created_at: SimTime,
    pub started_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
    pub deleted_at: Option<SimTime>,
    pub run_duration: SimTime,
}

impl PodRecord {
    pub fn limit_cpu_milli(&self) -> u64 {
        self.request_cpu_milli
    }

    pub fn limit_mem_mib(&self) -> u64 {
        self.request_mem_mib
    }

    pub fn key(&self) -> (String, String) {
        (self.namespace.clone(), self.name.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NamespaceRecord {
    pub name: String,
    pub claims: BTreeSet<String>,
    pub pods: BTreeSet<String>,
    pub terminating: bool,
    /// When the create request reached the apiserver.
    pub created_at: SimTime,
    pub deleted_at: Option<SimTime>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeClaim {
    pub name: String,
    pub namespace: String,
    pub storage_class: String,
    pub capacity_mib: u64,
    pub bound: bool,
    pub created_at: SimTime,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ResourceKind {
    Pod,
    Node,
    Namespace,
    Claim,
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EventAction {
    Added,
    Modified,
    Deleted,
}

impl fmt::Display for EventAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "object")]
pub enum ObjectSnapshot {
    Pod(PodRecord),
    Node(NodeState),
    Namespace(NamespaceRecord),
    Claim(VolumeClaim),
}

impl ObjectSnapshot {
    pub fn kind(&self) -> ResourceKind {
        match self {
            ObjectSnapshot::Pod(_) => ResourceKind::Pod,
            ObjectSnapshot::Node(_) => ResourceKind::Node,
            ObjectSnapshot::Namespace(_) => ResourceKind::Namespace,
            ObjectSnapshot::Claim(_) => ResourceKind::Claim,
        }
    }

    pub fn name(&self) -> &str {
        match self {
            ObjectSnapshot::Pod(p) => &p.name,
            ObjectSnapshot::Node(n) => &n.name,
            ObjectSnapshot::Namespace(n) => &n.name,
            ObjectSnapshot::Claim(c) => &c.name,
        }
    }

    /// Empty for cluster-scoped objects.
    pub fn namespace(&self) -> &str {
        match self {
            ObjectSnapshot::Pod(p) => &p.namespace,
            ObjectSnapshot::Claim(c) => &c.namespace,
            ObjectSnapshot::Node(_) | ObjectSnapshot::Namespace(_) => "",
        }
    }
}

/// A change notification, emitted in nondecreasing virtual time.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceEvent {
    pub at: SimTime,
    pub seq: u64,
    pub action: EventAction,
    #[serde(flatten)]
    pub object: ObjectSnapshot,
}

impl ResourceEvent {
    pub fn kind(&self) -> ResourceKind {
        self.object.kind()
    }

    pub fn pod(&self) -> Option<&PodRecord> {
        match &self.object {
            ObjectSnapshot::Pod(p) => Some(p),
            _ => None,
        }
    }

    pub fn namespace_record(&self) -> Option<&NamespaceRecord> {
        match &self.object {
            ObjectSnapshot::Namespace(n) => Some(n),
            _ => None,
        }
    }

    pub fn claim(&self) -> Option<&VolumeClaim> {
        match &self.object {
            ObjectSnapshot::Claim(c) => Some(c),
            _ => None,
        }
    }

    /// `time,kind,action,name,namespace,node,phase` row values.
    pub fn csv_fields(&self) -> [String; 7] {
        let (node, phase) = match &self.object {
            ObjectSnapshot::Pod(p) => (
                p.node.clone().unwrap_or_default(),
                p.phase.to_string(),
            ),
            _ => (String::new(), String::new()),
        };
        [
            self.at.to_string(),
            self.kind().to_string(),
            self.action.to_string(),
            self.object.name().to_string(),
            self.object.namespace().to_string(),
            node,
            phase,
        ]
    }
}

/// Header for [`write_event_csv`].
pub const EVENT_CSV_HEADER: [&str; 7] = ["time", "kind", "action", "name", "namespace", "node", "phase"];

pub fn write_event_csv<W: std::io::Write>(events: &[ResourceEvent], out: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(EVENT_CSV_HEADER)?;
    for ev in events {
        w.write_record(ev.csv_fields())?;
    }
    w.flush()?;
    Ok(())
}
