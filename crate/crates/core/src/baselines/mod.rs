//! Comparison submitters over the same simulated cluster.
//!
//! Both are overhead models, not reimplementations: the batch-job runner
//! stands in for a script driving `kubectl` level by level, the argo-like
//! runner for a reconciling workflow controller.

mod argo;
mod batch;

use serde::{Deserialize, Serialize};

pub use argo::ArgoLikeRunner;
pub use batch::BatchJobRunner;

use crate::engine::{TraceAction, TraceRecord};
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BatchJobConfig {
    /// Spacing of the absolute grid on which the script checks pod status.
    pub poll_interval: SimTime,
    /// Cost of one command; commands run one after another.
    pub per_command_overhead: SimTime,
}

impl Default for BatchJobConfig {
    fn default() -> Self {
        BatchJobConfig {
            poll_interval: SimTime::from_millis(2000),
            per_command_overhead: SimTime::from_millis(800),
        }
    }
}

/// Calibrated so that the four corpus workflows land near the measured
/// lifecycles of the real controller. `reconcile_interval = 0` reconciles on
/// every event instead of on ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArgoLikeConfig {
    pub reconcile_interval: SimTime,
    /// Serialized controller work paid before each pod creation.
    pub per_task_controller_overhead: SimTime,
    /// Wait between noticing a finished pod and deleting it.
    pub pod_gc_delay: SimTime,
    /// Only start tasks no deeper than the shallowest unfinished task.
    pub depth_gated: bool,
}

impl Default for ArgoLikeConfig {
    fn default() -> Self {
        ArgoLikeConfig {
            reconcile_interval: SimTime::from_millis(1000),
            per_task_controller_overhead: SimTime::from_millis(2500),
            pod_gc_delay: SimTime::from_millis(3500),
            depth_gated: true,
        }
    }
}

impl ArgoLikeConfig {
    pub fn zero_overhead() -> Self {
        ArgoLikeConfig {
            reconcile_interval: SimTime::ZERO,
            per_task_controller_overhead: SimTime::ZERO,
            pod_gc_delay: SimTime::ZERO,
            depth_gated: false,
        }
    }
}

fn record(trace: &mut Vec<TraceRecord>, time: SimTime, action: TraceAction, task: Option<&str>, ns: &str) {
    trace.push(TraceRecord {
        time,
        action,
        task: task.map(str::to_string),
        namespace: ns.to_string(),
    });
}
