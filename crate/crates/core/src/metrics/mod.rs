//! Per-run timings and resource samples, derived from the authoritative
//! event log so that every controller is measured the same way.

mod experiment;

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use thiserror::Error;

pub use experiment::{
    run_experiment, EngineKind, ExperimentConfig, ExperimentParams, ExperimentResult,
    InjectorSettings, MetricsSettings, TransportKind, WorkflowChoice,
};

use crate::sim::{EventAction, ObjectSnapshot, PodPhase, ResourceEvent, SimConfig};
use crate::time::SimTime;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no runs to aggregate")]
    EmptyInput,
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ResourceSample {
    pub t: SimTime,
    pub used_cpu_milli: u64,
    pub used_mem_mib: u64,
    pub allocatable_cpu_milli: u64,
    pub allocatable_mem_mib: u64,
}

/// One pod's life. A task retried after a failure has several.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskTiming {
    pub task_id: String,
    pub pod: String,
    pub node: Option<String>,
    pub phase: PodPhase,
    pub created_at: SimTime,
    pub started_at: Option<SimTime>,
    pub finished_at: Option<SimTime>,
    pub deleted_at: Option<SimTime>,
}

impl TaskTiming {
    /// Creation to deletion.
    pub fn execution_time(&self) -> Option<SimTime> {
        self.deleted_at.map(|d| d - self.created_at)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub namespace: String,
    pub created_at: SimTime,
    pub deleted_at: Option<SimTime>,
    /// Every pod that lived in the namespace, in creation order.
    pub pods: Vec<TaskTiming>,
    pub retries: u64,
    /// Samples inside `[created_at, deleted_at]`.
    pub samples: Vec<ResourceSample>,
}

impl RunMetrics {
    pub fn lifecycle(&self) -> Option<SimTime> {
        self.deleted_at.map(|d| d - self.created_at)
    }

    /// Pods that succeeded, one per task.
    pub fn successful(&self) -> impl Iterator<Item = &TaskTiming> {
        self.pods.iter().filter(|p| p.phase == PodPhase::Succeeded)
    }

    pub fn mean_task_time(&self) -> Option<f64> {
        mean(self.successful().filter_map(|p| p.execution_time()).map(|t| t.as_secs_f64()))
    }

    pub fn usage_rate(&self) -> (f64, f64) {
        usage_rate(&self.samples)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean used over allocatable, for CPU and memory.
pub fn usage_rate(samples: &[ResourceSample]) -> (f64, f64) {
    if samples.is_empty() {
        return (0.0, 0.0);
    }
    let n = samples.len() as f64;
    let cpu = samples.iter().map(|s| s.used_cpu_milli as f64 / s.allocatable_cpu_milli as f64).sum::<f64>();
    let mem = samples.iter().map(|s| s.used_mem_mib as f64 / s.allocatable_mem_mib as f64).sum::<f64>();
    (cpu / n, mem / n)
}

/// Samples at `0, period, 2·period, …` up to `end`, each reflecting every
/// event at or before its instant. Used = Σ requests bound to schedulable
/// nodes.
pub fn sample_resources(
    events: &[ResourceEvent],
    config: &SimConfig,
    period: SimTime,
    end: SimTime,
) -> Vec<ResourceSample> {
    assert!(period > SimTime::ZERO, "sampling period must be positive");
    let (alloc_cpu, alloc_mem) = config.schedulable_capacity();
    let counted: BTreeMap<&str, bool> = config
        .nodes
        .iter()
        .map(|n| (n.name.as_str(), !(n.is_master && config.exclude_master)))
        .collect();
    let mut per_node: BTreeMap<String, (u64, u64)> = BTreeMap::new();
    let mut out = Vec::new();
    let mut i = 0;
    let mut t = SimTime::ZERO;
    loop {
        while i < events.len() && events[i].at <= t {
            if let ObjectSnapshot::Node(n) = &events[i].object {
                if counted.get(n.name.as_str()).copied().unwrap_or(false) {
                    per_node.insert(n.name.clone(), (n.requested_cpu_milli, n.requested_mem_mib));
                }
            }
            i += 1;
        }
        let (cpu, mem) = per_node.values().fold((0, 0), |(c, m), (nc, nm)| (c + nc, m + nm));
        out.push(ResourceSample {
            t,
            used_cpu_milli: cpu,
            used_mem_mib: mem,
            allocatable_cpu_milli: alloc_cpu,
            allocatable_mem_mib: alloc_mem,
        });
        if t >= end {
            break;
        }
        t += period;
    }
    out
}

/// Splits the event log into one record per workflow namespace, in order of
/// namespace creation.
pub fn collect_runs(events: &[ResourceEvent], samples: &[ResourceSample]) -> Vec<RunMetrics> {
    let mut runs: Vec<RunMetrics> = Vec::new();
    let mut index: BTreeMap<String, usize> = BTreeMap::new();
    let mut pod_index: BTreeMap<u64, (usize, usize)> = BTreeMap::new();
    for ev in events {
        match &ev.object {
            ObjectSnapshot::Namespace(ns) => {
                let idx = *index.entry(ns.name.clone()).or_insert_with(|| {
                    runs.push(RunMetrics {
                        namespace: ns.name.clone(),
                        created_at: ns.created_at,
                        deleted_at: None,
                        pods: Vec::new(),
                        retries: 0,
                        samples: Vec::new(),
                    });
                    runs.len() - 1
                });
                if ev.action == EventAction::Deleted {
                    runs[idx].deleted_at = Some(ev.at);
                }
            }
            ObjectSnapshot::Pod(p) => {
                let Some(&run) = index.get(&p.namespace) else {
                    continue;
                };
                if ev.action == EventAction::Added {
                    runs[run].pods.push(TaskTiming {
                        task_id: p.task_id.clone(),
                        pod: p.name.clone(),
                        node: None,
                        phase: p.phase,
                        created_at: p.created_at,
                        started_at: None,
                        finished_at: None,
                        deleted_at: None,
                    });
                    pod_index.insert(p.uid, (run, runs[run].pods.len() - 1));
                }
                let Some(&(r, k)) = pod_index.get(&p.uid) else {
                    continue;
                };
                let timing = &mut runs[r].pods[k];
                if p.phase == PodPhase::Failed && timing.phase != PodPhase::Failed {
                    runs[r].retries += 1;
                }
                let timing = &mut runs[r].pods[k];
                timing.phase = p.phase;
                timing.node = p.node.clone().or(timing.node.take());
                timing.started_at = p.started_at;
                timing.finished_at = p.finished_at;
                if ev.action == EventAction::Deleted {
                    timing.deleted_at = Some(ev.at);
                }
            }
            _ => {}
        }
    }
    for run in &mut runs {
        let end = run.deleted_at.unwrap_or(SimTime::from_millis(u64::MAX));
        run.samples = samples
            .iter()
            .filter(|s| s.t >= run.created_at && s.t <= end)
            .copied()
            .collect();
    }
    runs
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Self> {
        let mean = mean(values.iter().copied())?;
        Some(Spread {
            mean,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub runs: usize,
    pub completed_runs: usize,
    pub task_time: Spread,
    pub lifecycle: Spread,
    pub retries: u64,
    /// Over the first run's lifecycle.
    pub cpu_usage_rate: f64,
    pub mem_usage_rate: f64,
    pub peak_used_cpu_milli: u64,
    pub peak_used_mem_mib: u64,
}

pub fn aggregate(runs: &[RunMetrics]) -> Result<Summary, MetricsError> {
    let first = runs.first().ok_or(MetricsError::EmptyInput)?;
    let task_times: Vec<f64> = runs
        .iter()
        .flat_map(|r| r.successful().filter_map(|p| p.execution_time()))
        .map(|t| t.as_secs_f64())
        .collect();
    let lifecycles: Vec<f64> = runs
        .iter()
        .filter_map(|r| r.lifecycle())
        .map(|t| t.as_secs_f64())
        .collect();
    let nan = Spread {
        mean: f64::NAN,
        min: f64::NAN,
        max: f64::NAN,
    };
    let (cpu_usage_rate, mem_usage_rate) = first.usage_rate();
    let all = runs.iter().flat_map(|r| &r.samples);
    Ok(Summary {
        runs: runs.len(),
        completed_runs: lifecycles.len(),
        task_time: Spread::of(&task_times).unwrap_or(nan),
        lifecycle: Spread::of(&lifecycles).unwrap_or(nan),
        retries: runs.iter().map(|r| r.retries).sum(),
        cpu_usage_rate,
        mem_usage_rate,
        peak_used_cpu_milli: all.clone().map(|s| s.used_cpu_milli).max().unwrap_or(0),
        peak_used_mem_mib: all.map(|s| s.used_mem_mib).max().unwrap_or(0),
    })
}

fn secs(t: SimTime) -> String {
    format!("{:.3}", t.as_secs_f64())
}

fn opt_secs(t: Option<SimTime>) -> String {
    t.map(secs).unwrap_or_default()
}

pub const SAMPLES_HEADER: [&str; 5] = [
    "t",
    "used_cpu_milli",
    "used_mem_mib",
    "allocatable_cpu_milli",
    "allocatable_mem_mib",
];

pub const TASKS_HEADER: [&str; 10] = [
    "run",
    "namespace",
    "task",
    "pod",
    "node",
    "phase",
    "created_at",
    "started_at",
    "finished_at",
    "deleted_at",
];

pub const SUMMARY_HEADER: [&str; 9] = [
    "run",
    "engine",
    "workflow",
    "namespace",
    "created_at",
    "deleted_at",
    "lifecycle",
    "mean_task_time",
    "retries",
];

pub fn write_samples_csv<W: Write>(samples: &[ResourceSample], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SAMPLES_HEADER)?;
    for s in samples {
        w.write_record([
            secs(s.t),
            s.used_cpu_milli.to_string(),
            s.used_mem_mib.to_string(),
            s.allocatable_cpu_milli.to_string(),
            s.allocatable_mem_mib.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_tasks_csv<W: Write>(runs: &[RunMetrics], out: W) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TASKS_HEADER)?;
    for (i, run) in runs.iter().enumerate() {
        for p in &run.pods {
            w.write_record([
                (i + 1).to_string(),
                run.namespace.clone(),
                p.task_id.clone(),
                p.pod.clone(),
                p.node.clone().unwrap_or_default(),
                p.phase.to_string(),
                secs(p.created_at),
                opt_secs(p.started_at),
                opt_secs(p.finished_at),
                opt_secs(p.deleted_at),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary_csv<W: Write>(
    engine: &str,
    workflow: &str,
    runs: &[RunMetrics],
    out: W,
) -> Result<(), MetricsError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for (i, run) in runs.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            engine.to_string(),
            workflow.to_string(),
            run.namespace.clone(),
            secs(run.created_at),
            opt_secs(run.deleted_at),
            opt_secs(run.lifecycle()),
            run.mean_task_time().map(|m| format!("{m:.3}")).unwrap_or_default(),
            run.retries.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Cluster, PodRequest};

    fn s(v: f64) -> SimTime {
        SimTime::from_secs_f64(v)
    }

    #[test]
    fn idle_cluster_samples_zero() {
        let cfg = SimConfig::default();
        let samples = sample_resources(&[], &cfg, s(0.5), s(3.0));
        assert_eq!(samples.len(), 7);
        for x in &samples {
            assert_eq!((x.used_cpu_milli, x.used_mem_mib), (0, 0));
            assert_eq!((x.allocatable_cpu_milli, x.allocatable_mem_mib), (48_000, 91_872));
        }
        assert_eq!(samples[1].t - samples[0].t, s(0.5));
    }

    #[test]
    fn aggregate_rejects_empty() {
        assert!(matches!(aggregate(&[]), Err(MetricsError::EmptyInput)));
    }

    #[test]
    fn single_pod_run_metrics() {
        let cfg = SimConfig::default();
        let mut c = Cluster::new(cfg.clone()).unwrap();
        c.create_namespace("one").unwrap();
        while c.pop().is_some() {}
        c.create_pod(PodRequest {
            namespace: "one".into(),
            name: "task-0".into(),
            task_id: "0".into(),
            cpu_milli: 1200,
            mem_mib: 1200,
            volume_claim: None,
            run_duration: s(10.0),
        })
        .unwrap();
        while c.pop().is_some() {}
        c.delete_pod("one", "task-0").unwrap();
        while c.pop().is_some() {}
        c.delete_namespace("one").unwrap();
        while c.pop().is_some() {}
        let samples = sample_resources(c.log(), &cfg, s(0.5), c.now());
        let runs = collect_runs(c.log(), &samples);
        assert_eq!(runs.len(), 1);
        let pod = &runs[0].pods[0];
        let summary = aggregate(&runs).unwrap();
        let expected = (pod.deleted_at.unwrap() - pod.created_at).as_secs_f64();
        assert_eq!(summary.task_time.mean, expected);
        assert_eq!(summary.peak_used_cpu_milli, 1200);
        assert_eq!(runs[0].lifecycle(), Some(c.now() - s(0.0)));
        let mut buf = Vec::new();
        write_summary_csv("adaptor", "one", &runs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("run,engine,workflow,namespace,created_at"));
        assert_eq!(text.lines().count(), 2);
    }
}
