//! Independent oracles shared by the integration and acceptance suites.
//! Nothing here calls back into the graph algorithms under test.
#![allow(dead_code)]

use std::collections::BTreeMap;

use kubeadaptor::sim::{EventAction, PodPhase, ResourceEvent};
use kubeadaptor::time::SimTime;
use kubeadaptor::workflow::{TaskSpec, WorkflowSpec};

/// Builds a DAG on `n` tasks where `i -> j` (i < j) exists when
/// `edge_bits[k]` is set for the k-th such pair. Durations cycle through
/// `durations` (seconds).
pub fn random_dag(name: &str, n: usize, edge_bits: &[bool], durations: &[u8]) -> WorkflowSpec {
    let id = |i: usize| format!("t{i:02}");
    let mut edges = Vec::new();
    let mut k = 0;
    for j in 0..n {
        for i in 0..j {
            if edge_bits.get(k).copied().unwrap_or(false) {
                edges.push((i, j));
            }
            k += 1;
        }
    }
    let tasks = (0..n).map(|i| TaskSpec {
        id: id(i),
        inputs: edges.iter().filter(|e| e.1 == i).map(|e| id(e.0)).collect(),
        outputs: edges.iter().filter(|e| e.0 == i).map(|e| id(e.1)).collect(),
        image: "task-emulator".into(),
        cpu_milli: 1200,
        mem_mib: 1200,
        args: vec![
            "-c".into(),
            "1".into(),
            "-t".into(),
            durations[i % durations.len().max(1)].max(1).to_string(),
        ],
    });
    WorkflowSpec::new(name, tasks).expect("generated DAG is valid")
}

/// Edge list straight from the task records.
pub fn edges(spec: &WorkflowSpec) -> Vec<(String, String)> {
    spec.tasks()
        .values()
        .flat_map(|t| t.inputs.iter().map(move |p| (p.clone(), t.id.clone())))
        .collect()
}

/// Longest path from an entry, by Bellman-Ford style relaxation.
pub fn longest_path_depth(spec: &WorkflowSpec) -> BTreeMap<String, usize> {
    let mut depth: BTreeMap<String, usize> = spec.tasks().keys().map(|k| (k.clone(), 0)).collect();
    let es = edges(spec);
    for _ in 0..spec.len() {
        let mut changed = false;
        for (a, b) in &es {
            if depth[b] < depth[a] + 1 {
                depth.insert(b.clone(), depth[a] + 1);
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    depth
}

pub fn max_width_oracle(spec: &WorkflowSpec) -> usize {
    let mut count: BTreeMap<usize, usize> = BTreeMap::new();
    for d in longest_path_depth(spec).values() {
        *count.entry(*d).or_default() += 1;
    }
    count.values().copied().max().unwrap_or(0)
}

/// Whether `order` lists every task once with parents before children.
pub fn is_linear_extension(spec: &WorkflowSpec, order: &[String]) -> bool {
    let pos: BTreeMap<&str, usize> = order.iter().enumerate().map(|(i, t)| (t.as_str(), i)).collect();
    pos.len() == spec.len()
        && order.len() == spec.len()
        && spec.tasks().keys().all(|k| pos.contains_key(k.as_str()))
        && edges(spec).iter().all(|(a, b)| pos[a.as_str()] < pos[b.as_str()])
}

/// One pod instance, from its events.
#[derive(Debug, Clone, Default)]
pub struct PodLife {
    pub uid: u64,
    pub task: String,
    pub created: Option<SimTime>,
    pub started: Option<(SimTime, u64)>,
    pub succeeded: Option<SimTime>,
    pub deleted: Option<SimTime>,
    pub final_phase: Option<PodPhase>,
}

/// Pod instances per namespace, keyed by uid.
pub fn pod_lives(events: &[ResourceEvent]) -> BTreeMap<String, BTreeMap<u64, PodLife>> {
    let mut out: BTreeMap<String, BTreeMap<u64, PodLife>> = BTreeMap::new();
    for e in events {
        let Some(p) = e.pod() else { continue };
        let life = out
            .entry(p.namespace.clone())
            .or_default()
            .entry(p.uid)
            .or_insert_with(|| PodLife {
                uid: p.uid,
                task: p.task_id.clone(),
                ..Default::default()
            });
        match e.action {
            EventAction::Added => life.created = Some(e.at),
            EventAction::Modified => match p.phase {
                PodPhase::Running if life.started.is_none() => life.started = Some((e.at, e.seq)),
                PodPhase::Succeeded if life.succeeded.is_none() => life.succeeded = Some(e.at),
                _ => {}
            },
            EventAction::Deleted => {
                life.deleted = Some(e.at);
                life.final_phase = Some(p.phase);
            }
        }
    }
    out
}

/// Counts broken edges in one namespace: the child's successful pod was
/// created no later than the parent's successful pod was deleted, or the
/// start sequence of successful pods is not a linear extension.
pub fn adaptor_violations(spec: &WorkflowSpec, lives: &BTreeMap<u64, PodLife>) -> usize {
    let ok: BTreeMap<&str, &PodLife> = lives
        .values()
        .filter(|l| l.final_phase == Some(PodPhase::Succeeded))
        .map(|l| (l.task.as_str(), l))
        .collect();
    if ok.len() != spec.len() {
        return usize::MAX;
    }
    let mut bad = 0;
    for (a, b) in edges(spec) {
        if ok[a.as_str()].deleted.unwrap() >= ok[b.as_str()].created.unwrap() {
            bad += 1;
        }
    }
    let mut starts: Vec<(SimTime, u64, String)> = ok
        .values()
        .map(|l| {
            let (t, s) = l.started.unwrap();
            (t, s, l.task.clone())
        })
        .collect();
    starts.sort();
    let order: Vec<String> = starts.into_iter().map(|s| s.2).collect();
    if !is_linear_extension(spec, &order) {
        bad += 1;
    }
    bad
}

/// Edges whose child started running before the parent finished.
pub fn raw_violations(spec: &WorkflowSpec, lives: &BTreeMap<u64, PodLife>) -> usize {
    let by_task: BTreeMap<&str, &PodLife> = lives.values().map(|l| (l.task.as_str(), l)).collect();
    edges(spec)
        .iter()
        .filter(|(a, b)| {
            let pa = by_task[a.as_str()];
            let pb = by_task[b.as_str()];
            match (pa.succeeded, pb.started) {
                (Some(done), Some((start, _))) => start < done,
                (None, Some(_)) => true,
                _ => false,
            }
        })
        .count()
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
