//! Frozen expectations checked against independent oracles.

mod common;

use std::collections::BTreeSet;

use kubeadaptor::baselines::{ArgoLikeConfig, ArgoLikeRunner};
use kubeadaptor::engine::{drive, EngineConfig, Feed, ListSource};
use kubeadaptor::informer::Simulation;
use kubeadaptor::injector::load_plan;
use kubeadaptor::metrics::{
    run_experiment, EngineKind, ExperimentParams, TransportKind, WorkflowChoice,
};
use kubeadaptor::sim::{PodRequest, ResourceKind, SimConfig};
use kubeadaptor::time::SimTime;
use kubeadaptor::workflow::{builtin_workflow, motivation_dag, parse_workflow, BuiltinWorkflow};

use common::*;

const LISTING1: &str = include_str!("../corpus/listing1.json");

fn set(ids: &[&str]) -> BTreeSet<String> {
    ids.iter().map(|s| s.to_string()).collect()
}

#[test]
fn listing1_head_task_fields() {
    let spec = parse_workflow(LISTING1).unwrap();
    let t = spec.task("0").unwrap();
    assert!(t.inputs.is_empty());
    assert_eq!(t.outputs, ["1", "2"]);
    assert_eq!((t.cpu_milli, t.mem_mib), (1200, 1200));
    assert_eq!(t.args, ["-c", "1", "-m", "100", "-t", "5"]);
    assert_eq!(t.emulated_duration(), SimTime::from_millis(10_000));
}

#[test]
fn listing1_ready_after_head() {
    let spec = parse_workflow(LISTING1).unwrap();
    let ready = spec.ready_tasks(&set(&["0"]), &BTreeSet::new()).unwrap();
    assert_eq!(ready, set(&["1", "2"]));
}

#[test]
fn nothing_ready_once_montage_is_done() {
    let spec = builtin_workflow(BuiltinWorkflow::Montage, None).unwrap();
    let all: BTreeSet<String> = spec.tasks().keys().cloned().collect();
    let ready = spec.ready_tasks(&all, &BTreeSet::new()).unwrap();
    // Brute force: no task outside the finished set exists.
    assert!(spec.tasks().keys().all(|k| all.contains(k)));
    assert!(ready.is_empty());
}

#[test]
fn motivation_levels_match_longest_path_oracle() {
    let spec = motivation_dag();
    let expect = vec![set(&["T1"]), set(&["T2", "T3"]), set(&["T4"]), set(&["T5"]), set(&["T6"])];
    assert_eq!(spec.level_partition(), expect);
    let depth = longest_path_depth(&spec);
    for (level, tasks) in expect.iter().enumerate() {
        for t in tasks {
            assert_eq!(depth[t], level);
        }
    }
}

#[test]
fn cybershake_is_the_widest_corpus_dag() {
    let width = |w| max_width_oracle(&builtin_workflow(w, None).unwrap());
    let cyber = width(BuiltinWorkflow::CyberShake);
    for w in BuiltinWorkflow::CORPUS {
        assert!(cyber >= width(w), "{w}");
        let spec = builtin_workflow(w, None).unwrap();
        assert_eq!(spec.max_level_width(), max_width_oracle(&spec));
    }
}

#[test]
fn corpus_tasks_request_1200_each() {
    for w in BuiltinWorkflow::CORPUS {
        for t in builtin_workflow(w, None).unwrap().tasks().values() {
            assert_eq!((t.cpu_milli, t.mem_mib), (1200, 1200), "{w}/{}", t.id);
        }
    }
}

#[test]
fn resync_mid_burst_is_bounded_by_burst_size() {
    let mut cfg = SimConfig::default();
    cfg.informer_delay = SimTime::from_millis(400);
    let mut sim = Simulation::new(cfg).unwrap();
    let id = sim.subscribe_fn(&[ResourceKind::Pod], |_, _| {});
    sim.with_ctx(id, |c| c.cluster.create_namespace("burst").map(|_| ())).unwrap();
    sim.run_until_quiescent(SimTime::from_millis(1_000_000)).unwrap();
    let n = 8;
    for i in 0..n {
        sim.with_ctx(id, |c| {
            c.cluster
                .create_pod(PodRequest {
                    namespace: "burst".into(),
                    name: format!("p{i}"),
                    task_id: format!("p{i}"),
                    cpu_milli: 1200,
                    mem_mib: 1200,
                    volume_claim: None,
                    run_duration: SimTime::from_millis(10_000),
                })
                .map(|_| ())
        })
        .unwrap();
    }
    let t = sim.now() + SimTime::from_millis(100);
    sim.run_until(t);
    let stale_pods = sim
        .cluster()
        .pods()
        .iter()
        .filter(|(k, p)| sim.store().pods.get(*k) != Some(*p))
        .count()
        + sim.store().pods.keys().filter(|k| !sim.cluster().pods().contains_key(*k)).count();
    let corrections = sim.resync();
    assert!(stale_pods >= 1 && stale_pods <= n, "{stale_pods}");
    // The namespace record lists its pods, so it can lag as one more entry.
    assert!(corrections <= n + 1, "{corrections}");
}

#[test]
fn plan_sizes() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/corpus/listing1.json");
    assert_eq!(load_plan(path, 1).unwrap().total(), 1);
    assert_eq!(load_plan(path, 100).unwrap().total(), 100);
}

#[test]
fn hundred_montage_runs_complete() {
    let mut p = ExperimentParams::new(
        EngineKind::Adaptor,
        WorkflowChoice::Builtin(BuiltinWorkflow::Montage, None),
        100,
    );
    p.config.injector.transport = TransportKind::Channel;
    let r = run_experiment(&p).unwrap();
    assert_eq!(r.summary.completed_runs, 100);
    assert_eq!(r.delivered, Some(100));
    // Every sample sees the full worker allocatable.
    assert!(r
        .samples
        .iter()
        .all(|s| (s.allocatable_cpu_milli, s.allocatable_mem_mib) == (48000, 91872)));
}

#[test]
fn ligo_argo_task_time_near_seventeen_seconds() {
    let spec = builtin_workflow(BuiltinWorkflow::Ligo, None).unwrap();
    let feed = Feed::new(Box::new(ListSource::repeat(&spec, 5)));
    let runner = ArgoLikeRunner::new(ArgoLikeConfig::default(), EngineConfig::default(), feed);
    let (o, _) = drive(SimConfig::default(), runner, SimTime::from_millis(100_000_000)).unwrap();
    let times: Vec<f64> = pod_lives(&o.events)
        .values()
        .flat_map(|m| m.values())
        .map(|l| (l.deleted.unwrap() - l.created.unwrap()).as_secs_f64())
        .collect();
    let expect = 12.84 / (1.0 - 0.2465);
    let m = mean(&times);
    assert!((m - expect).abs() / expect <= 0.10, "mean {m:.3} vs {expect:.3}");
}

#[test]
fn usage_rate_recomputed_from_raw_samples() {
    let p = ExperimentParams::new(
        EngineKind::Adaptor,
        WorkflowChoice::Builtin(BuiltinWorkflow::CyberShake, None),
        1,
    );
    let r = run_experiment(&p).unwrap();
    let run = &r.runs[0];
    let (from, to) = (run.created_at, run.deleted_at.unwrap());
    let window: Vec<_> = r.samples.iter().filter(|s| s.t >= from && s.t <= to).collect();
    let cpu = window.iter().map(|s| s.used_cpu_milli as f64 / s.allocatable_cpu_milli as f64).sum::<f64>()
        / window.len() as f64;
    let mem = window.iter().map(|s| s.used_mem_mib as f64 / s.allocatable_mem_mib as f64).sum::<f64>()
        / window.len() as f64;
    let (rc, rm) = run.usage_rate();
    assert!((rc - cpu).abs() < 1e-12 && (rm - mem).abs() < 1e-12);
    // Peak CPU is the widest level's worth of task pods.
    let width = max_width_oracle(&r.workflow) as u64;
    assert_eq!(r.summary.peak_used_cpu_milli, width * 1200);
}

#[test]
fn usage_rate_ordering_across_engines() {
    for w in BuiltinWorkflow::CORPUS {
        let rate = |e| {
            let r = run_experiment(&ExperimentParams::new(e, WorkflowChoice::Builtin(w, None), 1)).unwrap();
            (r.summary.cpu_usage_rate, r.summary.mem_usage_rate)
        };
        let (a, b, g) = (rate(EngineKind::Adaptor), rate(EngineKind::BatchJob), rate(EngineKind::Argo));
        assert!(a.0 >= b.0 && b.0 >= g.0, "{w} cpu {a:?} {b:?} {g:?}");
        assert!(a.1 >= b.1 && b.1 >= g.1, "{w} mem {a:?} {b:?} {g:?}");
    }
}

/// A chain of n tasks under the adaptor, assembled from the latency table:
/// every call waits one API overhead, a pod lives schedule + create + run +
/// API + delete, and the namespace is gone one delete latency after its
/// request.
#[test]
fn pipeline_lifecycle_decomposes_into_latencies() {
    let l = SimConfig::default().latencies;
    let s = |t: SimTime| t.as_secs_f64();
    let api = s(l.api_call_overhead);
    for n in 3..=7 {
        let spec = builtin_workflow(BuiltinWorkflow::Pipeline, Some(n)).unwrap();
        let run = s(spec.tasks().values().next().unwrap().emulated_duration());
        let pod = s(l.pod_schedule) + s(l.pod_create) + run + api + s(l.pod_delete);
        let setup = s(l.namespace_create) + api + s(l.claim_create_and_bind) + api;
        let expect = setup + n as f64 * pod + (n - 1) as f64 * api + api + s(l.namespace_delete);
        let r = run_experiment(&ExperimentParams::new(
            EngineKind::Adaptor,
            WorkflowChoice::Builtin(BuiltinWorkflow::Pipeline, Some(n)),
            1,
        ))
        .unwrap();
        let got = s(r.runs[0].lifecycle().unwrap());
        assert!((got - expect).abs() < 1e-9, "n={n}: {got} vs {expect}");
        assert!((r.summary.task_time.mean - pod).abs() < 1e-9);
    }
}
