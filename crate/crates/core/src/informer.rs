//! List-watch cache over the simulated cluster and the event-dispatch loop
//! that drives controllers.

use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::rc::Rc;

use thiserror::Error;

use crate::sim::{
    Cluster, Fired, NamespaceRecord, NodeState, ObjectSnapshot, PodRecord, ResourceEvent,
    ResourceKind, SimConfig, SimError, VolumeClaim,
};
use crate::sim::EventAction;
use crate::time::SimTime;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InformerError {
    #[error("informer cache has not completed its initial list")]
    NotSynced,
}

type Key = (String, String);

/// Local copy of cluster objects, keyed by `(namespace, name)`.
/// Cluster-scoped objects use an empty namespace.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CacheStore {
    pub pods: BTreeMap<Key, PodRecord>,
    pub nodes: BTreeMap<Key, NodeState>,
    pub namespaces: BTreeMap<Key, NamespaceRecord>,
    pub claims: BTreeMap<Key, VolumeClaim>,
    pub last_sync: Option<SimTime>,
}

impl CacheStore {
    fn list_from(cluster: &Cluster) -> Self {
        let k = |ns: &str, n: &str| (ns.to_string(), n.to_string());
        CacheStore {
            pods: cluster
                .pods()
                .values()
                .map(|p| (k(&p.namespace, &p.name), p.clone()))
                .collect(),
            nodes: cluster
                .nodes()
                .values()
                .map(|n| (k("", &n.name), n.clone()))
                .collect(),
            namespaces: cluster
                .namespaces()
                .values()
                .map(|n| (k("", &n.name), n.clone()))
                .collect(),
            claims: cluster
                .claims()
                .values()
                .map(|c| (k(&c.namespace, &c.name), c.clone()))
                .collect(),
            last_sync: Some(cluster.now()),
        }
    }

    fn apply(&mut self, ev: &ResourceEvent) {
        let key = (ev.object.namespace().to_string(), ev.object.name().to_string());
        let deleted = ev.action == EventAction::Deleted;
        match &ev.object {
            ObjectSnapshot::Pod(p) => upsert(&mut self.pods, key, p, deleted),
            ObjectSnapshot::Node(n) => upsert(&mut self.nodes, key, n, deleted),
            ObjectSnapshot::Namespace(n) => upsert(&mut self.namespaces, key, n, deleted),
            ObjectSnapshot::Claim(c) => upsert(&mut self.claims, key, c, deleted),
        }
    }

    /// Entries that differ from `other`, counted per key.
    fn diff_count(&self, other: &CacheStore) -> usize {
        diff(&self.pods, &other.pods)
            + diff(&self.nodes, &other.nodes)
            + diff(&self.namespaces, &other.namespaces)
            + diff(&self.claims, &other.claims)
    }

    fn synced(&self) -> Result<(), InformerError> {
        self.last_sync.map(|_| ()).ok_or(InformerError::NotSynced)
    }

    /// Pods sorted by name, optionally restricted to one namespace.
    pub fn list_pods(&self, namespace: Option<&str>) -> Result<Vec<&PodRecord>, InformerError> {
        self.synced()?;
        let mut pods: Vec<&PodRecord> = self
            .pods
            .values()
            .filter(|p| namespace.is_none_or(|ns| p.namespace == ns))
            .collect();
        pods.sort_by(|a, b| (&a.name, &a.namespace).cmp(&(&b.name, &b.namespace)));
        Ok(pods)
    }

    pub fn list_nodes(&self) -> Result<Vec<&NodeState>, InformerError> {
        self.synced()?;
        Ok(self.nodes.values().collect())
    }

    pub fn list_namespaces(&self) -> Result<Vec<&NamespaceRecord>, InformerError> {
        self.synced()?;
        Ok(self.namespaces.values().collect())
    }

    pub fn get_pod(&self, namespace: &str, name: &str) -> Option<&PodRecord> {
        self.pods.get(&(namespace.to_string(), name.to_string()))
    }

    pub fn get_namespace(&self, name: &str) -> Option<&NamespaceRecord> {
        self.namespaces.get(&(String::new(), name.to_string()))
    }

    pub fn get_claim(&self, namespace: &str, name: &str) -> Option<&VolumeClaim> {
        self.claims.get(&(namespace.to_string(), name.to_string()))
    }
}

fn upsert<T: Clone>(map: &mut BTreeMap<Key, T>, key: Key, value: &T, deleted: bool) {
    if deleted {
        map.remove(&key);
    } else {
        map.insert(key, value.clone());
    }
}

fn diff<T: PartialEq>(a: &BTreeMap<Key, T>, b: &BTreeMap<Key, T>) -> usize {
    let keys: BTreeSet<&Key> = a.keys().chain(b.keys()).collect();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).count()
}

/// Handle returned by [`Simulation::subscribe`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SubscriptionId(pub u64);

/// What a callback may touch while it runs.
pub struct Ctx<'a> {
    pub now: SimTime,
    pub cluster: &'a mut Cluster,
    pub store: &'a CacheStore,
    pub me: SubscriptionId,
}

impl Ctx<'_> {
    /// Wakes this subscriber's `on_timer` at `at` with `token`.
    pub fn schedule_timer(&mut self, at: SimTime, token: u64) {
        self.cluster.schedule_timer(at, self.me.0, token);
    }
}

pub trait EventHandler {
    fn on_event(&mut self, event: &ResourceEvent, ctx: &mut Ctx<'_>);

    fn on_timer(&mut self, _token: u64, _ctx: &mut Ctx<'_>) {}
}

struct FnHandler<F>(F);

impl<F: FnMut(&ResourceEvent, &mut Ctx<'_>)> EventHandler for FnHandler<F> {
    fn on_event(&mut self, event: &ResourceEvent, ctx: &mut Ctx<'_>) {
        (self.0)(event, ctx)
    }
}

struct Subscription {
    id: SubscriptionId,
    kinds: BTreeSet<ResourceKind>,
    handler: Rc<RefCell<dyn EventHandler>>,
}

/// A cluster, its informer cache and the registered callbacks.
///
/// Events emitted by the cluster are applied to the store and then handed to
/// matching subscribers, inline or after the configured informer delay.
pub struct Simulation {
    cluster: Cluster,
    store: CacheStore,
    subs: Vec<Subscription>,
    next_sub: u64,
    delay: SimTime,
}

impl Simulation {
    /// Builds the cluster and performs the informer's initial list.
    pub fn new(config: SimConfig) -> Result<Self, SimError> {
        let delay = config.informer_delay;
        let cluster = Cluster::new(config)?;
        let store = CacheStore::list_from(&cluster);
        Ok(Simulation {
            cluster,
            store,
            subs: Vec::new(),
            next_sub: 1,
            delay,
        })
    }

    /// A simulation whose informer has not listed yet; every lister returns
    /// [`InformerError::NotSynced`] until [`Simulation::initial_list`].
    pub fn new_unsynced(config: SimConfig) -> Result<Self, SimError> {
        let mut sim = Self::new(config)?;
        sim.store = CacheStore::default();
        Ok(sim)
    }

    pub fn initial_list(&mut self) {
        self.store = CacheStore::list_from(&self.cluster);
    }

    pub fn now(&self) -> SimTime {
        self.cluster.now()
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn store(&self) -> &CacheStore {
        &self.store
    }

    /// Direct access to the cache, for divergence tests.
    pub fn store_mut(&mut self) -> &mut CacheStore {
        &mut self.store
    }

    pub fn log(&self) -> &[ResourceEvent] {
        self.cluster.log()
    }

    pub fn subscribe(
        &mut self,
        kinds: &[ResourceKind],
        handler: Rc<RefCell<dyn EventHandler>>,
    ) -> SubscriptionId {
        let id = SubscriptionId(self.next_sub);
        self.next_sub += 1;
        self.subs.push(Subscription {
            id,
            kinds: kinds.iter().copied().collect(),
            handler,
        });
        id
    }

    pub fn subscribe_fn<F>(&mut self, kinds: &[ResourceKind], f: F) -> SubscriptionId
    where
        F: FnMut(&ResourceEvent, &mut Ctx<'_>) + 'static,
    {
        self.subscribe(kinds, Rc::new(RefCell::new(FnHandler(f))))
    }

    pub fn unsubscribe(&mut self, id: SubscriptionId) -> bool {
        let before = self.subs.len();
        self.subs.retain(|s| s.id != id);
        before != self.subs.len()
    }

    /// Runs `f` as if it were a callback of subscriber `me`, then delivers
    /// whatever it caused.
    pub fn with_ctx<R>(&mut self, me: SubscriptionId, f: impl FnOnce(&mut Ctx<'_>) -> R) -> R {
        let out = {
            let mut ctx = Ctx {
                now: self.cluster.now(),
                cluster: &mut self.cluster,
                store: &self.store,
                me,
            };
            f(&mut ctx)
        };
        self.flush();
        out
    }

    /// Replaces the store with a fresh authoritative list. Returns the number
    /// of entries that differed.
    pub fn resync(&mut self) -> usize {
        let fresh = CacheStore::list_from(&self.cluster);
        let n = self.store.diff_count(&fresh);
        self.store = fresh;
        n
    }

    /// Processes one queued item. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(fired) = self.cluster.pop() else {
            return false;
        };
        match fired {
            Fired::Applied => {}
            Fired::Deliver(ev) => self.deliver(&ev),
            Fired::Timer { target, token } => {
                if let Some(sub) = self.subs.iter().find(|s| s.id.0 == target) {
                    let handler = Rc::clone(&sub.handler);
                    let mut ctx = Ctx {
                        now: self.cluster.now(),
                        cluster: &mut self.cluster,
                        store: &self.store,
                        me: SubscriptionId(target),
                    };
                    handler.borrow_mut().on_timer(token, &mut ctx);
                }
            }
        }
        self.flush();
        true
    }

    /// Processes every item due at or before `t`, then moves the clock to `t`.
    pub fn run_until(&mut self, t: SimTime) {
        while self.cluster.next_time().is_some_and(|n| n <= t) {
            self.step();
        }
        self.cluster.advance_to(t);
    }

    /// Drains the queue. Fails if work remains past `deadline`.
    pub fn run_until_quiescent(&mut self, deadline: SimTime) -> Result<&[ResourceEvent], SimError> {
        while let Some(next) = self.cluster.next_time() {
            if next > deadline {
                return Err(SimError::DeadlineExceeded {
                    now: self.cluster.now(),
                    deadline,
                });
            }
            self.step();
        }
        Ok(self.cluster.log())
    }

    fn flush(&mut self) {
        loop {
            let batch = self.cluster.drain_outbox();
            if batch.is_empty() {
                break;
            }
            for ev in batch {
                if self.delay == SimTime::ZERO {
                    self.deliver(&ev);
                } else {
                    let at = ev.at + self.delay;
                    self.cluster.schedule_delivery(at, ev);
                }
            }
        }
    }

    fn deliver(&mut self, ev: &ResourceEvent) {
        self.store.apply(ev);
        let kind = ev.kind();
        let targets: Vec<(SubscriptionId, Rc<RefCell<dyn EventHandler>>)> = self
            .subs
            .iter()
            .filter(|s| s.kinds.contains(&kind))
            .map(|s| (s.id, Rc::clone(&s.handler)))
            .collect();
        for (id, handler) in targets {
            let mut ctx = Ctx {
                now: self.cluster.now(),
                cluster: &mut self.cluster,
                store: &self.store,
                me: id,
            };
            handler.borrow_mut().on_event(ev, &mut ctx);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{Latencies, PodPhase, PodRequest};

    fn pod(ns: &str, name: &str) -> PodRequest {
        PodRequest {
            namespace: ns.into(),
            name: name.into(),
            task_id: name.into(),
            cpu_milli: 1200,
            mem_mib: 1200,
            volume_claim: None,
            run_duration: SimTime::from_secs_f64(10.0),
        }
    }

    fn sim_with_ns(ns: &str) -> Simulation {
        let mut sim = Simulation::new(SimConfig::default()).unwrap();
        let me = SubscriptionId(0);
        sim.with_ctx(me, |c| c.cluster.create_namespace(ns).unwrap());
        sim.run_until_quiescent(SimTime::from_secs_f64(10.0)).unwrap();
        sim
    }

    #[test]
    fn unsynced_listers_refuse() {
        let mut sim = Simulation::new_unsynced(SimConfig::default()).unwrap();
        assert_eq!(sim.store().list_pods(None), Err(InformerError::NotSynced));
        assert_eq!(sim.store().list_nodes().map(|v| v.len()), Err(InformerError::NotSynced));
        sim.initial_list();
        assert_eq!(sim.store().list_nodes().unwrap().len(), 7);
        assert!(sim.store().list_pods(None).unwrap().is_empty());
        assert!(sim.store().list_namespaces().unwrap().is_empty());
    }

    #[test]
    fn pod_callbacks_in_emission_order() {
        let mut sim = sim_with_ns("wf-1");
        let seen = Rc::new(RefCell::new(Vec::new()));
        let sink = Rc::clone(&seen);
        let id = sim.subscribe_fn(&[ResourceKind::Pod], move |ev, ctx| {
            // store already reflects the event
            let p = ev.pod().unwrap();
            if ev.action != EventAction::Deleted {
                assert_eq!(ctx.store.get_pod(&p.namespace, &p.name), Some(p));
            }
            sink.borrow_mut().push((ev.action, p.phase));
        });
        sim.with_ctx(id, |c| c.cluster.create_pod(pod("wf-1", "p1")).unwrap());
        sim.run_until_quiescent(SimTime::from_secs_f64(60.0)).unwrap();
        assert_eq!(
            *seen.borrow(),
            vec![
                (EventAction::Added, PodPhase::Pending),
                (EventAction::Modified, PodPhase::Running),
                (EventAction::Modified, PodPhase::Succeeded),
            ]
        );
    }

    #[test]
    fn unsubscribe_and_fan_out() {
        let mut sim = sim_with_ns("wf-1");
        let a = Rc::new(RefCell::new(Vec::new()));
        let b = Rc::new(RefCell::new(Vec::new()));
        let c = Rc::new(RefCell::new(0usize));
        let (sa, sb, sc) = (Rc::clone(&a), Rc::clone(&b), Rc::clone(&c));
        sim.subscribe_fn(&[ResourceKind::Pod], move |ev, _| sa.borrow_mut().push(ev.clone()));
        sim.subscribe_fn(&[ResourceKind::Pod], move |ev, _| sb.borrow_mut().push(ev.clone()));
        let gone = sim.subscribe_fn(&[ResourceKind::Pod], move |_, _| *sc.borrow_mut() += 1);
        assert!(sim.unsubscribe(gone));
        sim.with_ctx(SubscriptionId(0), |c| c.cluster.create_pod(pod("wf-1", "p1")).unwrap());
        sim.run_until_quiescent(SimTime::from_secs_f64(60.0)).unwrap();
        assert_eq!(a.borrow().len(), 3);
        assert_eq!(*a.borrow(), *b.borrow());
        assert_eq!(*c.borrow(), 0);
    }

    #[test]
    fn lists_after_quiescence() {
        let mut sim = sim_with_ns("wf-1");
        sim.with_ctx(SubscriptionId(0), |c| {
            for n in ["p1", "p2", "p3"] {
                c.cluster.create_pod(pod("wf-1", n)).unwrap();
            }
        });
        sim.run_until_quiescent(SimTime::from_secs_f64(60.0)).unwrap();
        let names: Vec<&str> = sim
            .store()
            .list_pods(Some("wf-1"))
            .unwrap()
            .iter()
            .map(|p| p.name.as_str())
            .collect();
        assert_eq!(names, ["p1", "p2", "p3"]);
        assert!(sim.store().list_pods(Some("other")).unwrap().is_empty());
        assert_eq!(sim.resync(), 0);
    }

    #[test]
    fn resync_counts_corrupted_entry() {
        let mut sim = sim_with_ns("wf-1");
        assert_eq!(sim.resync(), 0);
        let key = (String::new(), "node1".to_string());
        sim.store_mut().nodes.get_mut(&key).unwrap().requested_cpu_milli = 1200;
        assert_eq!(sim.resync(), 1);
        assert_eq!(sim.resync(), 0);
    }

    #[test]
    fn delayed_informer_lags_then_converges() {
        let cfg = SimConfig {
            informer_delay: SimTime::from_millis(400),
            latencies: Latencies::zero(),
            ..SimConfig::default()
        };
        let mut sim = Simulation::new(cfg).unwrap();
        sim.with_ctx(SubscriptionId(0), |c| c.cluster.create_namespace("wf-1").unwrap());
        sim.run_until(SimTime::from_millis(100));
        assert!(sim.cluster().namespace("wf-1").is_some());
        assert!(sim.store().get_namespace("wf-1").is_none());
        sim.run_until_quiescent(SimTime::from_secs_f64(5.0)).unwrap();
        assert!(sim.store().get_namespace("wf-1").is_some());
        assert_eq!(sim.resync(), 0);
    }
}
