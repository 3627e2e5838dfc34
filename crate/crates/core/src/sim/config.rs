use serde::{Deserialize, Serialize};

use super::SimError;
use crate::time::SimTime;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SchedulerPolicy {
    /// Seeded-random order among pending pods and random feasible node.
    #[default]
    Arbitrary,
    /// Creation order, least-loaded node.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default)]
    pub is_master: bool,
    pub cpu_milli: u64,
    pub mem_mib: u64,
}

/// Operation latencies, in virtual seconds.
///
/// The split of measured end-to-end overhead across these knobs is a
/// modeling choice. The defaults give a 10 s task pod a creation-to-deletion
/// time of about 12.8-13.1 s under the adaptor engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Latencies {
    pub namespace_create: SimTime,
    pub claim_create_and_bind: SimTime,
    pub pod_create: SimTime,
    pub pod_schedule: SimTime,
    pub pod_delete: SimTime,
    pub namespace_delete: SimTime,
    /// Client-side cost of one apiserver call, paid by the engines.
    pub api_call_overhead: SimTime,
}

impl Default for Latencies {
    fn default() -> Self {
        Latencies {
            namespace_create: SimTime::from_millis(300),
            claim_create_and_bind: SimTime::from_millis(1000),
            pod_create: SimTime::from_millis(1500),
            pod_schedule: SimTime::from_millis(300),
            pod_delete: SimTime::from_millis(1000),
            namespace_delete: SimTime::from_millis(1000),
            api_call_overhead: SimTime::from_millis(250),
        }
    }
}

impl Latencies {
    pub fn zero() -> Self {
        Latencies {
            namespace_create: SimTime::ZERO,
            claim_create_and_bind: SimTime::ZERO,
            pod_create: SimTime::ZERO,
            pod_schedule: SimTime::ZERO,
            pod_delete: SimTime::ZERO,
            namespace_delete: SimTime::ZERO,
            api_call_overhead: SimTime::ZERO,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub nodes: Vec<NodeSpec>,
    pub exclude_master: bool,
    pub latencies: Latencies,
    /// Delay between an event being emitted and the informer applying it.
    pub informer_delay: SimTime,
    pub mount_failure_probability: f64,
    pub rng_seed: u64,
    pub scheduler_policy: SchedulerPolicy,
}

impl Default for SimConfig {
    /// One master and six 8-core/15312 MiB workers: 48000 m CPU and
    /// 91872 MiB memory allocatable for task pods.
    fn default() -> Self {
        let mut nodes = vec![NodeSpec {
            name: "master".into(),
            is_master: true,
            cpu_milli: 8000,
            mem_mib: 15312,
        }];
        nodes.extend((1..=6).map(|i| NodeSpec {
            name: format!("node{i}"),
            is_master: false,
            cpu_milli: 8000,
            mem_mib: 15312,
        }));
        SimConfig {
            nodes,
            exclude_master: true,
            latencies: Latencies::default(),
            informer_delay: SimTime::ZERO,
            mount_failure_probability: 0.0,
            rng_seed: 0,
            scheduler_policy: SchedulerPolicy::Arbitrary,
        }
    }
}

impl SimConfig {
    /// `count` identical workers and no master.
    pub fn uniform_workers(count: usize, cpu_milli: u64, mem_mib: u64) -> Self {
        SimConfig {
            nodes: (1..=count)
                .map(|i| NodeSpec {
                    name: format!("node{i}"),
                    is_master: false,
                    cpu_milli,
                    mem_mib,
                })
                .collect(),
            ..SimConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..=1.0).contains(&self.mount_failure_probability) {
            return Err(SimError::InvalidConfig(format!(
                "mount_failure_probability must be in [0, 1], got {}",
                self.mount_failure_probability
            )));
        }
        if self.nodes.is_empty() {
            return Err(SimError::InvalidConfig("cluster has no nodes".into()));
        }
        let mut names: Vec<&str> = self.nodes.iter().map(|n| n.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.nodes.len() {
            return Err(SimError::InvalidConfig("duplicate node names".into()));
        }
        Ok(())
    }

    /// Σ allocatable over nodes that may host task pods.
    pub fn schedulable_capacity(&self) -> (u64, u64) {
        self.nodes
            .iter()
            .filter(|n| !(n.is_master && self.exclude_master))
            .fold((0, 0), |(c, m), n| (c + n.cpu_milli, m + n.mem_mib))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_capacity_matches_testbed() {
        assert_eq!(SimConfig::default().schedulable_capacity(), (48_000, 91_872));
    }

    #[test]
    fn pinned_default_latencies() {
        let l = Latencies::default();
        assert_eq!(l.pod_schedule, SimTime::from_millis(300));
        assert_eq!(l.pod_create, SimTime::from_millis(1500));
        assert_eq!(l.pod_delete, SimTime::from_millis(1000));
        assert_eq!(l.namespace_create, SimTime::from_millis(300));
        assert_eq!(l.claim_create_and_bind, SimTime::from_millis(1000));
        assert_eq!(l.api_call_overhead, SimTime::from_millis(250));
    }

    #[test]
    fn partial_toml_keeps_defaults() {
        let cfg: SimConfig = toml::from_str(
            "rng_seed = 9\nscheduler_policy = \"spread\"\n[latencies]\npod_delete = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.scheduler_policy, SchedulerPolicy::Spread);
        assert_eq!(cfg.latencies.pod_delete, SimTime::from_millis(500));
        assert_eq!(cfg.latencies.pod_create, SimTime::from_millis(1500));
        assert_eq!(cfg.nodes.len(), 7);
    }

    #[test]
    fn probability_out_of_range() {
        let cfg = SimConfig {
            mount_failure_probability: 1.5,
            ..SimConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
