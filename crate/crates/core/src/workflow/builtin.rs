//! Shipped corpus DAGs and structural generators.
//!
//! The four scientific workflows are ~20-task reconstructions of the Pegasus
//! Montage, Epigenomics, CyberShake and LIGO Inspiral topologies, each with a
//! virtual entry and exit task. They are configuration, not ground truth.

use std::fmt;
use std::str::FromStr;

use super::{parse_workflow, TaskSpec, WorkflowError, WorkflowSpec};

const MONTAGE: &str = include_str!("../../corpus/montage.json");
const EPIGENOMICS: &str = include_str!("../../corpus/epigenomics.json");
const CYBERSHAKE: &str = include_str!("../../corpus/cybershake.json");
const LIGO: &str = include_str!("../../corpus/ligo.json");
const MOTIVATION: &str = include_str!("../../corpus/motivation.json");

/// Size used for the generators when none is requested.
pub const DEFAULT_CORPUS_SIZE: usize = 20;

const TASK_IMAGE: &str = "shanchenggang/task-emulator:latest";
const TASK_CPU_MILLI: u64 = 1200;
const TASK_MEM_MIB: u64 = 1200;
const TASK_ARGS: [&str; 6] = ["-c", "1", "-m", "100", "-t", "5"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BuiltinWorkflow {
    Montage,
    Epigenomics,
    CyberShake,
    Ligo,
    InTree,
    OutTree,
    ForkJoin,
    Pipeline,
}

impl BuiltinWorkflow {
    pub const CORPUS: [BuiltinWorkflow; 4] = [
        BuiltinWorkflow::Montage,
        BuiltinWorkflow::Epigenomics,
        BuiltinWorkflow::CyberShake,
        BuiltinWorkflow::Ligo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BuiltinWorkflow::Montage => "montage",
            BuiltinWorkflow::Epigenomics => "epigenomics",
            BuiltinWorkflow::CyberShake => "cybershake",
            BuiltinWorkflow::Ligo => "ligo",
            BuiltinWorkflow::InTree => "intree",
            BuiltinWorkflow::OutTree => "outtree",
            BuiltinWorkflow::ForkJoin => "forkjoin",
            BuiltinWorkflow::Pipeline => "pipeline",
        }
    }

    pub fn is_corpus(self) -> bool {
        Self::CORPUS.contains(&self)
    }
}

impl fmt::Display for BuiltinWorkflow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BuiltinWorkflow {
    type Err = WorkflowError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "montage" => BuiltinWorkflow::Montage,
            "epigenomics" => BuiltinWorkflow::Epigenomics,
            "cybershake" => BuiltinWorkflow::CyberShake,
            "ligo" => BuiltinWorkflow::Ligo,
            "intree" | "in-tree" => BuiltinWorkflow::InTree,
            "outtree" | "out-tree" => BuiltinWorkflow::OutTree,
            "forkjoin" | "fork-join" => BuiltinWorkflow::ForkJoin,
            "pipeline" => BuiltinWorkflow::Pipeline,
            _ => return Err(WorkflowError::UnknownWorkflowName(s.to_string())),
        })
    }
}

/// Returns a shipped corpus DAG or generates a structural one.
///
/// `size` is the total task count (virtual entry/exit included) and only
/// applies to the generators; the corpus DAGs have fixed shapes.
pub fn builtin_workflow(
    which: BuiltinWorkflow,
    size: Option<usize>,
) -> Result<WorkflowSpec, WorkflowError> {
    let corpus = match which {
        BuiltinWorkflow::Montage => Some(MONTAGE),
        BuiltinWorkflow::Epigenomics => Some(EPIGENOMICS),
        BuiltinWorkflow::CyberShake => Some(CYBERSHAKE),
        BuiltinWorkflow::Ligo => Some(LIGO),
        _ => None,
    };
    if let Some(text) = corpus {
        return Ok(parse_workflow(text)?.with_name(which.name()));
    }

    let size = size.unwrap_or(DEFAULT_CORPUS_SIZE);
    if size < 3 {
        return Err(WorkflowError::SizeTooSmall {
            name: which.name().to_string(),
            size,
            min: 3,
        });
    }
    let edges = match which {
        BuiltinWorkflow::Pipeline => (1..size).map(|i| (i - 1, i)).collect(),
        BuiltinWorkflow::ForkJoin => {
            let join = size - 1;
            (1..join).flat_map(|i| [(0, i), (i, join)]).collect()
        }
        // Node 0 is a virtual entry feeding the leaves of a binary tree whose
        // root (node 1) is the exit. Tree node i has parent i / 2.
        BuiltinWorkflow::InTree => {
            let nodes = size - 1;
            let mut edges = Vec::new();
            for i in 2..=nodes {
                edges.push((i, i / 2));
            }
            for leaf in (1..=nodes).filter(|i| 2 * i > nodes) {
                edges.push((0, leaf));
            }
            edges
        }
        // Mirror image: the root (node 0) is the entry, the leaves feed a
        // virtual exit.
        BuiltinWorkflow::OutTree => {
            let nodes = size - 1;
            let exit = size - 1;
            let mut edges = Vec::new();
            for i in 1..nodes {
                edges.push(((i - 1) / 2, i));
            }
            for leaf in (0..nodes).filter(|i| 2 * i + 1 >= nodes) {
                edges.push((leaf, exit));
            }
            edges
        }
        _ => unreachable!("corpus handled above"),
    };
    uniform_workflow(which.name(), size, &edges)
}

/// The six-task DAG used to motivate ordered submission:
/// T1 -> {T2, T3}, T2 -> T4, {T3, T4} -> T5, T5 -> T6.
pub fn motivation_dag() -> WorkflowSpec {
    parse_workflow(MOTIVATION)
        .expect("shipped motivation DAG is valid")
        .with_name("motivation")
}

fn uniform_workflow(
    name: &str,
    size: usize,
    edges: &[(usize, usize)],
) -> Result<WorkflowSpec, WorkflowError> {
    let width = size.saturating_sub(1).to_string().len().max(2);
    let id = |i: usize| format!("{i:0width$}");
    let tasks = (0..size).map(|i| TaskSpec {
        id: id(i),
        inputs: edges.iter().filter(|e| e.1 == i).map(|e| id(e.0)).collect(),
        outputs: edges.iter().filter(|e| e.0 == i).map(|e| id(e.1)).collect(),
        image: TASK_IMAGE.to_string(),
        cpu_milli: TASK_CPU_MILLI,
        mem_mib: TASK_MEM_MIB,
        args: TASK_ARGS.iter().map(|s| s.to_string()).collect(),
    });
    WorkflowSpec::new(name, tasks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generators_reject_tiny_sizes() {
        for w in [
            BuiltinWorkflow::InTree,
            BuiltinWorkflow::OutTree,
            BuiltinWorkflow::ForkJoin,
            BuiltinWorkflow::Pipeline,
        ] {
            assert!(matches!(
                builtin_workflow(w, Some(2)),
                Err(WorkflowError::SizeTooSmall { .. })
            ));
            let spec = builtin_workflow(w, Some(9)).unwrap();
            assert_eq!(spec.len(), 9);
            assert_eq!(spec.entry_ids().len(), 1, "{w}");
            assert_eq!(spec.exit_ids().len(), 1, "{w}");
        }
    }

    #[test]
    fn unknown_name() {
        assert_eq!(
            "sipht".parse::<BuiltinWorkflow>(),
            Err(WorkflowError::UnknownWorkflowName("sipht".into()))
        );
    }

    #[test]
    fn corpus_has_single_entry_and_exit() {
        for w in BuiltinWorkflow::CORPUS {
            let spec = builtin_workflow(w, None).unwrap();
            assert_eq!(spec.entry_ids().len(), 1, "{w}");
            assert_eq!(spec.exit_ids().len(), 1, "{w}");
            assert!((20..=22).contains(&spec.len()), "{w} has {} tasks", spec.len());
        }
    }
}
