//! Episodic N-way K-shot R-query task sampling.

use std::collections::BTreeMap;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{ClassSplit, Graph, SplitPart};
use crate::rng::{derive_seed, rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub n_way: usize,
    pub k_shot: usize,
    pub r_query: usize,
}

impl TaskShape {
    pub fn new(n_way: usize, k_shot: usize, r_query: usize) -> Self {
        Self {
            n_way,
            k_shot,
            r_query,
        }
    }
}

/// One episode. Class indices in `support` / `query` point into `classes`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotTask {
    pub task_id: String,
    pub seed: u64,
    pub classes: Vec<usize>,
    pub support: Vec<(usize, usize)>,
    pub query: Vec<(usize, usize)>,
}

impl FewShotTask {
    pub fn n_way(&self) -> usize {
        self.classes.len()
    }

    pub fn support_nodes(&self) -> Vec<usize> {
        self.support.iter().map(|&(n, _)| n).collect()
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, c)| c).collect()
    }

    pub fn query_nodes(&self) -> Vec<usize> {
        self.query.iter().map(|&(n, _)| n).collect()
    }

    pub fn query_labels(&self) -> Vec<usize> {
        self.query.iter().map(|&(_, c)| c).collect()
    }

    /// Support followed by query: the attention context used for tuning
    /// and prediction.
    pub fn context_nodes(&self) -> Vec<usize> {
        self.support
            .iter()
            .chain(&self.query)
            .map(|&(n, _)| n)
            .collect()
    }
}

/// Source tasks drawn from base classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceTaskSet {
    pub tasks: Vec<FewShotTask>,
}

impl SourceTaskSet {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

/// Per-class node lists restricted to a set of classes.
#[derive(Debug, Clone)]
pub struct ClassIndex {
    members: BTreeMap<usize, Vec<usize>>,
}

impl ClassIndex {
    pub fn new(graph: &Graph, classes: &[usize]) -> Self {
        let mut members: BTreeMap<usize, Vec<usize>> =
            classes.iter().map(|&c| (c, Vec::new())).collect();
        for (node, label) in graph.labels().iter().enumerate() {
            if let Some(list) = members.get_mut(label) {
                list.push(node);
            }
        }
        Self { members }
    }

    pub fn num_classes(&self) -> usize {
        self.members.len()
    }

    /// Samples one task. Classes with fewer than K+R nodes are skipped.
    pub fn sample(&self, shape: TaskShape, seed: u64, task_id: String) -> Result<FewShotTask> {
        let TaskShape {
            n_way,
            k_shot,
            r_query,
        } = shape;
        if n_way == 0 || k_shot == 0 {
            return Err(Error::Config("N and K must be at least 1".into()));
        }
        if n_way > self.members.len() {
            return Err(Error::Config(format!(
                "{n_way}-way task requested but the split part has {} classes",
                self.members.len()
            )));
        }
        let need = k_shot + r_query;
        let eligible: Vec<(usize, &Vec<usize>)> = self
            .members
            .iter()
            .filter(|(_, nodes)| nodes.len() >= need)
            .map(|(&c, nodes)| (c, nodes))
            .collect();
        if eligible.len() < n_way {
            return Err(Error::Infeasible(format!(
                "only {} classes have at least {need} nodes, {n_way} needed",
                eligible.len()
            )));
        }
        let mut rng = rng(seed);
        // classes in ascending id order, so class index c means the same
        // class in every task drawn from the same class set
        let mut picked = index::sample(&mut rng, eligible.len(), n_way).into_vec();
        picked.sort_unstable();
        let mut classes = Vec::with_capacity(n_way);
        let mut support = Vec::with_capacity(n_way * k_shot);
        let mut query = Vec::with_capacity(n_way * r_query);
        for (ci, pos) in picked.into_iter().enumerate() {
            let (class, nodes) = eligible[pos];
            classes.push(class);
            let chosen = index::sample(&mut rng, nodes.len(), need);
            for (j, idx) in chosen.into_iter().enumerate() {
                if j < k_shot {
                    support.push((nodes[idx], ci));
                } else {
                    query.push((nodes[idx], ci));
                }
            }
        }
        Ok(FewShotTask {
            task_id,
            seed,
            classes,
            support,
            query,
        })
    }
}

/// Samples one N-way K-shot R-query task from a split part.
pub fn sample_task(
    graph: &Graph,
    split: &ClassSplit,
    part: SplitPart,
    shape: TaskShape,
    seed: u64,
) -> Result<FewShotTask> {
    ClassIndex::new(graph, split.part(part)).sample(shape, seed, format!("{part}-{seed:016x}"))
}

/// Draws `m` independent tasks from `base_classes`; task `i` uses seed
/// `derive_seed(seed, i)`.
pub fn sample_source_tasks(
    graph: &Graph,
    base_classes: &[usize],
    m: usize,
    shape: TaskShape,
    seed: u64,
) -> Result<SourceTaskSet> {
    let index = ClassIndex::new(graph, base_classes);
    let tasks = (0..m)
        .map(|i| index.sample(shape, derive_seed(seed, i as u64), format!("source-{i}")))
        .collect::<Result<Vec<_>>>()?;
    Ok(SourceTaskSet { tasks })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy;
    use std::collections::HashSet;

    fn cora_like_split() -> (Graph, ClassSplit) {
        toy::block_graph(&[12, 12, 12, 12], 6, 0.5, 0.02, 3)
    }

    #[test]
    fn counts_and_disjointness() {
        let (g, split) = cora_like_split();
        let task = sample_task(&g, &split, SplitPart::Test, TaskShape::new(2, 5, 6), 0).unwrap();
        assert_eq!(task.support.len(), 10);
        assert_eq!(task.query.len(), 12);
        let s: HashSet<_> = task.support_nodes().into_iter().collect();
        assert!(task.query_nodes().iter().all(|n| !s.contains(n)));
        for &(n, c) in task.support.iter().chain(&task.query) {
            assert_eq!(g.labels()[n], task.classes[c]);
        }
    }

    #[test]
    fn same_seed_same_task() {
        let (g, split) = cora_like_split();
        let shape = TaskShape::new(2, 3, 4);
        let a = sample_task(&g, &split, SplitPart::Base, shape, 7).unwrap();
        let b = sample_task(&g, &split, SplitPart::Base, shape, 7).unwrap();
        assert_eq!(
            serde_json::to_vec(&a).unwrap(),
            serde_json::to_vec(&b).unwrap()
        );
        let c = sample_task(&g, &split, SplitPart::Base, shape, 8).unwrap();
        assert_ne!(a.support, c.support);
    }

    #[test]
    fn too_many_ways_is_config_error() {
        let (g, split) = cora_like_split();
        let r = sample_task(&g, &split, SplitPart::Test, TaskShape::new(3, 1, 1), 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn small_classes_are_excluded() {
        let (g, split) = cora_like_split();
        // every class has 12 nodes
        let r = sample_task(&g, &split, SplitPart::Test, TaskShape::new(2, 6, 7), 0);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn source_tasks_stay_in_base() {
        let (g, split) = cora_like_split();
        let set = sample_source_tasks(&g, &split.base, 9, TaskShape::new(2, 2, 3), 1).unwrap();
        assert_eq!(set.len(), 9);
        for t in &set.tasks {
            assert!(t.classes.iter().all(|c| split.base.contains(c)));
        }
        let empty = sample_source_tasks(&g, &split.base, 0, TaskShape::new(2, 2, 3), 1).unwrap();
        assert!(empty.is_empty());
    }
}
