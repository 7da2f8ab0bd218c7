//! Small synthetic graphs used by tests, the acceptance suite and the CLI
//! smoke runs.

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::graph::{ClassSplit, Graph};
use crate::rng::rng;

/// Stochastic block graph: class `c` has `sizes[c]` nodes, intra-class edge
/// probability `p_in`, inter-class `p_out`. Features are Gaussian around a
/// class mean `3 * e_{c mod feat_dim}` with unit noise scaled by 0.5.
///
/// Split: the last two classes are `test`, the rest `base`, `dev` empty.
pub fn block_graph(
    sizes: &[usize],
    feat_dim: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> (Graph, ClassSplit) {
    let mut r = rng(seed);
    let labels: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(c, &n)| std::iter::repeat_n(c, n))
        .collect();
    let n = labels.len();
    let noise = Normal::new(0.0, 0.5).unwrap();
    let mut features = Array2::<f32>::zeros((n, feat_dim));
    for (i, &c) in labels.iter().enumerate() {
        for j in 0..feat_dim {
            let mean = if j == c % feat_dim { 3.0 } else { 0.0 };
            features[[i, j]] = (mean + noise.sample(&mut r)) as f32;
        }
    }
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let p = if labels[u] == labels[v] { p_in } else { p_out };
            if r.random::<f64>() < p {
                edges.push((u, v));
            }
        }
    }
    let graph = Graph::new(n, edges, features, labels).expect("valid toy graph");
    let k = sizes.len();
    let split = if k >= 3 {
        ClassSplit::new((0..k - 2).collect(), vec![], vec![k - 2, k - 1])
    } else {
        ClassSplit::new(vec![], vec![], (0..k).collect())
    }
    .expect("disjoint split");
    (graph, split)
}

/// The 20-node, two-class separable toy graph.
pub fn separable_pair(seed: u64) -> (Graph, ClassSplit) {
    block_graph(&[10, 10], 4, 0.6, 0.05, seed)
}

/// 20-node two-block graph (`p_in = 0.9`, `p_out = 0.05`) whose features
/// are one-hot node ids.
pub fn one_hot_blocks(seed: u64) -> Graph {
    let (g, _) = block_graph(&[10, 10], 1, 0.9, 0.05, seed);
    let n = g.num_nodes();
    Graph::new(
        n,
        g.edges().iter().copied(),
        Array2::<f32>::eye(n),
        g.labels().to_vec(),
    )
    .expect("valid toy graph")
}
