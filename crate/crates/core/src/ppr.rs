//! Personalized PageRank subgraph selection for pretraining mini-batches.

use crate::graph::GraphStructure;

pub const DEFAULT_RESTART: f64 = 0.15;
pub const DEFAULT_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_MAX_SIZE: usize = 256;
const MAX_ITERATIONS: usize = 10_000;

/// PPR scores from `seed` by power iteration until the L1 change drops
/// below `tol`. Nodes without neighbors keep their own mass, so the scores
/// always sum to one.
pub fn ppr_scores(graph: &GraphStructure<'_>, seed: usize, restart: f64, tol: f64) -> Vec<f64> {
    let n = graph.num_nodes;
    let mut scores = vec![0.0; n];
    scores[seed] = 1.0;
    let mut next = vec![0.0; n];
    for _ in 0..MAX_ITERATIONS {
        next.iter_mut().for_each(|x| *x = 0.0);
        next[seed] += restart;
        for (u, &mass) in scores.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            let walk = (1.0 - restart) * mass;
            let nbrs = &graph.neighbors[u];
            if nbrs.is_empty() {
                next[u] += walk;
            } else {
                let share = walk / nbrs.len() as f64;
                for &v in nbrs {
                    next[v] += share;
                }
            }
        }
        let delta: f64 = scores.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut scores, &mut next);
        if delta < tol {
            break;
        }
    }
    scores
}

/// Up to `max_size` nodes ranked by PPR score from `seed` (seed first,
/// ties broken by node id). Nodes with zero score are never returned.
pub fn ppr_subgraph(
    graph: &GraphStructure<'_>,
    seed: usize,
    max_size: usize,
    restart: f64,
) -> Vec<usize> {
    assert!(seed < graph.num_nodes, "seed node out of range");
    assert!(max_size >= 1, "max_size must be at least 1");
    if graph.neighbors[seed].is_empty() {
        return vec![seed];
    }
    let scores = ppr_scores(graph, seed, restart, DEFAULT_TOLERANCE);
    let mut ranked: Vec<usize> = (0..graph.num_nodes)
        .filter(|&v| v != seed && scores[v] > 0.0)
        .collect();
    ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut out = Vec::with_capacity(max_size.min(ranked.len() + 1));
    out.push(seed);
    out.extend(ranked.into_iter().take(max_size - 1));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use ndarray::Array2;

    fn graph(n: usize, edges: &[(usize, usize)]) -> Graph {
        Graph::new(n, edges.iter().copied(), Array2::zeros((n, 1)), vec![0; n]).unwrap()
    }

    /// Dense solve of pi = restart * e_s + (1 - restart) * pi * P.
    fn exact_ppr(g: &Graph, seed: usize, restart: f64) -> Vec<f64> {
        let n = g.num_nodes();
        let mut m = nalgebra::DMatrix::<f64>::identity(n, n);
        for u in 0..n {
            let nb = g.neighbors(u);
            if nb.is_empty() {
                m[(u, u)] -= 1.0 - restart;
            }
            for &v in nb {
                // column-stochastic transpose: pi_v gets pi_u / deg(u)
                m[(v, u)] -= (1.0 - restart) / nb.len() as f64;
            }
        }
        let mut rhs = nalgebra::DVector::zeros(n);
        rhs[seed] = restart;
        m.lu().solve(&rhs).unwrap().iter().copied().collect()
    }

    #[test]
    fn star_center_takes_two_leaves() {
        let g = graph(5, &[(0, 1), (0, 2), (0, 3), (0, 4)]);
        let exact = exact_ppr(&g, 0, DEFAULT_RESTART);
        // center dominates, leaves tie
        assert!(exact[0] > exact[1]);
        assert!((exact[1] - exact[4]).abs() < 1e-12);
        let power = ppr_scores(&g.structure(), 0, DEFAULT_RESTART, 1e-12);
        for (a, b) in exact.iter().zip(&power) {
            assert!((a - b).abs() < 1e-9);
        }
        assert_eq!(ppr_subgraph(&g.structure(), 0, 3, DEFAULT_RESTART), vec![0, 1, 2]);
    }

    #[test]
    fn isolated_seed_returns_itself() {
        let g = graph(3, &[(1, 2)]);
        assert_eq!(ppr_subgraph(&g.structure(), 0, 10, DEFAULT_RESTART), vec![0]);
    }

    #[test]
    fn path_keeps_nearest_neighbor() {
        let g = graph(3, &[(0, 1), (1, 2)]);
        let exact = exact_ppr(&g, 0, DEFAULT_RESTART);
        // the middle node outscores the seed; the seed is still listed first
        assert!(exact[1] > exact[0] && exact[0] > exact[2]);
        assert_eq!(ppr_subgraph(&g.structure(), 0, 2, DEFAULT_RESTART), vec![0, 1]);
    }

    #[test]
    fn scores_sum_to_one() {
        let g = graph(6, &[(0, 1), (1, 2), (2, 0), (3, 4)]);
        for seed in 0..6 {
            let s = ppr_scores(&g.structure(), seed, DEFAULT_RESTART, DEFAULT_TOLERANCE);
            let total: f64 = s.iter().sum();
            assert!((total - 1.0).abs() < 1e-8, "seed {seed}: {total}");
            assert!(s.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn unreachable_nodes_not_returned() {
        let g = graph(5, &[(0, 1), (1, 2), (3, 4)]);
        let sub = ppr_subgraph(&g.structure(), 0, 5, DEFAULT_RESTART);
        assert_eq!(sub, vec![0, 1, 2]);
    }
}
