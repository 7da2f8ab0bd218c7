//! Laplacian eigenvector positional encodings.
//!
//! Each connected component is encoded on its own: column `j` holds, on the
//! component's rows, the eigenvector of its normalized Laplacian
//! `I - D^-1/2 A D^-1/2` with the `j`-th smallest nonzero eigenvalue. On a
//! connected graph these are exactly the global eigenvectors. Isomorphic
//! components therefore receive identical rows (up to sign), and small
//! components are not left with all-zero encodings.
//!
//! Inside a degenerate eigenspace the basis is pinned by Gram-Schmidt over
//! the probe vectors `1, d, d^2, d^3` (degree powers). Every column is then
//! sign-fixed per component so its first nonzero entry is positive.
//! Components with fewer than `k` informative eigenvectors are zero-padded.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::graph::GraphStructure;

pub const DEFAULT_DIM: usize = 32;
/// Components up to this size use a dense eigendecomposition.
pub const DENSE_LIMIT: usize = 4096;

const ZERO_EIGENVALUE: f64 = 1e-8;
const DEGENERATE_GAP: f64 = 1e-7;
const SIGN_EPS: f64 = 1e-10;

pub fn positional_encoding(graph: &GraphStructure<'_>, k: usize) -> Result<Array2<f64>> {
    let n = graph.num_nodes;
    if k > n {
        return Err(Error::Config(format!(
            "positional dimension {k} exceeds node count {n}"
        )));
    }
    let mut out = Array2::zeros((n, k));
    if k == 0 {
        return Ok(out);
    }
    for nodes in components(graph) {
        if nodes.len() < 2 {
            continue;
        }
        let local = Component::new(graph, &nodes);
        let columns = if nodes.len() <= DENSE_LIMIT {
            local.dense(k)?
        } else {
            local.subspace(k)?
        };
        for (j, mut col) in columns.into_iter().enumerate() {
            if let Some(first) = col.iter().find(|x| x.abs() > SIGN_EPS) {
                if *first < 0.0 {
                    col.neg_mut();
                }
            }
            for (i, &node) in nodes.iter().enumerate() {
                out[[node, j]] = col[i];
            }
        }
    }
    Ok(out)
}

/// Connected components, each as ascending node ids, ordered by smallest id.
fn components(graph: &GraphStructure<'_>) -> Vec<Vec<usize>> {
    let n = graph.num_nodes;
    let mut seen = vec![false; n];
    let mut out = Vec::new();
    for s in 0..n {
        if seen[s] {
            continue;
        }
        seen[s] = true;
        let mut stack = vec![s];
        let mut nodes = Vec::new();
        while let Some(u) = stack.pop() {
            nodes.push(u);
            for &w in &graph.neighbors[u] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        nodes.sort_unstable();
        out.push(nodes);
    }
    out
}

/// A connected component re-indexed to `0..len`.
struct Component {
    degree: Vec<f64>,
    edges: Vec<(usize, usize)>,
}

impl Component {
    fn new(graph: &GraphStructure<'_>, nodes: &[usize]) -> Self {
        let local = |g: usize| nodes.binary_search(&g).expect("node in component");
        let degree = nodes.iter().map(|&u| graph.degree(u) as f64).collect();
        let edges = nodes
            .iter()
            .flat_map(|&u| {
                graph.neighbors[u]
                    .iter()
                    .filter(move |&&v| v >= u)
                    .map(move |&v| (u, v))
            })
            .map(|(u, v)| (local(u), local(v)))
            .collect();
        Self { degree, edges }
    }

    fn len(&self) -> usize {
        self.degree.len()
    }

    fn laplacian(&self) -> DMatrix<f64> {
        let n = self.len();
        let inv: Vec<f64> = self.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let mut lap = DMatrix::<f64>::identity(n, n);
        for &(u, v) in &self.edges {
            let w = inv[u] * inv[v];
            lap[(u, v)] -= w;
            if u != v {
                lap[(v, u)] -= w;
            }
        }
        lap
    }

    fn probes(&self) -> Vec<DVector<f64>> {
        (0..4)
            .map(|p| DVector::from_iterator(self.len(), self.degree.iter().map(|d| d.powi(p))))
            .collect()
    }

    fn dense(&self, k: usize) -> Result<Vec<DVector<f64>>> {
        let eig = SymmetricEigen::try_new(self.laplacian(), 1e-12, 0)
            .ok_or_else(|| Error::Eigen("symmetric eigendecomposition did not converge".into()))?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
        let informative: Vec<usize> = order
            .into_iter()
            .filter(|&i| eig.eigenvalues[i] > ZERO_EIGENVALUE)
            .collect();
        let probes = self.probes();
        let mut columns = Vec::with_capacity(k);
        let mut start = 0;
        while start < informative.len() && columns.len() < k {
            let lambda = eig.eigenvalues[informative[start]];
            let mut end = start + 1;
            while end < informative.len()
                && eig.eigenvalues[informative[end]] - lambda < DEGENERATE_GAP * lambda.max(1.0)
            {
                end += 1;
            }
            let basis: Vec<DVector<f64>> = informative[start..end]
                .iter()
                .map(|&i| eig.eigenvectors.column(i).into_owned())
                .collect();
            columns.extend(canonical_basis(&basis, &probes));
            start = end;
        }
        columns.truncate(k);
        Ok(columns)
    }

    /// Block subspace iteration on `2I - L` with the null vector `D^1/2 1`
    /// deflated.
    fn subspace(&self, k: usize) -> Result<Vec<DVector<f64>>> {
        let n = self.len();
        let k = k.min(n - 1);
        let block = (k + 8).min(n - 1);
        let inv: Vec<f64> = self.degree.iter().map(|d| 1.0 / d.sqrt()).collect();
        let null = {
            let v = DVector::from_iterator(n, self.degree.iter().map(|d| d.sqrt()));
            let norm = v.norm();
            v / norm
        };
        let apply = |x: &DMatrix<f64>| -> DMatrix<f64> {
            let mut y = x.clone();
            for &(u, v) in &self.edges {
                let w = inv[u] * inv[v];
                for c in 0..x.ncols() {
                    y[(u, c)] += w * x[(v, c)];
                    if u != v {
                        y[(v, c)] += w * x[(u, c)];
                    }
                }
            }
            y
        };
        let deflate = |x: &mut DMatrix<f64>| {
            for c in 0..x.ncols() {
                let dot = x.column(c).dot(&null);
                x.column_mut(c).axpy(-dot, &null, 1.0);
            }
        };
        let mut rng = crate::rng::rng(0x5eed_1a91);
        let mut x =
            DMatrix::<f64>::from_fn(n, block, |_, _| rand::Rng::random::<f64>(&mut rng) - 0.5);
        deflate(&mut x);
        x = x.qr().q();
        let ritz_values = |x: &DMatrix<f64>| {
            let h = x.transpose() * apply(x);
            SymmetricEigen::new((&h + h.transpose()) * 0.5)
        };
        let mut prev: Option<Vec<f64>> = None;
        let mut converged = false;
        for _ in 0..5000 {
            let mut y = apply(&x);
            deflate(&mut y);
            x = y.qr().q();
            let ritz = ritz_values(&x);
            let mut vals: Vec<f64> = ritz.eigenvalues.iter().copied().collect();
            vals.sort_by(|a, b| b.total_cmp(a));
            vals.truncate(k);
            if let Some(p) = &prev {
                if p.iter().zip(&vals).all(|(a, b)| (a - b).abs() < 1e-11) {
                    converged = true;
                    break;
                }
            }
            prev = Some(vals);
        }
        if !converged {
            return Err(Error::Eigen(format!(
                "subspace iteration did not converge on a {n}-node component"
            )));
        }
        let ritz = ritz_values(&x);
        let mut order: Vec<usize> = (0..block).collect();
        order.sort_by(|&a, &b| ritz.eigenvalues[b].total_cmp(&ritz.eigenvalues[a]));
        Ok(order[..k]
            .iter()
            .map(|&i| &x * ritz.eigenvectors.column(i))
            .collect())
    }
}

/// Orthonormal basis of span(`basis`) fixed by projecting the probes first;
/// any remaining directions come from the solver's own vectors.
fn canonical_basis(basis: &[DVector<f64>], probes: &[DVector<f64>]) -> Vec<DVector<f64>> {
    if basis.len() == 1 {
        return basis.to_vec();
    }
    let project = |v: &DVector<f64>| -> DVector<f64> {
        let mut out = DVector::zeros(v.len());
        for b in basis {
            out += b * b.dot(v);
        }
        out
    };
    let mut out: Vec<DVector<f64>> = Vec::with_capacity(basis.len());
    for candidate in probes.iter().map(project).chain(basis.iter().cloned()) {
        if out.len() == basis.len() {
            break;
        }
        let mut v = candidate;
        for _ in 0..2 {
            for q in &out {
                let c = q.dot(&v);
                v -= q * c;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            out.push(v / norm);
        }
    }
    out
}
