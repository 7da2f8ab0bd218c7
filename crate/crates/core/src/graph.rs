//! Attributed graphs, class splits and the on-disk dataset layout.
//!
//! A dataset directory holds:
//!
//! * `edges.tsv` - two integer columns, one undirected edge per line
//! * `features.csv` (V rows of comma-separated reals) or `features.bin`
//!   (8-byte header of two little-endian `u32` V, F_in, then row-major `f32`)
//! * `labels.txt` - one class id per line
//! * `split.json` - `{"base": [...], "dev": [...], "test": [...]}`

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An undirected attributed graph with node labels.
///
/// Edges are stored once per unordered pair as `(min, max)`. Neighbor lists
/// are derived at construction.
#[derive(Debug, Clone)]
pub struct Graph {
    num_nodes: usize,
    edges: Vec<(usize, usize)>,
    features: Array2<f32>,
    labels: Vec<usize>,
    neighbors: Vec<Vec<usize>>,
}

/// Label-free view of a graph. Pretraining only ever sees this.
#[derive(Debug, Clone, Copy)]
pub struct GraphStructure<'a> {
    pub num_nodes: usize,
    pub edges: &'a [(usize, usize)],
    pub neighbors: &'a [Vec<usize>],
    pub features: &'a Array2<f32>,
}

impl Graph {
    /// Builds a graph, symmetrizing and de-duplicating `edges`.
    pub fn new(
        num_nodes: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Array2<f32>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if features.nrows() != num_nodes {
            return Err(Error::Integrity(format!(
                "feature matrix has {} rows, expected {num_nodes}",
                features.nrows()
            )));
        }
        if labels.len() != num_nodes {
            return Err(Error::Integrity(format!(
                "{} labels for {num_nodes} nodes",
                labels.len()
            )));
        }
        if features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Integrity("non-finite feature value".into()));
        }
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= num_nodes || v >= num_nodes {
                return Err(Error::Integrity(format!(
                    "edge ({u}, {v}) out of range for {num_nodes} nodes"
                )));
            }
            set.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut neighbors = vec![Vec::new(); num_nodes];
        for &(u, v) in &edges {
            neighbors[u].push(v);
            if u != v {
                neighbors[v].push(u);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            num_nodes,
            edges,
            features,
            labels,
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn features(&self) -> &Array2<f32> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn neighbors(&self, node: usize) -> &[usize] {
        &self.neighbors[node]
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }

    /// Distinct class ids, ascending.
    pub fn classes(&self) -> Vec<usize> {
        let set: BTreeSet<_> = self.labels.iter().copied().collect();
        set.into_iter().collect()
    }

    pub fn structure(&self) -> GraphStructure<'_> {
        GraphStructure {
            num_nodes: self.num_nodes,
            edges: &self.edges,
            neighbors: &self.neighbors,
            features: &self.features,
        }
    }

    /// Copy of this graph without the listed edges (used for held-out
    /// link evaluation).
    pub fn without_edges(&self, removed: &[(usize, usize)]) -> Result<Graph> {
        let removed: BTreeSet<_> = removed.iter().map(|&(u, v)| (u.min(v), u.max(v))).collect();
        Graph::new(
            self.num_nodes,
            self.edges.iter().copied().filter(|e| !removed.contains(e)),
            self.features.clone(),
            self.labels.clone(),
        )
    }
}

impl GraphStructure<'_> {
    pub fn degree(&self, node: usize) -> usize {
        self.neighbors[node].len()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.neighbors[u].binary_search(&v).is_ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Base,
    Dev,
    Test,
}

impl fmt::Display for SplitPart {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitPart::Base => "base",
            SplitPart::Dev => "dev",
            SplitPart::Test => "test",
        })
    }
}

impl std::str::FromStr for SplitPart {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(SplitPart::Base),
            "dev" => Ok(SplitPart::Dev),
            "test" => Ok(SplitPart::Test),
            other => Err(Error::Config(format!("unknown split part {other:?}"))),
        }
    }
}

/// Disjoint base / dev / test class sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub base: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl ClassSplit {
    pub fn new(base: Vec<usize>, dev: Vec<usize>, test: Vec<usize>) -> Result<Self> {
        let split = Self { base, dev, test };
        let mut seen = BTreeSet::new();
        for &c in split.base.iter().chain(&split.dev).chain(&split.test) {
            if !seen.insert(c) {
                return Err(Error::Integrity(format!(
                    "class {c} appears in more than one split part"
                )));
            }
        }
        Ok(split)
    }

    pub fn part(&self, part: SplitPart) -> &[usize] {
        match part {
            SplitPart::Base => &self.base,
            SplitPart::Dev => &self.dev,
            SplitPart::Test => &self.test,
        }
    }

    /// Checks that every class present in `graph` belongs to some part.
    pub fn check_covers(&self, graph: &Graph) -> Result<()> {
        let all: BTreeSet<_> = self
            .base
            .iter()
            .chain(&self.dev)
            .chain(&self.test)
            .copied()
            .collect();
        for c in graph.classes() {
            if !all.contains(&c) {
                return Err(Error::Integrity(format!(
                    "class {c} is not assigned to base, dev or test"
                )));
            }
        }
        Ok(())
    }
}

/// Loads a dataset directory. Node order is file order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<(Graph, ClassSplit)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::load(dir, "not a directory"));
    }
    let labels = read_labels(&dir.join("labels.txt"))?;
    let features = if dir.join("features.bin").exists() {
        read_features_bin(&dir.join("features.bin"))?
    } else {
        read_features_csv(&dir.join("features.csv"))?
    };
    if features.nrows() != labels.len() {
        return Err(Error::Integrity(format!(
            "features have {} rows but labels.txt has {} entries",
            features.nrows(),
            labels.len()
        )));
    }
    let edges = read_edges(&dir.join("edges.tsv"))?;
    let graph = Graph::new(labels.len(), edges, features, labels)?;
    let split = read_split(&dir.join("split.json"))?;
    split.check_covers(&graph)?;
    Ok((graph, split))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::load(path, e))
}

fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_text(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            l.trim()
                .parse()
                .map_err(|e| Error::load(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

fn read_edges(path: &Path) -> Result<Vec<(usize, usize)>> {
    let text = read_text(path)?;
    let mut edges = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut cols = line.split_whitespace();
        let mut next = || -> Result<usize> {
            cols.next()
                .ok_or_else(|| Error::load(path, format!("line {}: expected two columns", i + 1)))?
                .parse()
                .map_err(|e| Error::load(path, format!("line {}: {e}", i + 1)))
        };
        let u = next()?;
        let v = next()?;
        edges.push((u, v));
    }
    Ok(edges)
}

fn read_features_csv(path: &Path) -> Result<Array2<f32>> {
    let text = read_text(path)?;
    let mut data = Vec::new();
    let mut rows = 0;
    let mut width = None;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let before = data.len();
        for cell in line.split(',') {
            let x: f32 = cell
                .trim()
                .parse()
                .map_err(|e| Error::load(path, format!("line {}: {e}", i + 1)))?;
            data.push(x);
        }
        let w = data.len() - before;
        match width {
            None => width = Some(w),
            Some(expected) if expected != w => {
                return Err(Error::Integrity(format!(
                    "features.csv line {} has {w} columns, expected {expected}",
                    i + 1
                )))
            }
            _ => {}
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width.unwrap_or(0)), data)
        .map_err(|e| Error::Integrity(e.to_string()))
}

fn read_features_bin(path: &Path) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, e))?;
    if bytes.len() < 8 {
        return Err(Error::load(path, "truncated header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[8..];
    if body.len() != rows * cols * 4 {
        return Err(Error::Integrity(format!(
            "features.bin declares {rows}x{cols} but holds {} bytes",
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Array2::from_shape_vec((rows, cols), data).map_err(|e| Error::Integrity(e.to_string()))
}

fn read_split(path: &Path) -> Result<ClassSplit> {
    let text = read_text(path)?;
    let split: ClassSplit = serde_json::from_str(&text).map_err(|e| Error::load(path, e))?;
    ClassSplit::new(split.base, split.dev, split.test)
}

/// Writes `graph` and `split` in the dataset directory layout
/// (`features.bin` for features).
pub fn write_dataset(dir: impl AsRef<Path>, graph: &Graph, split: &ClassSplit) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let mut edges = String::new();
    for &(u, v) in graph.edges() {
        edges.push_str(&format!("{u}\t{v}\n"));
    }
    fs::write(dir.join("edges.tsv"), edges)?;
    let labels: String = graph.labels().iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.join("labels.txt"), labels)?;
    let feats = graph.features();
    let mut bin = Vec::with_capacity(8 + feats.len() * 4);
    bin.extend_from_slice(&(feats.nrows() as u32).to_le_bytes());
    bin.extend_from_slice(&(feats.ncols() as u32).to_le_bytes());
    for x in feats.iter() {
        bin.extend_from_slice(&x.to_le_bytes());
    }
    fs::write(dir.join("features.bin"), bin)?;
    fs::write(dir.join("split.json"), serde_json::to_string_pretty(split)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn write(dir: &Path, name: &str, body: &str) {
        fs::write(dir.join(name), body).unwrap();
    }

    #[test]
    fn empty_edge_file_gives_isolated_nodes() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "edges.tsv", "");
        write(dir.path(), "features.csv", "1,0\n0,1\n1,1\n0,0\n");
        write(dir.path(), "labels.txt", "0\n1\n2\n0\n");
        write(dir.path(), "split.json", r#"{"base":[0],"dev":[1],"test":[2]}"#);
        let (g, split) = load_dataset(dir.path()).unwrap();
        assert_eq!(g.num_nodes(), 4);
        assert_eq!(g.num_edges(), 0);
        assert!(g.neighbors(2).is_empty());
        assert_eq!(split.test, vec![2]);
    }

    #[test]
    fn missing_file_is_load_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "features.csv", "1\n");
        write(dir.path(), "split.json", r#"{"base":[0],"dev":[],"test":[]}"#);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Load { .. })));
    }

    #[test]
    fn row_mismatch_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "edges.tsv", "0\t1\n");
        write(dir.path(), "features.csv", "1,0\n0,1\n");
        write(dir.path(), "labels.txt", "0\n1\n0\n");
        write(dir.path(), "split.json", r#"{"base":[0],"dev":[1],"test":[]}"#);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn edge_out_of_range_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "edges.tsv", "0\t7\n");
        write(dir.path(), "features.csv", "1,0\n0,1\n");
        write(dir.path(), "labels.txt", "0\n1\n");
        write(dir.path(), "split.json", r#"{"base":[0],"dev":[1],"test":[]}"#);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }

    #[test]
    fn duplicate_and_reversed_edges_collapse() {
        let g = Graph::new(
            3,
            vec![(0, 1), (1, 0), (0, 1), (2, 1)],
            Array2::zeros((3, 1)),
            vec![0, 0, 0],
        )
        .unwrap();
        assert_eq!(g.edges(), &[(0, 1), (1, 2)]);
        assert!(g.has_edge(1, 0));
        assert!(!g.has_edge(0, 2));
    }

    #[test]
    fn overlapping_split_rejected() {
        assert!(ClassSplit::new(vec![0, 1], vec![1], vec![2]).is_err());
    }

    #[test]
    fn binary_roundtrip() {
        let g = Graph::new(
            3,
            vec![(0, 1), (1, 2)],
            array![[0.5f32, -1.0], [2.0, 0.0], [0.0, 3.25]],
            vec![0, 1, 2],
        )
        .unwrap();
        let split = ClassSplit::new(vec![0], vec![1], vec![2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &g, &split).unwrap();
        let (h, s) = load_dataset(dir.path()).unwrap();
        assert_eq!(h.features(), g.features());
        assert_eq!(h.edges(), g.edges());
        assert_eq!(h.labels(), g.labels());
        assert_eq!(s, split);
    }

    #[test]
    fn uncovered_class_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "edges.tsv", "");
        write(dir.path(), "features.csv", "1\n0\n");
        write(dir.path(), "labels.txt", "0\n5\n");
        write(dir.path(), "split.json", r#"{"base":[0],"dev":[],"test":[]}"#);
        assert!(matches!(load_dataset(dir.path()), Err(Error::Integrity(_))));
    }
}
