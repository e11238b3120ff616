//! Area adjacency graphs and the ICAR precision `Q = D - W`.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected simple graph over `n_areas` areas. Edges are stored as
/// `(i, j)` with `i < j`, sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdjacencyGraph {
    n_areas: usize,
    edges: Vec<(usize, usize)>,
}

impl AdjacencyGraph {
    pub fn new(n_areas: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        if n_areas == 0 {
            return Err(Error::invalid("adjacency graph needs at least one area"));
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i == j {
                return Err(Error::invalid(format!("self-loop on area {i}")));
            }
            if i >= n_areas || j >= n_areas {
                return Err(Error::invalid(format!(
                    "edge ({i}, {j}) has index out of range for {n_areas} areas"
                )));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            n_areas,
            edges: set.into_iter().collect(),
        })
    }

    /// Path `0 - 1 - ... - (n-1)`.
    pub fn path(n: usize) -> Result<Self> {
        Self::new(n, (1..n).map(|i| (i - 1, i)))
    }

    /// Rook-adjacency lattice with `rows * cols` areas, numbered row-major.
    pub fn grid(rows: usize, cols: usize) -> Result<Self> {
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                let id = r * cols + c;
                if c + 1 < cols {
                    edges.push((id, id + 1));
                }
                if r + 1 < rows {
                    edges.push((id, id + cols));
                }
            }
        }
        Self::new(rows * cols, edges)
    }

    /// Lattice with the most square shape holding exactly `n` areas; the last
    /// row may be partial.
    pub fn near_square(n: usize) -> Result<Self> {
        let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
        let mut edges = Vec::new();
        for id in 0..n {
            let c = id % cols;
            if c + 1 < cols && id + 1 < n {
                edges.push((id, id + 1));
            }
            if id + cols < n {
                edges.push((id, id + cols));
            }
        }
        Self::new(n, edges)
    }

    pub fn n_areas(&self) -> usize {
        self.n_areas
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_areas];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Connected-component label of every area, numbered from 0 in order of
    /// first appearance.
    pub fn component_labels(&self) -> Vec<usize> {
        let mut parent: Vec<usize> = (0..self.n_areas).collect();
        fn find(parent: &mut [usize], mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for &(i, j) in &self.edges {
            let (a, b) = (find(&mut parent, i), find(&mut parent, j));
            if a != b {
                parent[a] = b;
            }
        }
        let mut label_of_root = vec![usize::MAX; self.n_areas];
        let mut next = 0;
        (0..self.n_areas)
            .map(|i| {
                let root = find(&mut parent, i);
                if label_of_root[root] == usize::MAX {
                    label_of_root[root] = next;
                    next += 1;
                }
                label_of_root[root]
            })
            .collect()
    }

    /// Number of connected components, isolated areas included.
    pub fn n_components(&self) -> usize {
        self.component_labels().into_iter().max().map_or(0, |m| m + 1)
    }

    /// Subgraph on `keep` (ascending area indices), renumbered `0..keep.len()`.
    pub fn induced(&self, keep: &[usize]) -> Result<Self> {
        let mut new_id = vec![usize::MAX; self.n_areas];
        for (n, &k) in keep.iter().enumerate() {
            if k >= self.n_areas {
                return Err(Error::invalid(format!("area {k} out of range")));
            }
            new_id[k] = n;
        }
        let edges = self
            .edges
            .iter()
            .filter(|&&(i, j)| new_id[i] != usize::MAX && new_id[j] != usize::MAX)
            .map(|&(i, j)| (new_id[i], new_id[j]));
        Self::new(keep.len(), edges)
    }

    /// Serializes to the edge-list format read by [`parse_adjacency`].
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("n={}\n", self.n_areas);
        for (i, j) in &self.edges {
            out.push_str(&format!("{i} {j}\n"));
        }
        out
    }
}

/// Parses an edge list: a header `n=<count>`, then one `i j` pair per line.
/// Blank lines and lines starting with `#` are ignored.
pub fn parse_adjacency(text: &str) -> Result<AdjacencyGraph> {
    let mut n_areas: Option<usize> = None;
    let mut edges = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| Error::Parse { line: line_no, message };
        match n_areas {
            None => {
                let rest = line
                    .strip_prefix("n=")
                    .ok_or_else(|| parse_err(format!("expected header \"n=<count>\", found {line:?}")))?;
                let n = rest
                    .trim()
                    .parse::<usize>()
                    .map_err(|e| parse_err(format!("bad area count {rest:?}: {e}")))?;
                if n == 0 {
                    return Err(parse_err("area count must be positive".into()));
                }
                n_areas = Some(n);
            }
            Some(n) => {
                let mut parts = line.split_whitespace();
                let mut next = |what: &str| -> Result<usize> {
                    let tok = parts
                        .next()
                        .ok_or_else(|| parse_err(format!("missing {what} index")))?;
                    tok.parse::<usize>()
                        .map_err(|e| parse_err(format!("bad {what} index {tok:?}: {e}")))
                };
                let i = next("first")?;
                let j = next("second")?;
                if parts.next().is_some() {
                    return Err(parse_err(format!("expected two indices, found {line:?}")));
                }
                if i >= n || j >= n {
                    return Err(parse_err(format!("index out of range: ({i}, {j}) with n={n}")));
                }
                if i == j {
                    return Err(parse_err(format!("self-loop on area {i}")));
                }
                edges.push((i, j));
            }
        }
    }
    let n = n_areas.ok_or(Error::Parse {
        line: 0,
        message: "missing header \"n=<count>\"".into(),
    })?;
    AdjacencyGraph::new(n, edges)
}

/// ICAR structures derived from an adjacency graph.
///
/// `precision` is the singular `Q = D - W`. The square roots are taken from
/// the regularized `Q + jitter * I`: `inv_root * inv_root' = (Q + jitter I)^-1`
/// and `root * root = Q + jitter I`. Both roots are symmetric.
#[derive(Debug, Clone)]
pub struct IcarStructure {
    precision: DMatrix<f64>,
    degree: DVector<f64>,
    jitter: f64,
    inv_root: DMatrix<f64>,
    root: DMatrix<f64>,
    eigenvalues: DVector<f64>,
    components: Vec<usize>,
    n_components: usize,
}

impl IcarStructure {
    pub fn n_areas(&self) -> usize {
        self.degree.len()
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }

    pub fn degree(&self) -> &DVector<f64> {
        &self.degree
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn inv_root(&self) -> &DMatrix<f64> {
        &self.inv_root
    }

    pub fn root(&self) -> &DMatrix<f64> {
        &self.root
    }

    /// `Q + jitter * I`.
    pub fn regularized_precision(&self) -> DMatrix<f64> {
        let n = self.n_areas();
        &self.precision + DMatrix::identity(n, n) * self.jitter
    }

    /// Eigenvalues of `Q + jitter * I` in ascending order.
    pub fn eigenvalues(&self) -> &DVector<f64> {
        &self.eigenvalues
    }

    /// `log det(Q + jitter I)`.
    pub fn log_det_regularized(&self) -> f64 {
        self.eigenvalues.iter().map(|l| l.ln()).sum()
    }

    pub fn n_components(&self) -> usize {
        self.n_components
    }

    /// Connected-component label per area.
    pub fn components(&self) -> &[usize] {
        &self.components
    }

    /// Subtracts the within-component mean so each component sums to zero.
    pub fn recenter(&self, x: &mut DVector<f64>) {
        let mut sums = vec![0.0; self.n_components];
        let mut counts = vec![0usize; self.n_components];
        for (i, &c) in self.components.iter().enumerate() {
            sums[c] += x[i];
            counts[c] += 1;
        }
        for (i, &c) in self.components.iter().enumerate() {
            x[i] -= sums[c] / counts[c] as f64;
        }
    }

    pub fn is_connected(&self) -> bool {
        self.n_components == 1
    }

    /// Rank of `Q`: areas minus connected components.
    pub fn rank(&self) -> usize {
        self.n_areas() - self.n_components
    }

    /// `x' Q x`.
    pub fn quadratic_form(&self, x: &DVector<f64>) -> f64 {
        x.dot(&(&self.precision * x))
    }
}

/// Default jitter: `1e-6 * mean(degree)`.
pub fn default_jitter(graph: &AdjacencyGraph) -> f64 {
    let deg = graph.degrees();
    1e-6 * deg.iter().sum::<usize>() as f64 / deg.len() as f64
}

pub fn build_icar(graph: &AdjacencyGraph, jitter: Option<f64>) -> Result<IcarStructure> {
    if graph.edges().is_empty() {
        return Err(Error::invalid(
            "ICAR prior needs at least one adjacency edge; use the non-spatial model",
        ));
    }
    let jitter = jitter.unwrap_or_else(|| default_jitter(graph));
    if !(jitter.is_finite() && jitter > 0.0) {
        return Err(Error::invalid(format!("ICAR jitter must be positive, got {jitter}")));
    }
    let n = graph.n_areas();
    let degree = DVector::from_iterator(n, graph.degrees().into_iter().map(|d| d as f64));
    let mut precision = DMatrix::from_diagonal(&degree);
    for &(i, j) in graph.edges() {
        precision[(i, j)] = -1.0;
        precision[(j, i)] = -1.0;
    }

    let regularized = &precision + DMatrix::identity(n, n) * jitter;
    let eig = SymmetricEigen::new(regularized);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let eigenvalues = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    if eigenvalues[0] <= 0.0 {
        return Err(Error::NotPositiveDefinite("regularized ICAR precision"));
    }
    let u = DMatrix::from_fn(n, n, |r, c| eig.eigenvectors[(r, order[c])]);
    let scaled = |f: fn(f64) -> f64| {
        let mut m = u.clone();
        for (c, lam) in eigenvalues.iter().enumerate() {
            m.column_mut(c).scale_mut(f(*lam));
        }
        &m * u.transpose()
    };
    let inv_root = scaled(|l| 1.0 / l.sqrt());
    let root = scaled(f64::sqrt);

    let components = graph.component_labels();
    let n_components = components.iter().max().map_or(0, |m| m + 1);
    if n_components > 1 {
        log::warn!("adjacency graph has {n_components} connected components");
    }
    Ok(IcarStructure {
        precision,
        degree,
        jitter,
        inv_root,
        root,
        eigenvalues,
        components,
        n_components,
    })
}
