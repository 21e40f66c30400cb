//! Graph and batch containers plus the symmetric normalized adjacency
//! `D̃^{-1/2} (A + I) D̃^{-1/2}` consumed by every convolution layer.

use std::collections::BTreeSet;

use ndarray::{Array2, Axis};

use crate::error::{Error, Result};

/// A single undirected graph with dense node features.
///
/// Edges are stored once per undirected pair as `(u, v)` with `u < v`,
/// sorted. Self-loops are never stored; normalization adds them.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: Array2<f64>,
    edges: Vec<(usize, usize)>,
    label: Option<usize>,
    graph_id: usize,
}

impl Graph {
    /// Builds a graph, canonicalizing the edge list.
    ///
    /// Rejects zero-node graphs, out-of-range endpoints, self-loops and
    /// duplicate undirected pairs (including `(u, v)` alongside `(v, u)`).
    pub fn new(
        features: Array2<f64>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: Option<usize>,
        graph_id: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if n == 0 {
            return Err(Error::EmptyGraph);
        }
        let mut seen = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::InvalidGraph(format!(
                    "graph {graph_id}: edge ({u}, {v}) references a node outside [0, {n})"
                )));
            }
            if u == v {
                return Err(Error::InvalidGraph(format!(
                    "graph {graph_id}: self-loop on node {u}"
                )));
            }
            if !seen.insert((u.min(v), u.max(v))) {
                return Err(Error::InvalidGraph(format!(
                    "graph {graph_id}: duplicate edge ({u}, {v})"
                )));
            }
        }
        Ok(Self {
            features,
            edges: seen.into_iter().collect(),
            label,
            graph_id,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn graph_id(&self) -> usize {
        self.graph_id
    }

    /// Same graph with the class label removed.
    pub fn unlabeled(&self) -> Self {
        Self {
            label: None,
            ..self.clone()
        }
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    /// Degree of every node, not counting the implicit self-loop.
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n_nodes()];
        for &(u, v) in &self.edges {
            deg[u] += 1;
            deg[v] += 1;
        }
        deg
    }
}

/// Relabels nodes: node `i` of `g` becomes node `perm[i]` of the result.
pub fn permute_nodes(g: &Graph, perm: &[usize]) -> Result<Graph> {
    let n = g.n_nodes();
    if perm.len() != n {
        return Err(Error::InvalidPermutation(format!(
            "length {} for a graph with {n} nodes",
            perm.len()
        )));
    }
    let mut hit = vec![false; n];
    for &p in perm {
        if p >= n || std::mem::replace(&mut hit[p], true) {
            return Err(Error::InvalidPermutation(format!(
                "{perm:?} is not a bijection on [0, {n})"
            )));
        }
    }
    let mut features = Array2::zeros(g.features.raw_dim());
    for (i, row) in g.features.rows().into_iter().enumerate() {
        features.row_mut(perm[i]).assign(&row);
    }
    let edges = g.edges.iter().map(|&(u, v)| (perm[u], perm[v]));
    Graph::new(features, edges, g.label, g.graph_id)
}

/// Several graphs packed block-diagonally for batched message passing.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    features: Array2<f64>,
    /// Global node indices, `u < v`, never crossing graph boundaries.
    edges: Vec<(usize, usize)>,
    graph_index: Vec<usize>,
    offsets: Vec<usize>,
    labels: Vec<Option<usize>>,
    graph_ids: Vec<usize>,
}

/// Packs graphs into one batch. Every graph must share the feature width.
pub fn pack_batch(graphs: &[Graph]) -> Result<GraphBatch> {
    let first = graphs
        .first()
        .ok_or_else(|| Error::EmptyInput("cannot pack an empty graph list".into()))?;
    let d = first.feature_dim();
    let total: usize = graphs.iter().map(Graph::n_nodes).sum();
    let mut features = Array2::zeros((total, d));
    let mut edges = Vec::with_capacity(graphs.iter().map(|g| g.edges.len()).sum());
    let mut graph_index = Vec::with_capacity(total);
    let mut offsets = Vec::with_capacity(graphs.len() + 1);
    offsets.push(0);
    let mut start = 0;
    for (gi, g) in graphs.iter().enumerate() {
        if g.feature_dim() != d {
            return Err(Error::DimensionMismatch {
                context: format!("pack_batch (graph {})", g.graph_id),
                expected: d,
                found: g.feature_dim(),
            });
        }
        let n = g.n_nodes();
        features
            .slice_mut(ndarray::s![start..start + n, ..])
            .assign(&g.features);
        edges.extend(g.edges.iter().map(|&(u, v)| (u + start, v + start)));
        graph_index.extend(std::iter::repeat_n(gi, n));
        start += n;
        offsets.push(start);
    }
    Ok(GraphBatch {
        features,
        edges,
        graph_index,
        offsets,
        labels: graphs.iter().map(Graph::label).collect(),
        graph_ids: graphs.iter().map(Graph::graph_id).collect(),
    })
}

impl GraphBatch {
    pub fn n_graphs(&self) -> usize {
        self.labels.len()
    }

    pub fn n_nodes(&self) -> usize {
        self.features.nrows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn graph_index(&self) -> &[usize] {
        &self.graph_index
    }

    /// Node range of graph `g` is `offsets[g]..offsets[g + 1]`.
    pub fn offsets(&self) -> &[usize] {
        &self.offsets
    }

    pub fn labels(&self) -> &[Option<usize>] {
        &self.labels
    }

    pub fn graph_ids(&self) -> &[usize] {
        &self.graph_ids
    }

    /// Same topology and indexing with a replacement feature matrix.
    pub fn with_features(&self, features: Array2<f64>) -> Result<Self> {
        if features.dim() != self.features.dim() {
            return Err(Error::shape(format!(
                "replacement features {:?} do not match batch features {:?}",
                features.dim(),
                self.features.dim()
            )));
        }
        Ok(Self {
            features,
            ..self.clone()
        })
    }

    /// Same nodes and features with a replacement edge list (global
    /// indices). Edges must stay within one graph.
    pub fn with_edges(&self, edges: Vec<(usize, usize)>) -> Result<Self> {
        let mut canon = BTreeSet::new();
        for (u, v) in edges {
            if u >= self.n_nodes() || v >= self.n_nodes() || u == v {
                return Err(Error::InvalidGraph(format!("batch edge ({u}, {v}) is invalid")));
            }
            if self.graph_index[u] != self.graph_index[v] {
                return Err(Error::InvalidGraph(format!(
                    "batch edge ({u}, {v}) crosses graphs"
                )));
            }
            if !canon.insert((u.min(v), u.max(v))) {
                return Err(Error::InvalidGraph(format!("duplicate batch edge ({u}, {v})")));
            }
        }
        Ok(Self {
            edges: canon.into_iter().collect(),
            ..self.clone()
        })
    }

    /// Splits the batch back into its graphs.
    pub fn unpack(&self) -> Vec<Graph> {
        let mut per_graph: Vec<Vec<(usize, usize)>> = vec![Vec::new(); self.n_graphs()];
        for &(u, v) in &self.edges {
            let g = self.graph_index[u];
            let base = self.offsets[g];
            per_graph[g].push((u - base, v - base));
        }
        per_graph
            .into_iter()
            .enumerate()
            .map(|(g, edges)| {
                let range = self.offsets[g]..self.offsets[g + 1];
                let features = self.features.slice(ndarray::s![range, ..]).to_owned();
                Graph {
                    features,
                    edges,
                    label: self.labels[g],
                    graph_id: self.graph_ids[g],
                }
            })
            .collect()
    }
}

/// Compressed sparse row matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CsrMatrix {
    n: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Square matrix from unsorted `(row, col, value)` triplets; duplicate
    /// coordinates are summed.
    pub fn from_triplets(n: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|t| (t.0, t.1));
        let mut indptr = vec![0; n + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *values.last_mut().expect("duplicate follows an entry") += v;
                continue;
            }
            last = Some((r, c));
            indptr[r + 1] += 1;
            indices.push(c);
            values.push(v);
        }
        for i in 0..n {
            indptr[i + 1] += indptr[i];
        }
        Self {
            n,
            indptr,
            indices,
            values,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    /// Nonzeros of row `i` as `(column, value)`.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.indptr[i]..self.indptr[i + 1];
        self.indices[range.clone()]
            .iter()
            .copied()
            .zip(self.values[range].iter().copied())
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.row(i).find(|&(c, _)| c == j).map_or(0.0, |(_, v)| v)
    }

    /// `self · x`.
    pub fn matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "sparse matmul row mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for (i, mut out_row) in out.axis_iter_mut(Axis(0)).enumerate() {
            for (j, a) in self.row(i) {
                out_row.scaled_add(a, &x.row(j));
            }
        }
        out
    }

    /// `selfᵀ · x`.
    pub fn transpose_matmul(&self, x: &Array2<f64>) -> Array2<f64> {
        assert_eq!(x.nrows(), self.n, "sparse matmul row mismatch");
        let mut out = Array2::zeros((self.n, x.ncols()));
        for i in 0..self.n {
            for (j, a) in self.row(i) {
                let src = x.row(i);
                out.row_mut(j).scaled_add(a, &src);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n, self.n));
        for i in 0..self.n {
            for (j, v) in self.row(i) {
                out[[i, j]] = v;
            }
        }
        out
    }
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` over all nodes of a graph or batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedAdjacency {
    matrix: CsrMatrix,
}

impl NormalizedAdjacency {
    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.dim()
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        self.matrix.matmul(x)
    }

    pub fn to_dense(&self) -> Array2<f64> {
        self.matrix.to_dense()
    }
}

/// Anything with a node count and an undirected edge list.
pub trait Topology {
    fn node_count(&self) -> usize;
    fn undirected_edges(&self) -> &[(usize, usize)];
}

impl Topology for Graph {
    fn node_count(&self) -> usize {
        self.n_nodes()
    }
    fn undirected_edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

impl Topology for GraphBatch {
    fn node_count(&self) -> usize {
        self.n_nodes()
    }
    fn undirected_edges(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

pub fn normalize_adjacency<T: Topology + ?Sized>(g: &T) -> Result<NormalizedAdjacency> {
    let n = g.node_count();
    if n == 0 {
        return Err(Error::EmptyGraph);
    }
    let edges = g.undirected_edges();
    let mut degree = vec![1.0_f64; n];
    for &(u, v) in edges {
        degree[u] += 1.0;
        degree[v] += 1.0;
    }
    let inv_sqrt: Vec<f64> = degree.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut triplets = Vec::with_capacity(n + 2 * edges.len());
    for (i, s) in inv_sqrt.iter().enumerate() {
        triplets.push((i, i, s * s));
    }
    for &(u, v) in edges {
        let w = inv_sqrt[u] * inv_sqrt[v];
        triplets.push((u, v, w));
        triplets.push((v, u, w));
    }
    Ok(NormalizedAdjacency {
        matrix: CsrMatrix::from_triplets(n, triplets),
    })
}
