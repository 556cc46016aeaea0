//! Undirected node-featured graphs and the structural queries the
//! augmentation and encoder code rely on.

use std::collections::{BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An undirected simple graph with one feature row per node.
///
/// Node ids are kept in ascending order and feature rows follow that order.
/// Edges are stored once as `(u, v)` with `u < v`. Values are immutable once
/// built; every alteration returns a new graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledGraph {
    graph_id: usize,
    nodes: Vec<usize>,
    edges: BTreeSet<(usize, usize)>,
    features: Vec<f64>,
    feature_dim: usize,
    label: Option<usize>,
}

impl LabeledGraph {
    /// Builds a graph from arbitrary node ids. Duplicate or reversed edges
    /// collapse into one; self-loops and unknown endpoints are rejected.
    pub fn new(
        graph_id: usize,
        nodes: Vec<usize>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        features: Vec<Vec<f64>>,
        label: Option<usize>,
    ) -> Result<Self> {
        if nodes.len() != features.len() {
            return Err(Error::invalid(format!(
                "{} nodes but {} feature rows",
                nodes.len(),
                features.len()
            )));
        }
        let feature_dim = features.first().map_or(0, Vec::len);
        if features.iter().any(|f| f.len() != feature_dim) {
            return Err(Error::invalid("feature rows differ in dimension"));
        }
        let mut order: Vec<usize> = (0..nodes.len()).collect();
        order.sort_by_key(|&i| nodes[i]);
        let sorted: Vec<usize> = order.iter().map(|&i| nodes[i]).collect();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::invalid("duplicate node id"));
        }
        let mut flat = Vec::with_capacity(nodes.len() * feature_dim);
        for &i in &order {
            flat.extend_from_slice(&features[i]);
        }
        let mut g = Self {
            graph_id,
            nodes: sorted,
            edges: BTreeSet::new(),
            features: flat,
            feature_dim,
            label,
        };
        for (u, v) in edges {
            if u == v {
                return Err(Error::invalid(format!("self-loop on node {u}")));
            }
            if g.index_of(u).is_none() || g.index_of(v).is_none() {
                return Err(Error::invalid(format!("edge ({u},{v}) has an unknown endpoint")));
            }
            g.edges.insert((u.min(v), u.max(v)));
        }
        Ok(g)
    }

    /// Graph with dense ids `0..n`.
    pub fn from_edges(
        graph_id: usize,
        features: Vec<Vec<f64>>,
        edges: impl IntoIterator<Item = (usize, usize)>,
        label: Option<usize>,
    ) -> Result<Self> {
        let n = features.len();
        Self::new(graph_id, (0..n).collect(), edges, features, label)
    }

    pub(crate) fn from_parts(
        graph_id: usize,
        nodes: Vec<usize>,
        edges: BTreeSet<(usize, usize)>,
        features: Vec<f64>,
        feature_dim: usize,
        label: Option<usize>,
    ) -> Self {
        let g = Self {
            graph_id,
            nodes,
            edges,
            features,
            feature_dim,
            label,
        };
        debug_assert!(g.check_invariants().is_ok(), "{:?}", g.check_invariants());
        g
    }

    pub fn graph_id(&self) -> usize {
        self.graph_id
    }

    pub fn label(&self) -> Option<usize> {
        self.label
    }

    pub fn with_label(mut self, label: Option<usize>) -> Self {
        self.label = label;
        self
    }

    pub fn with_graph_id(mut self, graph_id: usize) -> Self {
        self.graph_id = graph_id;
        self
    }

    pub fn nodes(&self) -> &[usize] {
        &self.nodes
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Flat row-major `n × feature_dim` feature matrix.
    pub fn features(&self) -> &[f64] {
        &self.features
    }

    pub fn feature_row(&self, index: usize) -> &[f64] {
        &self.features[index * self.feature_dim..(index + 1) * self.feature_dim]
    }

    /// Position of a node id in [`nodes`](Self::nodes).
    pub fn index_of(&self, id: usize) -> Option<usize> {
        self.nodes.binary_search(&id).ok()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        self.edges.contains(&(u.min(v), u.max(v)))
    }

    /// True when ids are exactly `0..n`.
    pub fn is_dense(&self) -> bool {
        self.nodes.iter().enumerate().all(|(i, &id)| i == id)
    }

    fn require_node(&self, u: usize) -> Result<usize> {
        self.index_of(u)
            .ok_or_else(|| Error::invalid(format!("unknown node id {u}")))
    }

    /// Neighbor lists by node index (not id), each sorted.
    pub fn adjacency_lists(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.nodes.len()];
        for &(u, v) in &self.edges {
            let (iu, iv) = (self.index_of(u).unwrap(), self.index_of(v).unwrap());
            adj[iu].push(iv);
            adj[iv].push(iu);
        }
        for a in &mut adj {
            a.sort_unstable();
        }
        adj
    }

    pub fn neighbors(&self, u: usize) -> Result<BTreeSet<usize>> {
        self.require_node(u)?;
        Ok(self
            .edges
            .iter()
            .filter_map(|&(a, b)| match (a == u, b == u) {
                (true, _) => Some(b),
                (_, true) => Some(a),
                _ => None,
            })
            .collect())
    }

    pub fn degree(&self, u: usize) -> Result<usize> {
        Ok(self.neighbors(u)?.len())
    }

    /// Whether a path joins two distinct nodes.
    pub fn connected(&self, u: usize, v: usize) -> Result<bool> {
        if u == v {
            return Err(Error::invalid("connected() needs two distinct nodes"));
        }
        let (iu, iv) = (self.require_node(u)?, self.require_node(v)?);
        let comp = self.component_labels();
        Ok(comp[iu] == comp[iv])
    }

    /// Connected-component label for every node index. Labels are assigned
    /// in order of the smallest node index in each component.
    pub fn component_labels(&self) -> Vec<usize> {
        let adj = self.adjacency_lists();
        let mut label = vec![usize::MAX; adj.len()];
        let mut next = 0;
        let mut queue = VecDeque::new();
        for s in 0..adj.len() {
            if label[s] != usize::MAX {
                continue;
            }
            label[s] = next;
            queue.push_back(s);
            while let Some(x) = queue.pop_front() {
                for &y in &adj[x] {
                    if label[y] == usize::MAX {
                        label[y] = next;
                        queue.push_back(y);
                    }
                }
            }
            next += 1;
        }
        label
    }

    /// All node sets of `size` whose induced subgraph is complete, as sorted
    /// id lists in lexicographic order.
    pub fn find_cliques(&self, size: usize) -> Result<Vec<Vec<usize>>> {
        if size < 2 {
            return Err(Error::invalid("clique size must be at least 2"));
        }
        let adj = self.adjacency_lists();
        let mut out = Vec::new();
        let mut current = Vec::with_capacity(size);
        for start in 0..adj.len() {
            current.push(start);
            let cands: Vec<usize> = adj[start].iter().copied().filter(|&w| w > start).collect();
            extend_clique(&adj, &mut current, &cands, size, &mut out);
            current.pop();
        }
        Ok(out
            .into_iter()
            .map(|c| c.into_iter().map(|i| self.nodes[i]).collect())
            .collect())
    }

    /// Renumbers nodes to `0..n` keeping their relative order.
    pub fn canonicalize(&self) -> LabeledGraph {
        if self.is_dense() {
            return self.clone();
        }
        let edges = self
            .edges
            .iter()
            .map(|&(u, v)| (self.index_of(u).unwrap(), self.index_of(v).unwrap()))
            .collect();
        Self::from_parts(
            self.graph_id,
            (0..self.nodes.len()).collect(),
            edges,
            self.features.clone(),
            self.feature_dim,
            self.label,
        )
    }

    /// Dense symmetric 0/1 adjacency in node-index order.
    pub fn adjacency_matrix(&self) -> Tensor {
        let n = self.nodes.len();
        let mut a = Tensor::zeros(&[n, n]);
        for &(u, v) in &self.edges {
            let (iu, iv) = (self.index_of(u).unwrap(), self.index_of(v).unwrap());
            a.set(iu, iv, 1.0);
            a.set(iv, iu, 1.0);
        }
        a
    }

    pub fn feature_matrix(&self) -> Tensor {
        Tensor::matrix(self.nodes.len(), self.feature_dim, self.features.clone())
            .expect("feature buffer matches node count")
    }

    /// Verifies every structural invariant; used by tests and debug builds.
    pub fn check_invariants(&self) -> Result<()> {
        if self.nodes.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid("node ids not strictly ascending"));
        }
        if self.features.len() != self.nodes.len() * self.feature_dim {
            return Err(Error::invalid("feature buffer size mismatch"));
        }
        for &(u, v) in &self.edges {
            if u >= v {
                return Err(Error::invalid(format!("edge ({u},{v}) not canonical")));
            }
            if self.index_of(u).is_none() || self.index_of(v).is_none() {
                return Err(Error::invalid(format!("edge ({u},{v}) dangling")));
            }
        }
        Ok(())
    }
}

fn extend_clique(
    adj: &[Vec<usize>],
    current: &mut Vec<usize>,
    cands: &[usize],
    size: usize,
    out: &mut Vec<Vec<usize>>,
) {
    if current.len() == size {
        out.push(current.clone());
        return;
    }
    for (k, &w) in cands.iter().enumerate() {
        current.push(w);
        let next: Vec<usize> = cands[k + 1..]
            .iter()
            .copied()
            .filter(|x| adj[w].binary_search(x).is_ok())
            .collect();
        extend_clique(adj, current, &next, size, out);
        current.pop();
    }
}
