//! Graph alteration operations and the consecutive random augmentation
//! sampler.
//!
//! Each step picks uniformly among whitelisted kinds that apply to the
//! current intermediate graph, then uniformly among that kind's operands,
//! which are enumerated exactly. Operands in a trace refer to node ids of
//! the graph the step was applied to, so replaying a trace step by step
//! reproduces the augmented graph.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LabeledGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum OpKind {
    EdgeDeletion,
    NodeDeletion,
    EdgeInsertion,
    NodeInsertion,
}

impl OpKind {
    pub const ALL: [OpKind; 4] = [
        OpKind::EdgeDeletion,
        OpKind::NodeDeletion,
        OpKind::EdgeInsertion,
        OpKind::NodeInsertion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::EdgeDeletion => "EdgeDeletion",
            OpKind::NodeDeletion => "NodeDeletion",
            OpKind::EdgeInsertion => "EdgeInsertion",
            OpKind::NodeInsertion => "NodeInsertion",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "edgedeletion" | "edgedel" => Ok(OpKind::EdgeDeletion),
            "nodedeletion" | "nodedel" => Ok(OpKind::NodeDeletion),
            "edgeinsertion" | "edgeins" => Ok(OpKind::EdgeInsertion),
            "nodeinsertion" | "nodeins" => Ok(OpKind::NodeInsertion),
            _ => Err(Error::Config(format!("unknown alteration kind '{s}'"))),
        }
    }
}

/// One recorded alteration step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlterationOp {
    EdgeDeletion { u: usize, v: usize },
    NodeDeletion { node: usize },
    EdgeInsertion { u: usize, v: usize },
    NodeInsertion { clique: Vec<usize> },
    /// Padding when no whitelisted kind applied.
    NoOp,
}

impl AlterationOp {
    pub fn kind(&self) -> Option<OpKind> {
        match self {
            AlterationOp::EdgeDeletion { .. } => Some(OpKind::EdgeDeletion),
            AlterationOp::NodeDeletion { .. } => Some(OpKind::NodeDeletion),
            AlterationOp::EdgeInsertion { .. } => Some(OpKind::EdgeInsertion),
            AlterationOp::NodeInsertion { .. } => Some(OpKind::NodeInsertion),
            AlterationOp::NoOp => None,
        }
    }

    pub fn apply(&self, g: &LabeledGraph) -> Result<LabeledGraph> {
        match self {
            AlterationOp::EdgeDeletion { u, v } => edge_deletion(g, (*u, *v)),
            AlterationOp::NodeDeletion { node } => node_deletion(g, *node),
            AlterationOp::EdgeInsertion { u, v } => edge_insertion(g, *u, *v),
            AlterationOp::NodeInsertion { clique } => node_insertion(g, clique),
            AlterationOp::NoOp => Ok(g.clone()),
        }
    }
}

impl fmt::Display for AlterationOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AlterationOp::EdgeDeletion { u, v } => write!(f, "EdgeDeletion({u},{v})"),
            AlterationOp::NodeDeletion { node } => write!(f, "NodeDeletion({node})"),
            AlterationOp::EdgeInsertion { u, v } => write!(f, "EdgeInsertion({u},{v})"),
            AlterationOp::NodeInsertion { clique } => {
                let ids: Vec<String> = clique.iter().map(ToString::to_string).collect();
                write!(f, "NodeInsertion({})", ids.join(","))
            }
            AlterationOp::NoOp => write!(f, "NoOp()"),
        }
    }
}

impl FromStr for AlterationOp {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::invalid(format!("malformed trace line '{s}'"));
        let open = s.find('(').ok_or_else(bad)?;
        if !s.ends_with(')') {
            return Err(bad());
        }
        let kind = &s[..open];
        let inner = &s[open + 1..s.len() - 1];
        let args: Vec<usize> = if inner.trim().is_empty() {
            Vec::new()
        } else {
            inner
                .split(',')
                .map(|a| a.trim().parse::<usize>().map_err(|_| bad()))
                .collect::<Result<_>>()?
        };
        if kind == "NoOp" {
            return if args.is_empty() { Ok(AlterationOp::NoOp) } else { Err(bad()) };
        }
        let op = match (kind.parse::<OpKind>().map_err(|_| bad())?, args.as_slice()) {
            (OpKind::EdgeDeletion, &[u, v]) => AlterationOp::EdgeDeletion { u, v },
            (OpKind::NodeDeletion, &[node]) => AlterationOp::NodeDeletion { node },
            (OpKind::EdgeInsertion, &[u, v]) => AlterationOp::EdgeInsertion { u, v },
            (OpKind::NodeInsertion, c) if c.len() >= 2 => AlterationOp::NodeInsertion { clique: c.to_vec() },
            _ => return Err(bad()),
        };
        Ok(op)
    }
}

/// Line-oriented trace text, one `KIND(args)` per line.
pub fn format_trace(trace: &[AlterationOp]) -> String {
    trace.iter().map(|op| format!("{op}\n")).collect()
}

pub fn parse_trace(text: &str) -> Result<Vec<AlterationOp>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub num_steps: usize,
    pub seed: u64,
    pub op_whitelist: Vec<OpKind>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            num_steps: 3,
            seed: 0,
            op_whitelist: OpKind::ALL.to_vec(),
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_steps == 0 {
            return Err(Error::Config("augment num_steps must be at least 1".into()));
        }
        if self.op_whitelist.is_empty() {
            return Err(Error::Config("augment op whitelist is empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentedGraph {
    pub graph: LabeledGraph,
    pub origin_id: usize,
    pub trace: Vec<AlterationOp>,
}

impl AugmentedGraph {
    /// Steps that were padded because nothing whitelisted applied.
    pub fn padded_steps(&self) -> usize {
        self.trace.iter().filter(|op| **op == AlterationOp::NoOp).count()
    }
}

pub fn edge_deletion(g: &LabeledGraph, (u, v): (usize, usize)) -> Result<LabeledGraph> {
    if !g.has_edge(u, v) {
        return Err(Error::invalid(format!("edge ({u},{v}) is not in the graph")));
    }
    let mut edges = g.edges().clone();
    edges.remove(&(u.min(v), u.max(v)));
    Ok(LabeledGraph::from_parts(
        g.graph_id(),
        g.nodes().to_vec(),
        edges,
        g.features().to_vec(),
        g.feature_dim(),
        g.label(),
    ))
}

/// Removes `u` and its incident edges; the result is renumbered to `0..n-1`.
pub fn node_deletion(g: &LabeledGraph, u: usize) -> Result<LabeledGraph> {
    let idx = g
        .index_of(u)
        .ok_or_else(|| Error::invalid(format!("unknown node id {u}")))?;
    if g.num_nodes() < 2 {
        return Err(Error::NotApplicable("cannot delete the last node".into()));
    }
    let mut nodes = g.nodes().to_vec();
    nodes.remove(idx);
    let d = g.feature_dim();
    let mut features = g.features().to_vec();
    features.drain(idx * d..(idx + 1) * d);
    let edges = g
        .edges()
        .iter()
        .copied()
        .filter(|&(a, b)| a != u && b != u)
        .collect();
    Ok(LabeledGraph::from_parts(g.graph_id(), nodes, edges, features, d, g.label()).canonicalize())
}

/// Adds `(u, v)` when the pair is not adjacent but joined by some path.
pub fn edge_insertion(g: &LabeledGraph, u: usize, v: usize) -> Result<LabeledGraph> {
    if u == v {
        return Err(Error::NotApplicable("edge insertion needs two distinct nodes".into()));
    }
    if g.has_edge(u, v) {
        return Err(Error::NotApplicable(format!("nodes {u} and {v} are already adjacent")));
    }
    if !g.connected(u, v)? {
        return Err(Error::NotApplicable(format!("no path between {u} and {v}")));
    }
    let mut edges = g.edges().clone();
    edges.insert((u.min(v), u.max(v)));
    Ok(LabeledGraph::from_parts(
        g.graph_id(),
        g.nodes().to_vec(),
        edges,
        g.features().to_vec(),
        g.feature_dim(),
        g.label(),
    ))
}

/// Replaces the edges inside clique `clique` by a new hub node joined to
/// every member. The hub's features are the mean of the members' features
/// and its id is one past the largest existing id.
pub fn node_insertion(g: &LabeledGraph, clique: &[usize]) -> Result<LabeledGraph> {
    if clique.len() < 2 {
        return Err(Error::invalid("node insertion needs a clique of at least 2 nodes"));
    }
    let members: BTreeSet<usize> = clique.iter().copied().collect();
    if members.len() != clique.len() {
        return Err(Error::invalid("clique has repeated nodes"));
    }
    let mut idx = Vec::with_capacity(clique.len());
    for &c in &members {
        idx.push(
            g.index_of(c)
                .ok_or_else(|| Error::invalid(format!("unknown node id {c}")))?,
        );
    }
    let ms: Vec<usize> = members.iter().copied().collect();
    for (i, &a) in ms.iter().enumerate() {
        for &b in &ms[i + 1..] {
            if !g.has_edge(a, b) {
                return Err(Error::invalid(format!("{ms:?} is not a clique: ({a},{b}) missing")));
            }
        }
    }
    let hub = g.nodes().last().map_or(0, |&m| m + 1);
    let mut edges = g.edges().clone();
    for (i, &a) in ms.iter().enumerate() {
        for &b in &ms[i + 1..] {
            edges.remove(&(a, b));
        }
    }
    for &a in &ms {
        edges.insert((a, hub));
    }
    let d = g.feature_dim();
    let mut mean = vec![0.0; d];
    for &i in &idx {
        for (m, x) in mean.iter_mut().zip(g.feature_row(i)) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= idx.len() as f64;
    }
    let mut nodes = g.nodes().to_vec();
    nodes.push(hub);
    let mut features = g.features().to_vec();
    features.extend_from_slice(&mean);
    Ok(LabeledGraph::from_parts(g.graph_id(), nodes, edges, features, d, g.label()))
}

/// Non-adjacent pairs `(u, v)`, `u < v`, lying in the same component.
pub fn edge_insertion_candidates(g: &LabeledGraph) -> Vec<(usize, usize)> {
    let comp = g.component_labels();
    let ids = g.nodes();
    let mut out = Vec::new();
    for i in 0..ids.len() {
        for j in i + 1..ids.len() {
            if comp[i] == comp[j] && !g.has_edge(ids[i], ids[j]) {
                out.push((ids[i], ids[j]));
            }
        }
    }
    out
}

pub fn is_applicable(g: &LabeledGraph, kind: OpKind) -> bool {
    match kind {
        OpKind::EdgeDeletion | OpKind::NodeInsertion => g.num_edges() >= 1,
        OpKind::NodeDeletion => g.num_nodes() >= 2,
        OpKind::EdgeInsertion => {
            let comp = g.component_labels();
            let mut sizes = vec![0usize; comp.len()];
            for &c in &comp {
                sizes[c] += 1;
            }
            // a component of s nodes has s(s-1)/2 pairs; any missing one is a candidate
            let pairs: usize = sizes.iter().map(|s| s * s.saturating_sub(1) / 2).sum();
            pairs > g.num_edges()
        }
    }
}

/// Exact enumeration of valid operands for `kind`.
pub fn candidates(g: &LabeledGraph, kind: OpKind) -> Vec<AlterationOp> {
    match kind {
        OpKind::EdgeDeletion => g
            .edges()
            .iter()
            .map(|&(u, v)| AlterationOp::EdgeDeletion { u, v })
            .collect(),
        OpKind::NodeDeletion if g.num_nodes() >= 2 => g
            .nodes()
            .iter()
            .map(|&node| AlterationOp::NodeDeletion { node })
            .collect(),
        OpKind::NodeDeletion => Vec::new(),
        OpKind::EdgeInsertion => edge_insertion_candidates(g)
            .into_iter()
            .map(|(u, v)| AlterationOp::EdgeInsertion { u, v })
            .collect(),
        OpKind::NodeInsertion => {
            let triangles = g.find_cliques(3).expect("size 3 is valid");
            let cliques = if triangles.is_empty() {
                g.edges().iter().map(|&(u, v)| vec![u, v]).collect()
            } else {
                triangles
            };
            cliques
                .into_iter()
                .map(|clique| AlterationOp::NodeInsertion { clique })
                .collect()
        }
    }
}

/// Samples one applicable whitelisted alteration, or `None` when nothing applies.
pub fn sample_op<R: Rng + ?Sized>(
    g: &LabeledGraph,
    whitelist: &[OpKind],
    rng: &mut R,
) -> Option<AlterationOp> {
    let kinds: Vec<OpKind> = OpKind::ALL
        .iter()
        .copied()
        .filter(|k| whitelist.contains(k) && is_applicable(g, *k))
        .collect();
    if kinds.is_empty() {
        return None;
    }
    let kind = kinds[rng.gen_range(0..kinds.len())];
    let mut cands = candidates(g, kind);
    debug_assert!(!cands.is_empty(), "{kind} reported applicable");
    let pick = rng.gen_range(0..cands.len());
    Some(cands.swap_remove(pick))
}

/// Applies `cfg.num_steps` consecutive random alterations to `g`. If nothing
/// whitelisted applies mid-sequence, the remaining steps are recorded as
/// [`AlterationOp::NoOp`].
pub fn sample_augmentation<R: Rng + ?Sized>(
    g: &LabeledGraph,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<AugmentedGraph> {
    cfg.validate()?;
    if g.num_nodes() == 0 {
        return Err(Error::invalid("cannot augment an empty graph"));
    }
    let mut current = g.clone();
    let mut trace = Vec::with_capacity(cfg.num_steps);
    for step in 0..cfg.num_steps {
        match sample_op(&current, &cfg.op_whitelist, rng) {
            Some(op) => {
                current = op.apply(&current)?;
                trace.push(op);
            }
            None => {
                log::debug!(
                    "graph {}: no whitelisted alteration applies at step {step}, padding",
                    g.graph_id()
                );
                trace.resize(cfg.num_steps, AlterationOp::NoOp);
                break;
            }
        }
    }
    Ok(AugmentedGraph {
        graph: current,
        origin_id: g.graph_id(),
        trace,
    })
}

/// Reapplies a recorded trace to its origin graph.
pub fn replay(origin: &LabeledGraph, trace: &[AlterationOp]) -> Result<LabeledGraph> {
    trace.iter().try_fold(origin.clone(), |g, op| op.apply(&g))
}
