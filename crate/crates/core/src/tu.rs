//! Loader for the TU Dortmund flat-text graph classification format.
//!
//! A dataset `NAME` lives in `<root>/NAME/` and consists of
//!
//! * `NAME_A.txt`: one `i, j` line per directed edge, 1-indexed node ids
//! * `NAME_graph_indicator.txt`: line `i` holds the graph id of node `i`
//! * `NAME_graph_labels.txt`: line `g` holds the class of graph `g`
//! * `NAME_node_labels.txt` (optional): line `i` holds the label of node `i`
//!
//! Node features are one-hot node labels; datasets without node labels get
//! a one-hot degree capped at [`TuOptions::max_degree`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LabeledGraph;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub graphs: Vec<LabeledGraph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TuOptions {
    pub max_degree: usize,
}

impl Default for TuOptions {
    fn default() -> Self {
        Self { max_degree: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub seed: u64,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub name: String,
    pub num_graphs: usize,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub avg_nodes: f64,
    pub avg_edges: f64,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn parse_ints(path: &Path, line_no: usize, line: &str) -> Result<Vec<i64>> {
    line.split(',')
        .map(|tok| {
            tok.trim().parse::<i64>().map_err(|_| Error::Format {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected integer, got '{}'", tok.trim()),
            })
        })
        .collect()
}

/// Non-blank lines paired with their 1-based line numbers.
fn numbered(lines: &[String]) -> impl Iterator<Item = (usize, &str)> {
    lines
        .iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| (i + 1, l.as_str()))
}

/// Maps raw labels to dense indices in ascending raw order.
fn dense_codes(values: impl Iterator<Item = i64>) -> BTreeMap<i64, usize> {
    let uniq: BTreeSet<i64> = values.collect();
    uniq.into_iter().enumerate().map(|(i, v)| (v, i)).collect()
}

pub fn dataset_dir(root: &Path, name: &str) -> PathBuf {
    root.join(name)
}

pub fn load_tu(root: &Path, name: &str) -> Result<Dataset> {
    load_tu_with(root, name, TuOptions::default())
}

pub fn load_tu_with(root: &Path, name: &str, opts: TuOptions) -> Result<Dataset> {
    let dir = dataset_dir(root, name);
    let file = |suffix: &str| dir.join(format!("{name}_{suffix}.txt"));
    let fmt_err = |path: &Path, line: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        line,
        msg,
    };

    let ind_path = file("graph_indicator");
    let mut node_graph = Vec::new();
    for (ln, line) in numbered(&read_lines(&ind_path)?) {
        let v = parse_ints(&ind_path, ln, line)?;
        if v.len() != 1 || v[0] < 1 {
            return Err(fmt_err(&ind_path, ln, format!("bad graph id '{line}'")));
        }
        node_graph.push((v[0] - 1) as usize);
    }

    let lab_path = file("graph_labels");
    let mut raw_labels = Vec::new();
    for (ln, line) in numbered(&read_lines(&lab_path)?) {
        let v = parse_ints(&lab_path, ln, line)?;
        if v.len() != 1 {
            return Err(fmt_err(&lab_path, ln, format!("bad graph label '{line}'")));
        }
        raw_labels.push(v[0]);
    }
    let num_graphs = raw_labels.len();
    if let Some((ln, &g)) = node_graph.iter().enumerate().find(|(_, &g)| g >= num_graphs) {
        return Err(fmt_err(
            &ind_path,
            ln + 1,
            format!("graph id {} has no label ({num_graphs} labels)", g + 1),
        ));
    }
    let label_codes = dense_codes(raw_labels.iter().copied());

    let node_labels_path = file("node_labels");
    let node_labels = if node_labels_path.exists() {
        let mut out = Vec::new();
        for (ln, line) in numbered(&read_lines(&node_labels_path)?) {
            let v = parse_ints(&node_labels_path, ln, line)?;
            out.push(v[0]);
        }
        if out.len() != node_graph.len() {
            return Err(fmt_err(
                &node_labels_path,
                out.len(),
                format!("{} node labels for {} nodes", out.len(), node_graph.len()),
            ));
        }
        Some(out)
    } else {
        None
    };

    // per-graph node ranges; TU lists nodes graph by graph
    let mut first_node = vec![usize::MAX; num_graphs];
    let mut count = vec![0usize; num_graphs];
    for (i, &g) in node_graph.iter().enumerate() {
        if first_node[g] == usize::MAX {
            first_node[g] = i;
        } else if first_node[g] + count[g] != i {
            return Err(fmt_err(&ind_path, i + 1, format!("nodes of graph {} are not contiguous", g + 1)));
        }
        count[g] += 1;
    }

    let a_path = file("A");
    let mut edges: Vec<BTreeSet<(usize, usize)>> = vec![BTreeSet::new(); num_graphs];
    for (ln, line) in numbered(&read_lines(&a_path)?) {
        let v = parse_ints(&a_path, ln, line)?;
        if v.len() != 2 {
            return Err(fmt_err(&a_path, ln, format!("expected 'i, j', got '{line}'")));
        }
        let (i, j) = (v[0], v[1]);
        if i < 1 || j < 1 || i as usize > node_graph.len() || j as usize > node_graph.len() {
            return Err(fmt_err(&a_path, ln, format!("node id out of range in '{line}'")));
        }
        let (i, j) = (i as usize - 1, j as usize - 1);
        let g = node_graph[i];
        if node_graph[j] != g {
            return Err(fmt_err(&a_path, ln, format!("edge '{line}' crosses graphs")));
        }
        if i == j {
            continue;
        }
        let (a, b) = (i - first_node[g], j - first_node[g]);
        edges[g].insert((a.min(b), a.max(b)));
    }

    let mut degrees = vec![0usize; node_graph.len()];
    for (g, es) in edges.iter().enumerate() {
        for &(a, b) in es {
            degrees[first_node[g] + a] += 1;
            degrees[first_node[g] + b] += 1;
        }
    }
    let (codes, feature_dim) = match &node_labels {
        Some(nl) => {
            let c = dense_codes(nl.iter().copied());
            let d = c.len();
            (nl.iter().map(|v| c[v]).collect::<Vec<_>>(), d)
        }
        None => (
            degrees.iter().map(|&d| d.min(opts.max_degree)).collect(),
            opts.max_degree + 1,
        ),
    };

    let mut graphs = Vec::with_capacity(num_graphs);
    for g in 0..num_graphs {
        if count[g] == 0 {
            return Err(fmt_err(&ind_path, 0, format!("graph {} has no nodes", g + 1)));
        }
        let feats = (0..count[g])
            .map(|k| {
                let mut row = vec![0.0; feature_dim];
                row[codes[first_node[g] + k]] = 1.0;
                row
            })
            .collect();
        let label = label_codes[&raw_labels[g]];
        graphs.push(LabeledGraph::from_edges(g, feats, edges[g].iter().copied(), Some(label))?);
    }

    Ok(Dataset {
        name: name.to_string(),
        graphs,
        num_classes: label_codes.len(),
        feature_dim,
    })
}

/// Writes graphs in TU layout. Node labels are the argmax of each feature
/// row, so one-hot featured graphs load back identically.
pub fn write_tu(root: &Path, name: &str, graphs: &[LabeledGraph]) -> Result<()> {
    let dir = dataset_dir(root, name);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut a = String::new();
    let mut ind = String::new();
    let mut labels = String::new();
    let mut node_labels = String::new();
    let mut offset = 0;
    for (gi, g) in graphs.iter().enumerate() {
        let g = g.canonicalize();
        for &(u, v) in g.edges() {
            a.push_str(&format!("{}, {}\n{}, {}\n", u + offset + 1, v + offset + 1, v + offset + 1, u + offset + 1));
        }
        for k in 0..g.num_nodes() {
            ind.push_str(&format!("{}\n", gi + 1));
            let row = g.feature_row(k);
            let arg = (0..row.len()).fold(0, |b, i| if row[i] > row[b] { i } else { b });
            node_labels.push_str(&format!("{arg}\n"));
        }
        let label = g
            .label()
            .ok_or_else(|| Error::invalid(format!("graph {gi} has no label")))?;
        labels.push_str(&format!("{label}\n"));
        offset += g.num_nodes();
    }
    for (suffix, body) in [("A", a), ("graph_indicator", ind), ("graph_labels", labels), ("node_labels", node_labels)] {
        let p = dir.join(format!("{name}_{suffix}.txt"));
        fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
    }
    Ok(())
}

/// Deterministic shuffle, then floor(0.8n) train, floor(0.1n) validation,
/// remainder test.
pub fn make_splits(ds: &Dataset, seed: u64) -> Result<SplitPlan> {
    let n = ds.graphs.len();
    if n == 0 {
        return Err(Error::invalid("cannot split an empty dataset"));
    }
    let mut ids: Vec<usize> = ds.graphs.iter().map(LabeledGraph::graph_id).collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = n * 8 / 10;
    let n_val = n / 10;
    let test_ids = ids.split_off(n_train + n_val);
    let val_ids = ids.split_off(n_train);
    Ok(SplitPlan {
        seed,
        train_ids: ids,
        val_ids,
        test_ids,
    })
}

pub fn dataset_stats(ds: &Dataset) -> DatasetStats {
    let n = ds.graphs.len().max(1) as f64;
    DatasetStats {
        name: ds.name.clone(),
        num_graphs: ds.graphs.len(),
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
        avg_nodes: ds.graphs.iter().map(|g| g.num_nodes() as f64).sum::<f64>() / n,
        avg_edges: ds.graphs.iter().map(|g| g.num_edges() as f64).sum::<f64>() / n,
    }
}

impl Dataset {
    pub fn graph(&self, id: usize) -> Result<&LabeledGraph> {
        self.graphs
            .iter()
            .find(|g| g.graph_id() == id)
            .ok_or_else(|| Error::invalid(format!("no graph with id {id} in {}", self.name)))
    }

    pub fn select(&self, ids: &[usize]) -> Result<Vec<LabeledGraph>> {
        ids.iter().map(|&i| self.graph(i).cloned()).collect()
    }

    /// The first `n` graphs after a seeded shuffle, with ids renumbered
    /// `0..n`.
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        let mut idx: Vec<usize> = (0..self.graphs.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        idx.truncate(n);
        idx.sort_unstable();
        let graphs = idx
            .iter()
            .enumerate()
            .map(|(new_id, &i)| self.graphs[i].clone().with_graph_id(new_id))
            .collect();
        Dataset {
            name: self.name.clone(),
            graphs,
            num_classes: self.num_classes,
            feature_dim: self.feature_dim,
        }
    }

    /// Zero-pads every feature row to `dim` columns.
    pub fn pad_features(&self, dim: usize) -> Result<Dataset> {
        if dim < self.feature_dim {
            return Err(Error::Config(format!(
                "cannot pad {} features down to {dim}",
                self.feature_dim
            )));
        }
        let graphs = self
            .graphs
            .iter()
            .map(|g| {
                let feats = (0..g.num_nodes())
                    .map(|k| {
                        let mut r = g.feature_row(k).to_vec();
                        r.resize(dim, 0.0);
                        r
                    })
                    .collect();
                LabeledGraph::new(g.graph_id(), g.nodes().to_vec(), g.edges().iter().copied(), feats, g.label())
            })
            .collect::<Result<_>>()?;
        Ok(Dataset {
            name: self.name.clone(),
            graphs,
            num_classes: self.num_classes,
            feature_dim: dim,
        })
    }
}
