//! Hierarchical pooling graph encoder and the classification head.
//!
//! Each layer runs a normalized graph convolution, scores nodes by how
//! poorly their neighbors reconstruct them, keeps the top-scoring fraction,
//! and adds edges between kept nodes whose representations are similar.
//! The graph embedding sums a mean‖max readout of every layer's pooled
//! node representations.
//!
//! Parameters are named `enc/layer{i}/W` for the convolutions and
//! `head/cls/{j}/W`, `head/cls/{j}/b` for the two-layer classification head.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::numerics::{Binding, Params, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub pooling_ratio: f64,
    pub dropout: f64,
    /// Cosine similarity at or above which pooled nodes get connected.
    pub similarity_threshold: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 3,
            hidden_dim: 128,
            pooling_ratio: 0.5,
            dropout: 0.0,
            similarity_threshold: 0.95,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("encoder layers and hidden_dim must be positive".into()));
        }
        if !(0.1..=0.9).contains(&self.pooling_ratio) && self.pooling_ratio != 1.0 {
            return Err(Error::Config(format!(
                "pooling_ratio {} outside [0.1, 0.9]",
                self.pooling_ratio
            )));
        }
        if !(0.0..=0.5).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0.0, 0.5]", self.dropout)));
        }
        Ok(())
    }

    /// Width of the graph embedding produced by [`encode`].
    pub fn embedding_dim(&self) -> usize {
        2 * self.hidden_dim
    }
}

/// Forward-pass mode. Dropout masks are drawn from the training RNG.
pub enum Mode<'a> {
    Train(&'a mut dyn RngCore),
    Eval,
}

pub fn layer_weight_name(layer: usize) -> String {
    format!("enc/layer{layer}/W")
}

/// Glorot-initialized convolution weights.
pub fn init_encoder(cfg: &EncoderConfig, in_dim: usize, rng: &mut impl Rng) -> Params {
    let mut p = Params::new();
    for i in 0..cfg.num_layers {
        let fan_in = if i == 0 { in_dim } else { cfg.hidden_dim };
        p.insert(layer_weight_name(i), Tensor::glorot(fan_in, cfg.hidden_dim, rng));
    }
    p
}

/// Two-layer MLP head `embedding → hidden → num_classes`.
pub fn init_classifier(cfg: &EncoderConfig, num_classes: usize, rng: &mut impl Rng) -> Params {
    mlp_params("head/cls", cfg.embedding_dim(), cfg.hidden_dim, num_classes, rng)
}

pub(crate) fn mlp_params(prefix: &str, input: usize, hidden: usize, output: usize, rng: &mut impl Rng) -> Params {
    let mut p = Params::new();
    p.insert(format!("{prefix}/0/W"), Tensor::glorot(input, hidden, rng));
    p.insert(format!("{prefix}/0/b"), Tensor::zeros(&[1, hidden]));
    p.insert(format!("{prefix}/1/W"), Tensor::glorot(hidden, output, rng));
    p.insert(format!("{prefix}/1/b"), Tensor::zeros(&[1, output]));
    p
}

/// `relu(x W0 + b0) W1 + b1`.
pub(crate) fn mlp(tape: &mut Tape, x: Var, bound: &Binding, prefix: &str) -> Result<Var> {
    let w0 = bound.get(&format!("{prefix}/0/W"))?;
    let b0 = bound.get(&format!("{prefix}/0/b"))?;
    let w1 = bound.get(&format!("{prefix}/1/W"))?;
    let b1 = bound.get(&format!("{prefix}/1/b"))?;
    let h = tape.matmul(x, w0)?;
    let h = tape.add(h, b0)?;
    let h = tape.relu(h);
    let o = tape.matmul(h, w1)?;
    tape.add(o, b1)
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalized_adjacency(adj: &Tensor) -> Result<Tensor> {
    let (n, m) = adj.expect_matrix("normalized_adjacency")?;
    if n != m {
        return Err(Error::shape("normalized_adjacency", adj.shape(), &[n, n]));
    }
    let mut a = adj.clone();
    for i in 0..n {
        a.set(i, i, a.get(i, i) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / a.row_slice(i).iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            let v = a.get(i, j) * inv_sqrt[i] * inv_sqrt[j];
            a.set(i, j, v);
        }
    }
    Ok(a)
}

/// `relu(Â H W)` with `Â` the symmetrically normalized adjacency.
pub fn gcn_layer(tape: &mut Tape, h: Var, adj: &Tensor, w: Var) -> Result<Var> {
    let n = tape.value(h).expect_matrix("gcn_layer")?.0;
    if adj.shape() != [n, n] {
        return Err(Error::shape("gcn_layer", tape.value(h).shape(), adj.shape()));
    }
    let norm = tape.constant(normalized_adjacency(adj)?);
    let hw = tape.matmul(h, w)?;
    let out = tape.matmul(norm, hw)?;
    Ok(tape.relu(out))
}

/// L1 distance between each node's row and the mean of its neighbors' rows.
/// Isolated nodes score the L1 norm of their own row.
pub fn node_information_score(h: &Tensor, adj: &Tensor) -> Vec<f64> {
    let (n, d) = (h.rows(), h.cols());
    let mut scores = Vec::with_capacity(n);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().for_each(|m| *m = 0.0);
        let mut deg = 0.0;
        for j in 0..n {
            let a = adj.get(i, j);
            if a != 0.0 {
                deg += a;
                for (m, x) in mean.iter_mut().zip(h.row_slice(j)) {
                    *m += a * x;
                }
            }
        }
        if deg > 0.0 {
            mean.iter_mut().for_each(|m| *m /= deg);
        }
        scores.push(h.row_slice(i).iter().zip(&mean).map(|(x, m)| (x - m).abs()).sum());
    }
    scores
}

/// Number of nodes kept out of `n`: `max(1, ceil(ratio·n))`.
pub fn pooled_size(n: usize, ratio: f64) -> usize {
    // the small offset keeps products like 0.7·10 = 7.000000000000001 at 7
    (((ratio * n as f64) - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// Indices of the `pooled_size` highest scores, ties to the lower index,
/// returned in ascending index order.
pub fn select_top_k(scores: &[f64], ratio: f64) -> Vec<usize> {
    let k = pooled_size(scores.len(), ratio);
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keeps the top-scoring nodes; returns pooled rows, induced adjacency and
/// the kept indices.
pub fn pool(tape: &mut Tape, h: Var, adj: &Tensor, scores: &[f64], ratio: f64) -> Result<(Var, Tensor, Vec<usize>)> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::invalid(format!("pooling ratio {ratio} outside (0, 1]")));
    }
    let kept = select_top_k(scores, ratio);
    let hp = tape.gather_rows(h, &kept)?;
    let ap = adj.submatrix(&kept)?;
    Ok((hp, ap, kept))
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Adds an edge between every pair of distinct nodes whose rows have cosine
/// similarity `>= threshold`. Existing edges are kept; the diagonal stays 0.
pub fn structure_learning(h: &Tensor, adj: &Tensor, threshold: f64) -> Tensor {
    let n = h.rows();
    let mut out = adj.clone();
    for i in 0..n {
        for j in i + 1..n {
            if out.get(i, j) == 0.0 && cosine(h.row_slice(i), h.row_slice(j)) >= threshold {
                out.set(i, j, 1.0);
                out.set(j, i, 1.0);
            }
        }
    }
    out
}

/// Sum over layers of `mean(H) ‖ max(H)` taken column-wise.
pub fn readout(tape: &mut Tape, layers: &[Var]) -> Result<Var> {
    let mut total: Option<Var> = None;
    for &h in layers {
        if tape.value(h).rows() == 0 {
            return Err(Error::invalid("readout over an empty node set"));
        }
        let mean = tape.mean(h, 0)?;
        let max = tape.max(h, 0)?;
        let both = tape.concat(&[mean, max], 1)?;
        total = Some(match total {
            Some(t) => tape.add(t, both)?,
            None => both,
        });
    }
    total.ok_or_else(|| Error::invalid("readout needs at least one layer"))
}

fn dropout(tape: &mut Tape, h: Var, rate: f64, mode: &mut Mode<'_>) -> Result<Var> {
    let Mode::Train(rng) = mode else { return Ok(h) };
    if rate == 0.0 {
        return Ok(h);
    }
    let keep = 1.0 / (1.0 - rate);
    let shape = tape.value(h).shape().to_vec();
    let mask = (0..tape.value(h).len())
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    let mask = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(h, mask)
}

/// Graph embedding `1 × 2·hidden_dim`. `bound` must hold `enc/layer{i}/W`.
pub fn encode(
    tape: &mut Tape,
    g: &LabeledGraph,
    bound: &Binding,
    cfg: &EncoderConfig,
    mut mode: Mode<'_>,
) -> Result<Var> {
    if g.num_nodes() == 0 {
        return Err(Error::invalid("cannot encode an empty graph"));
    }
    let w0 = bound.get(&layer_weight_name(0))?;
    let expected = tape.value(w0).rows();
    if g.feature_dim() != expected {
        return Err(Error::Config(format!(
            "graph has {} features, encoder expects {expected}",
            g.feature_dim()
        )));
    }
    let mut h = tape.constant(g.feature_matrix());
    let mut adj = g.adjacency_matrix();
    let mut layers = Vec::with_capacity(cfg.num_layers);
    for i in 0..cfg.num_layers {
        let w = bound.get(&layer_weight_name(i))?;
        h = gcn_layer(tape, h, &adj, w)?;
        h = dropout(tape, h, cfg.dropout, &mut mode)?;
        let scores = node_information_score(tape.value(h), &adj);
        let (hp, ap, _) = pool(tape, h, &adj, &scores, cfg.pooling_ratio)?;
        adj = structure_learning(tape.value(hp), &ap, cfg.similarity_threshold);
        h = hp;
        layers.push(h);
    }
    readout(tape, &layers)
}

/// Class logits `1 × C` from a graph embedding.
pub fn classify(tape: &mut Tape, h: Var, bound: &Binding) -> Result<Var> {
    let w0 = bound.get("head/cls/0/W")?;
    let (hd, wd) = (tape.value(h).cols(), tape.value(w0).rows());
    if hd != wd {
        return Err(Error::shape("classify", tape.value(h).shape(), tape.value(w0).shape()));
    }
    mlp(tape, h, bound, "head/cls")
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of
/// `logits` (`B × C`).
pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let (b, c) = tape.value(logits).expect_matrix("cross_entropy")?;
    if b != labels.len() || b == 0 {
        return Err(Error::shape("cross_entropy", &[b, c], &[labels.len()]));
    }
    let mut onehot = Tensor::zeros(&[b, c]);
    for (i, &y) in labels.iter().enumerate() {
        if y >= c {
            return Err(Error::invalid(format!("label {y} out of {c} classes")));
        }
        onehot.set(i, y, 1.0);
    }
    let lp = tape.log_softmax(logits, 1)?;
    let mask = tape.constant(onehot);
    let picked = tape.mul(lp, mask)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Argmax with ties to the lower class index.
pub fn argmax(row: &[f64]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::tests::random_graph;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> EncoderConfig {
        EncoderConfig {
            num_layers: 2,
            hidden_dim: 4,
            pooling_ratio: 0.5,
            dropout: 0.0,
            similarity_threshold: 0.9,
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> Tensor {
        Tensor::matrix(n, m, (0..n * m).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gcn_single_node_is_plain_projection() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row(&[1.0, -2.0]));
        let w = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.5, 1.0, -1.0]).unwrap());
        let out = gcn_layer(&mut tape, h, &Tensor::zeros(&[1, 1]), w).unwrap();
        // h W = (-1, 2.5) -> relu
        assert_eq!(tape.value(out).data(), &[0.0, 2.5]);
    }

    #[test]
    fn gcn_symmetric_pair_gives_equal_rows() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::matrix(2, 2, vec![0.3, 0.7, 0.3, 0.7]).unwrap());
        let w = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, 0.0, 1.0]).unwrap());
        let a = Tensor::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = gcn_layer(&mut tape, h, &a, w).unwrap();
        let v = tape.value(out);
        assert_eq!(v.row_slice(0), v.row_slice(1));
    }

    #[test]
    fn gcn_matches_dense_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = random_graph(&mut rng, 5, 0.5);
        let a = g.adjacency_matrix();
        let x = rand_matrix(&mut rng, 5, 3);
        let wt = rand_matrix(&mut rng, 3, 4);
        // oracle: explicit degree vector, explicit triple sum
        let deg: Vec<f64> = (0..5).map(|i| 1.0 + (0..5).map(|j| a.get(i, j)).sum::<f64>()).collect();
        let mut expected = vec![0.0; 20];
        for i in 0..5 {
            for c in 0..4 {
                let mut s = 0.0;
                for j in 0..5 {
                    let aij = a.get(i, j) + if i == j { 1.0 } else { 0.0 };
                    if aij == 0.0 {
                        continue;
                    }
                    let xw: f64 = (0..3).map(|k| x.get(j, k) * wt.get(k, c)).sum();
                    s += aij / (deg[i] * deg[j]).sqrt() * xw;
                }
                expected[i * 4 + c] = s.max(0.0);
            }
        }
        let mut tape = Tape::new();
        let h = tape.constant(x);
        let w = tape.constant(wt);
        let out = gcn_layer(&mut tape, h, &a, w).unwrap();
        for (got, want) in tape.value(out).data().iter().zip(&expected) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn information_score_cases() {
        let same = Tensor::matrix(3, 2, vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0]).unwrap();
        let path = Tensor::matrix(3, 3, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(node_information_score(&same, &path), vec![0.0; 3]);

        // star: center 0, leaves 1..3
        let h = Tensor::matrix(4, 2, vec![1.0, 1.0, 0.0, 3.0, 2.0, 0.0, 4.0, -3.0]).unwrap();
        let mut a = Tensor::zeros(&[4, 4]);
        for l in 1..4 {
            a.set(0, l, 1.0);
            a.set(l, 0, 1.0);
        }
        let s = node_information_score(&h, &a);
        // mean of leaves = (2, 0); |1-2| + |1-0| = 2
        assert!((s[0] - 2.0).abs() < 1e-15);
        // leaf 1 reconstructed by center: |0-1| + |3-1| = 3
        assert!((s[1] - 3.0).abs() < 1e-15);

        let iso = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(node_information_score(&iso, &Tensor::zeros(&[1, 1])), vec![3.5]);
    }

    #[test]
    fn pooling_sizes_and_selection() {
        assert_eq!(pooled_size(5, 0.5), 3);
        assert_eq!(pooled_size(10, 0.7), 7);
        assert_eq!(pooled_size(1, 0.1), 1);
        assert_eq!(pooled_size(3, 1.0), 3);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(1..30);
            let ratio = rng.gen_range(0.1..0.9);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
            let k = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
            let mut oracle: Vec<usize> = order[..k].to_vec();
            oracle.sort_unstable();
            assert_eq!(select_top_k(&scores, ratio), oracle);
        }
        // ties go to the lower index
        assert_eq!(select_top_k(&[1.0, 2.0, 2.0, 2.0], 0.5), vec![1, 2]);
    }

    #[test]
    fn full_ratio_pool_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random_graph(&mut rng, 6, 0.4);
        let mut tape = Tape::new();
        let h = tape.constant(g.feature_matrix());
        let scores = node_information_score(tape.value(h), &g.adjacency_matrix());
        let (hp, ap, kept) = pool(&mut tape, h, &g.adjacency_matrix(), &scores, 1.0).unwrap();
        assert_eq!(kept, (0..6).collect::<Vec<_>>());
        assert_eq!(tape.value(hp), &g.feature_matrix());
        assert_eq!(ap, g.adjacency_matrix());
    }

    #[test]
    fn structure_learning_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_matrix(&mut rng, 6, 3);
        let a = Tensor::zeros(&[6, 6]);
        assert_eq!(structure_learning(&h, &a, 1.5), a);
        let full = structure_learning(&h, &a, -1.0);
        for i in 0..6 {
            for j in 0..6 {
                assert_eq!(full.get(i, j), if i == j { 0.0 } else { 1.0 });
            }
        }
        // all-pairs oracle at 0.9
        let mut start = Tensor::zeros(&[6, 6]);
        start.set(0, 1, 1.0);
        start.set(1, 0, 1.0);
        let out = structure_learning(&h, &start, 0.9);
        for i in 0..6 {
            for j in 0..6 {
                let (a, b) = (h.row_slice(i), h.row_slice(j));
                let cos = a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
                    / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt());
                let want = i != j && (start.get(i, j) == 1.0 || cos >= 0.9);
                assert_eq!(out.get(i, j) == 1.0, want, "({i},{j})");
            }
        }
    }

    #[test]
    fn readout_cases() {
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::row(&[1.0, -2.0]));
        let r = readout(&mut tape, &[h, h, h]).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, -6.0, 3.0, -6.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_matrix(&mut rng, 5, 3);
        let y = x.gather_rows(&[4, 2, 0, 1, 3]).unwrap();
        let mut tape = Tape::new();
        let (vx, vy) = (tape.constant(x.clone()), tape.constant(y));
        let (rx, ry) = (readout(&mut tape, &[vx]).unwrap(), readout(&mut tape, &[vy]).unwrap());
        assert_eq!(tape.value(rx), tape.value(ry));
        // direct mean/max oracle
        for c in 0..3 {
            let col: Vec<f64> = (0..5).map(|i| x.get(i, c)).collect();
            let mean = col.iter().sum::<f64>() / 5.0;
            let max = col.iter().cloned().fold(f64::MIN, f64::max);
            assert!((tape.value(rx).data()[c] - mean).abs() < 1e-15);
            assert_eq!(tape.value(rx).data()[3 + c], max);
        }
    }

    fn setup(seed: u64, cfg: &EncoderConfig, in_dim: usize, classes: usize) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_encoder(cfg, in_dim, &mut rng);
        p.merge(&init_classifier(cfg, classes, &mut rng));
        p
    }

    fn distinct_feature_graph(rng: &mut ChaCha8Rng, n: usize) -> LabeledGraph {
        let g = random_graph(rng, n, 0.4);
        let feats = (0..n).map(|_| (0..3).map(|_| rng.gen_range(0.0..1.0)).collect()).collect();
        LabeledGraph::from_edges(0, feats, g.edges().iter().copied(), Some(1)).unwrap()
    }

    #[test]
    fn encode_is_permutation_invariant_and_deterministic() {
        let cfg = small_cfg();
        let params = setup(7, &cfg, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let g = distinct_feature_graph(&mut rng, 9);
            let perm: Vec<usize> = {
                let mut p: Vec<usize> = (0..9).collect();
                rand::seq::SliceRandom::shuffle(p.as_mut_slice(), &mut rng);
                p
            };
            let feats = (0..9).map(|new| g.feature_row(perm[new]).to_vec()).collect();
            let inv: Vec<usize> = (0..9).map(|old| perm.iter().position(|&p| p == old).unwrap()).collect();
            let edges = g.edges().iter().map(|&(u, v)| (inv[u], inv[v]));
            let h = LabeledGraph::from_edges(0, feats, edges, Some(1)).unwrap();

            let embed = |graph: &LabeledGraph| {
                let mut tape = Tape::new();
                let b = Binding::bind(&mut tape, &params, "", false);
                let e = encode(&mut tape, graph, &b, &cfg, Mode::Eval).unwrap();
                tape.value(e).clone()
            };
            let (a, b) = (embed(&g), embed(&h));
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-12, "{x} vs {y}");
            }
            assert_eq!(embed(&g), a);
        }
    }

    #[test]
    fn encode_rejects_wrong_feature_dim_and_empty() {
        let cfg = small_cfg();
        let params = setup(1, &cfg, 5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g = distinct_feature_graph(&mut rng, 4);
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &params, "", false);
        assert!(matches!(encode(&mut tape, &g, &b, &cfg, Mode::Eval), Err(Error::Config(_))));
        let empty = LabeledGraph::from_edges(0, vec![], [], None).unwrap();
        assert!(encode(&mut tape, &empty, &b, &cfg, Mode::Eval).is_err());
    }

    /// Central differences over every weight of `sum(f(...))`.
    fn max_rel_error(params: &Params, f: &dyn Fn(&mut Tape, &Binding) -> Var) -> f64 {
        let run = |p: &Params| {
            let mut tape = Tape::new();
            let b = Binding::bind(&mut tape, p, "", true);
            let out = f(&mut tape, &b);
            (tape, out)
        };
        let (tape, out) = run(params);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (name, t) in params.iter() {
            for k in 0..t.len() {
                let eval = |d: f64| {
                    let mut p = params.clone();
                    p.get_mut(name).unwrap().data_mut()[k] += d;
                    let (tape, out) = run(&p);
                    tape.value(out).item().unwrap()
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = grads[name].data()[k];
                worst = worst.max((num - ana).abs() / num.abs().max(ana.abs()).max(1e-6));
            }
        }
        worst
    }

    #[test]
    fn encode_gradient_matches_finite_differences() {
        let cfg = small_cfg();
        let params = init_encoder(&cfg, 3, &mut ChaCha8Rng::seed_from_u64(10));
        let g = distinct_feature_graph(&mut ChaCha8Rng::seed_from_u64(11), 7);
        let err = max_rel_error(&params, &|tape, b| {
            let e = encode(tape, &g, b, &cfg, Mode::Eval).unwrap();
            tape.sum_all(e)
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn end_to_end_classification_gradient() {
        let cfg = EncoderConfig { dropout: 0.3, ..small_cfg() };
        let params = setup(12, &cfg, 3, 2);
        let g = distinct_feature_graph(&mut ChaCha8Rng::seed_from_u64(13), 6);
        let err = max_rel_error(&params, &|tape, b| {
            // fixed mask stream so every evaluation drops the same units
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let e = encode(tape, &g, b, &cfg, Mode::Train(&mut rng)).unwrap();
            let logits = classify(tape, e, b).unwrap();
            cross_entropy(tape, logits, &[1]).unwrap()
        });
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn zero_head_gives_uniform_probabilities() {
        let cfg = small_cfg();
        let mut params = setup(1, &cfg, 3, 3);
        for name in ["head/cls/1/W", "head/cls/1/b"] {
            let t = params.get(name).unwrap();
            let z = Tensor::zeros(t.shape());
            params.insert(name, z);
        }
        let g = distinct_feature_graph(&mut ChaCha8Rng::seed_from_u64(1), 5);
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &params, "", false);
        let e = encode(&mut tape, &g, &b, &cfg, Mode::Eval).unwrap();
        let logits = classify(&mut tape, e, &b).unwrap();
        let p = tape.softmax(logits, 1).unwrap();
        for v in tape.value(p).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn saturated_logits_give_certain_prediction() {
        let mut tape = Tape::new();
        let l = tape.constant(Tensor::row(&[400.0, -400.0]));
        let p = tape.softmax(l, 1).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 0.0]);
        let ce = cross_entropy(&mut tape, l, &[0]).unwrap();
        assert_eq!(tape.value(ce).item().unwrap(), 0.0);
    }

    #[test]
    fn classify_matches_mlp_oracle_and_checks_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let cfg = small_cfg();
        let params = init_classifier(&cfg, 2, &mut rng);
        let mut params = params;
        params.insert("head/cls/0/b", rand_matrix(&mut rng, 1, 4));
        params.insert("head/cls/1/b", rand_matrix(&mut rng, 1, 2));
        let x = rand_matrix(&mut rng, 1, 8);
        let mut tape = Tape::new();
        let b = Binding::bind(&mut tape, &params, "", false);
        let xv = tape.constant(x.clone());
        let out = classify(&mut tape, xv, &b).unwrap();
        let (w0, b0) = (params.get("head/cls/0/W").unwrap(), params.get("head/cls/0/b").unwrap());
        let (w1, b1) = (params.get("head/cls/1/W").unwrap(), params.get("head/cls/1/b").unwrap());
        let hidden: Vec<f64> = (0..4)
            .map(|j| ((0..8).map(|i| x.get(0, i) * w0.get(i, j)).sum::<f64>() + b0.get(0, j)).max(0.0))
            .collect();
        for c in 0..2 {
            let want = (0..4).map(|j| hidden[j] * w1.get(j, c)).sum::<f64>() + b1.get(0, c);
            assert!((tape.value(out).get(0, c) - want).abs() < 1e-12);
        }
        let bad = tape.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(classify(&mut tape, bad, &b), Err(Error::Shape { .. })));
    }

    proptest::proptest! {
        #[test]
        fn pooled_count_and_structure_invariants(seed in 0u64..500, n in 1usize..25, ratio in 0.1f64..0.9) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = random_graph(&mut rng, n, 0.3);
            let h = rand_matrix(&mut rng, n, 4);
            let a = g.adjacency_matrix();
            let mut tape = Tape::new();
            let hv = tape.constant(h);
            let scores = node_information_score(tape.value(hv), &a);
            let (hp, ap, kept) = pool(&mut tape, hv, &a, &scores, ratio).unwrap();
            let k = ((ratio * n as f64) - 1e-9).ceil().max(1.0) as usize;
            proptest::prop_assert_eq!(kept.len(), k);
            proptest::prop_assert_eq!(tape.value(hp).rows(), k);
            let refined = structure_learning(tape.value(hp), &ap, rng.gen_range(-1.0..1.0));
            for i in 0..k {
                proptest::prop_assert_eq!(refined.get(i, i), 0.0);
                for j in 0..k {
                    proptest::prop_assert!(refined.get(i, j) >= ap.get(i, j));
                }
            }
        }
    }
}
