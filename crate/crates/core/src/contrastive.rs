//! Momentum-contrast machinery: projection head, the contrastive loss, the
//! key queue and the momentum encoder.
//!
//! Queries are augmentations encoded by the trained encoder and projection
//! head; keys are a second augmentation of the same graph encoded by an
//! exponentially averaged copy of both. A query's positive is its own key;
//! its negatives are the queued keys of other graphs.

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use crate::augment::{sample_augmentation, AugmentConfig, AugmentedGraph};
use crate::encoder::{encode, mlp, mlp_params, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::numerics::{Binding, Params, Tape, Tensor, Var};
use crate::seeding;

pub const MOMENTUM_PREFIX: &str = "mom/";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsslConfig {
    pub temperature: f64,
    pub momentum: f64,
    pub queue_size: usize,
    pub proj_dim: usize,
    pub augment: AugmentConfig,
}

impl Default for CsslConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            momentum: 0.999,
            queue_size: 1024,
            proj_dim: 128,
            augment: AugmentConfig::default(),
        }
    }
}

impl CsslConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(0.0..=1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1]", self.momentum)));
        }
        if self.queue_size == 0 || self.proj_dim == 0 {
            return Err(Error::Config("queue_size and proj_dim must be positive".into()));
        }
        self.augment.validate()
    }
}

/// Two-layer projection head `embedding → hidden → proj_dim` named `proj/...`.
pub fn init_projection(enc: &EncoderConfig, proj_dim: usize, rng: &mut impl rand::Rng) -> Params {
    mlp_params("proj", enc.embedding_dim(), enc.hidden_dim, proj_dim, rng)
}

pub fn project(tape: &mut Tape, h: Var, bound: &Binding) -> Result<Var> {
    mlp(tape, h, bound, "proj")
}

/// `a·b / (‖a‖‖b‖)`, or 0 when either vector is zero.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("cosine_sim", &[a.len()], &[b.len()]));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) })
}

/// Negative log-probability of the positive pair among the positive and
/// all negatives, with cosine similarities divided by `tau`.
///
/// `z_i`, `z_j` are `1 × d`, `negatives` is `K × d`; none need be normalized.
pub fn contrastive_loss(tape: &mut Tape, z_i: Var, z_j: Var, negatives: Var, tau: f64) -> Result<Var> {
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let (k, d) = tape.value(negatives).expect_matrix("contrastive_loss")?;
    if k == 0 {
        return Err(Error::invalid("contrastive loss needs at least one negative"));
    }
    for z in [z_i, z_j] {
        if tape.value(z).shape() != [1, d] {
            return Err(Error::shape("contrastive_loss", tape.value(z).shape(), &[1, d]));
        }
    }
    let qi = tape.l2_normalize_rows(z_i)?;
    let qj = tape.l2_normalize_rows(z_j)?;
    let qn = tape.l2_normalize_rows(negatives)?;
    let prod = tape.mul(qi, qj)?;
    let pos = tape.sum_all(prod);
    let qn_t = tape.transpose(qn)?;
    let neg = tape.matmul(qi, qn_t)?;
    let logits = tape.concat(&[pos, neg], 1)?;
    let logits = tape.scale(logits, 1.0 / tau);
    let lp = tape.log_softmax(logits, 1)?;
    let mut first = Tensor::zeros(&[1, k + 1]);
    first.set(0, 0, 1.0);
    let first = tape.constant(first);
    let picked = tape.mul(lp, first)?;
    let picked = tape.sum_all(picked);
    Ok(tape.scale(picked, -1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub key: Vec<f64>,
    pub origin: usize,
}

/// Fixed-capacity FIFO of past keys; pushing onto a full queue evicts the
/// oldest entry.
#[derive(Debug, Clone)]
pub struct KeyQueue {
    capacity: usize,
    entries: VecDeque<QueueEntry>,
}

impl KeyQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::Config("key queue capacity must be positive".into()));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() == self.capacity
    }

    pub fn push(&mut self, key: Vec<f64>, origin: usize) -> Result<()> {
        if let Some(first) = self.entries.front() {
            if first.key.len() != key.len() {
                return Err(Error::shape("KeyQueue::push", &[first.key.len()], &[key.len()]));
            }
        }
        if self.is_full() {
            self.entries.pop_front();
        }
        self.entries.push_back(QueueEntry { key, origin });
        Ok(())
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &QueueEntry> {
        self.entries.iter()
    }

    /// Keys whose origin differs from `origin`, as a `K × d` matrix, or
    /// `None` when nothing remains.
    pub fn negatives_excluding(&self, origin: usize) -> Option<Tensor> {
        let rows: Vec<Vec<f64>> = self
            .entries
            .iter()
            .filter(|e| e.origin != origin)
            .map(|e| e.key.clone())
            .collect();
        if rows.is_empty() {
            None
        } else {
            Tensor::from_rows(&rows).ok()
        }
    }
}

/// `shadow ← m·shadow + (1−m)·query` for every `mom/`-prefixed tensor in
/// `shadow`, matched to the unprefixed name in `query`.
pub fn momentum_update(shadow: &mut Params, query: &Params, m: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&m) {
        return Err(Error::invalid(format!("momentum {m} outside [0, 1]")));
    }
    let names: Vec<String> = shadow.names().cloned().collect();
    for name in names {
        let qname = name.strip_prefix(MOMENTUM_PREFIX).unwrap_or(&name);
        let q = query.get(qname)?;
        let s = shadow.get_mut(&name).expect("name listed above");
        if s.shape() != q.shape() {
            return Err(Error::shape("momentum_update", s.shape(), q.shape()));
        }
        for (sv, qv) in s.data_mut().iter_mut().zip(q.data()) {
            *sv = m * *sv + (1.0 - m) * qv;
        }
    }
    Ok(())
}

/// Exponentially averaged copy of the `enc/` and `proj/` parameters, stored
/// under `mom/`.
#[derive(Debug, Clone)]
pub struct MomentumEncoder {
    shadow: Params,
    momentum: f64,
}

impl MomentumEncoder {
    pub fn new(query: &Params, momentum: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::Config(format!("momentum {momentum} outside [0, 1]")));
        }
        let mut shadow = Params::new();
        for (name, t) in query.iter() {
            if name.starts_with("enc/") || name.starts_with("proj/") {
                shadow.insert(format!("{MOMENTUM_PREFIX}{name}"), t.clone());
            }
        }
        Ok(Self { shadow, momentum })
    }

    /// Rebuilds an encoder from `mom/`-prefixed tensors, e.g. a checkpoint.
    pub fn from_shadow(shadow: Params, momentum: f64) -> Self {
        Self { shadow, momentum }
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn params(&self) -> &Params {
        &self.shadow
    }

    pub fn update(&mut self, query: &Params) -> Result<()> {
        momentum_update(&mut self.shadow, query, self.momentum)
    }

    /// L2-normalized projection of `g` in eval mode, computed on a private
    /// tape so nothing can reach the shadow parameters.
    pub fn key(&self, g: &LabeledGraph, enc: &EncoderConfig) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = Binding::bind(&mut tape, &self.shadow, MOMENTUM_PREFIX, false);
        let h = encode(&mut tape, g, &bound, enc, Mode::Eval)?;
        let z = project(&mut tape, h, &bound)?;
        let z = tape.l2_normalize_rows(z)?;
        Ok(tape.value(z).data().to_vec())
    }
}

/// Query and key augmentations of `g` for one epoch, each from its own
/// stream so the pair is reproducible independently of batch order.
pub fn augment_pair(
    g: &LabeledGraph,
    cfg: &AugmentConfig,
    seed: u64,
    epoch: u64,
) -> Result<(AugmentedGraph, AugmentedGraph)> {
    let id = g.graph_id() as u64;
    let mut qr = seeding::stream(seed, &[cfg.seed, id, epoch, seeding::AUG_QUERY]);
    let mut kr = seeding::stream(seed, &[cfg.seed, id, epoch, seeding::AUG_KEY]);
    Ok((sample_augmentation(g, cfg, &mut qr)?, sample_augmentation(g, cfg, &mut kr)?))
}

/// Fills `queue` with momentum keys of augmented corpus graphs, cycling the
/// corpus until the queue is full.
pub fn warm_queue(
    queue: &mut KeyQueue,
    mom: &MomentumEncoder,
    corpus: &[LabeledGraph],
    enc: &EncoderConfig,
    cfg: &CsslConfig,
    seed: u64,
) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::invalid("cannot warm the key queue from an empty corpus"));
    }
    for round in 0u64.. {
        for g in corpus {
            if queue.is_full() {
                return Ok(());
            }
            let mut rng = seeding::stream(seed, &[cfg.augment.seed, g.graph_id() as u64, round, seeding::WARMUP]);
            let aug = sample_augmentation(g, &cfg.augment, &mut rng)?;
            queue.push(mom.key(&aug.graph, enc)?, g.graph_id())?;
        }
    }
    unreachable!("the loop returns once the queue is full")
}

/// Where a CSSL step draws its randomness from.
#[derive(Debug, Clone, Copy)]
pub struct StepContext {
    pub seed: u64,
    pub epoch: u64,
    /// Dropout on the query path.
    pub train: bool,
}

/// Mean contrastive loss over `batch`, recorded on `tape` against the bound
/// `enc/` and `proj/` parameters. The batch's keys are enqueued afterwards.
#[allow(clippy::too_many_arguments)]
pub fn cssl_step(
    tape: &mut Tape,
    bound: &Binding,
    batch: &[LabeledGraph],
    queue: &mut KeyQueue,
    mom: &MomentumEncoder,
    enc: &EncoderConfig,
    cfg: &CsslConfig,
    ctx: StepContext,
) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::invalid("empty CSSL batch"));
    }
    if queue.is_empty() {
        return Err(Error::invalid("key queue is empty; warm it before training"));
    }
    let mut keys = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    for g in batch {
        let (qa, ka) = augment_pair(g, &cfg.augment, ctx.seed, ctx.epoch)?;
        let mut drop_rng = seeding::stream(ctx.seed, &[g.graph_id() as u64, ctx.epoch, seeding::DROPOUT_CSSL]);
        let mode = if ctx.train { Mode::Train(&mut drop_rng) } else { Mode::Eval };
        let h = encode(tape, &qa.graph, bound, enc, mode)?;
        let z = project(tape, h, bound)?;
        let key = mom.key(&ka.graph, enc)?;
        let negatives = queue.negatives_excluding(g.graph_id()).ok_or_else(|| {
            Error::invalid(format!("every queued key originates from graph {}", g.graph_id()))
        })?;
        let kv = tape.constant(Tensor::row(&key));
        let nv = tape.constant(negatives);
        let loss = contrastive_loss(tape, z, kv, nv, cfg.temperature)?;
        total = Some(match total {
            Some(t) => tape.add(t, loss)?,
            None => loss,
        });
        keys.push((key, g.graph_id()));
    }
    for (key, origin) in keys {
        queue.push(key, origin)?;
    }
    let total = total.expect("batch is nonempty");
    Ok(tape.scale(total, 1.0 / batch.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::init_encoder;
    use crate::synth;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss_value(zi: &[f64], zj: &[f64], negs: &[Vec<f64>], tau: f64) -> f64 {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(zi));
        let b = tape.constant(Tensor::row(zj));
        let n = tape.constant(Tensor::from_rows(negs).unwrap());
        let l = contrastive_loss(&mut tape, a, b, n, tau).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn cosine_cases() {
        assert!((cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(cosine_sim(&[1.0], &[1.0, 2.0]), Err(Error::Shape { .. })));
        // oracle: normalize first, then dot
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..17).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        let want: f64 = a.iter().zip(&b).map(|(x, y)| (x / na) * (y / nb)).sum();
        assert!((cosine_sim(&a, &b).unwrap() - want).abs() < 1e-14);
    }

    #[test]
    fn uniform_logits_give_log_k_plus_one() {
        for k in [1usize, 7, 64] {
            let negs = vec![vec![1.0, 0.0]; k];
            let l = loss_value(&[1.0, 0.0], &[1.0, 0.0], &negs, 0.07);
            assert!((l - ((k + 1) as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn hand_computed_example() {
        let l = loss_value(&[1.0, 0.0], &[1.0, 0.0], &[vec![0.0, 1.0]], 1.0);
        let want = (1.0 + (-1.0f64).exp()).ln();
        assert!((l - want).abs() < 1e-12);
        assert!((l - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn loss_decreases_with_positive_similarity() {
        let negs = vec![vec![0.0, 1.0], vec![-1.0, 0.2]];
        let mut last = f64::INFINITY;
        for step in 0..=10 {
            let t = std::f64::consts::FRAC_PI_2 * (1.0 - step as f64 / 10.0);
            let l = loss_value(&[1.0, 0.0], &[t.cos(), t.sin()], &negs, 0.5);
            assert!(l < last && l > 0.0);
            last = l;
        }
    }

    #[test]
    fn loss_rejects_bad_inputs() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(&[1.0, 0.0]));
        let empty = tape.constant(Tensor::zeros(&[0, 2]));
        assert!(matches!(contrastive_loss(&mut tape, a, a, empty, 1.0), Err(Error::InvalidArgument(_))));
        let n = tape.constant(Tensor::row(&[0.0, 1.0]));
        assert!(contrastive_loss(&mut tape, a, a, n, 0.0).is_err());
        let wide = tape.constant(Tensor::row(&[0.0, 1.0, 2.0]));
        assert!(matches!(contrastive_loss(&mut tape, a, wide, n, 1.0), Err(Error::Shape { .. })));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = Params::new();
        p.insert("zi", Tensor::matrix(1, 5, (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        p.insert("zj", Tensor::matrix(1, 5, (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        p.insert("n", Tensor::matrix(3, 5, (0..15).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap());
        let run = |p: &Params| {
            let mut tape = Tape::new();
            let b = Binding::bind(&mut tape, p, "", true);
            let l = contrastive_loss(&mut tape, b.get("zi").unwrap(), b.get("zj").unwrap(), b.get("n").unwrap(), 0.3)
                .unwrap();
            (tape, l)
        };
        let (tape, l) = run(&p);
        let grads = tape.backward(l).unwrap();
        for (name, t) in p.iter() {
            for k in 0..t.len() {
                let at = |d: f64| {
                    let mut q = p.clone();
                    q.get_mut(name).unwrap().data_mut()[k] += d;
                    let (tape, l) = run(&q);
                    tape.value(l).item().unwrap()
                };
                let num = (at(1e-6) - at(-1e-6)) / 2e-6;
                let ana = grads[name].data()[k];
                assert!((num - ana).abs() <= 1e-6 * num.abs().max(1.0), "{name}[{k}] {num} vs {ana}");
            }
        }
    }

    #[test]
    fn queue_is_fifo_and_validates() {
        assert!(KeyQueue::new(0).is_err());
        let mut q = KeyQueue::new(3).unwrap();
        for i in 0..5 {
            q.push(vec![i as f64], i).unwrap();
        }
        let origins: Vec<usize> = q.iter().map(|e| e.origin).collect();
        assert_eq!(origins, vec![2, 3, 4]);
        assert!(q.push(vec![1.0, 2.0], 9).is_err());
        assert_eq!(q.negatives_excluding(3).unwrap().data(), &[2.0, 4.0]);
        let mut single = KeyQueue::new(2).unwrap();
        single.push(vec![1.0], 0).unwrap();
        assert!(single.negatives_excluding(0).is_none());
    }

    #[test]
    fn momentum_update_extremes() {
        let mut query = Params::new();
        query.insert("enc/a", Tensor::scalar(2.0));
        let mut shadow = Params::new();
        shadow.insert("mom/enc/a", Tensor::scalar(0.0));
        momentum_update(&mut shadow, &query, 1.0).unwrap();
        assert_eq!(shadow.get("mom/enc/a").unwrap().item().unwrap(), 0.0);
        momentum_update(&mut shadow, &query, 0.5).unwrap();
        assert_eq!(shadow.get("mom/enc/a").unwrap().item().unwrap(), 1.0);
        momentum_update(&mut shadow, &query, 0.0).unwrap();
        assert_eq!(shadow.get("mom/enc/a").unwrap().item().unwrap(), 2.0);

        query.insert("enc/a", Tensor::row(&[1.0, 2.0]));
        assert!(matches!(momentum_update(&mut shadow, &query, 0.5), Err(Error::Shape { .. })));
        assert!(momentum_update(&mut shadow, &Params::new(), 0.5).is_err());
    }

    #[test]
    fn momentum_encoder_mirrors_encoder_and_projection() {
        let enc = EncoderConfig { hidden_dim: 4, num_layers: 2, ..EncoderConfig::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = init_encoder(&enc, 3, &mut rng);
        p.merge(&init_projection(&enc, 6, &mut rng));
        p.merge(&crate::encoder::init_classifier(&enc, 2, &mut rng));
        let mom = MomentumEncoder::new(&p, 0.9).unwrap();
        let mut expected: Vec<String> = p
            .names()
            .filter(|n| !n.starts_with("head/"))
            .map(|n| format!("mom/{n}"))
            .collect();
        expected.sort();
        assert_eq!(mom.params().names().cloned().collect::<Vec<_>>(), expected);
        for (n, t) in mom.params().iter() {
            assert_eq!(t, p.get(&n[4..]).unwrap());
        }
    }

    struct Fixture {
        enc: EncoderConfig,
        cfg: CsslConfig,
        params: Params,
        corpus: Vec<LabeledGraph>,
    }

    fn fixture(queue_size: usize) -> Fixture {
        let enc = EncoderConfig { hidden_dim: 8, num_layers: 2, ..EncoderConfig::default() };
        let cfg = CsslConfig { queue_size, proj_dim: 8, ..CsslConfig::default() };
        let ds = synth::dataset("s", &synth::SynthConfig { num_graphs: 12, min_nodes: 5, max_nodes: 9, ..Default::default() }, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut params = init_encoder(&enc, ds.feature_dim, &mut rng);
        params.merge(&init_projection(&enc, cfg.proj_dim, &mut rng));
        Fixture { enc, cfg, params, corpus: ds.graphs }
    }

    fn step(f: &Fixture, queue: &mut KeyQueue, mom: &MomentumEncoder, batch: &[LabeledGraph]) -> (f64, crate::numerics::Gradients) {
        let mut tape = Tape::new();
        let mut bound = Binding::bind(&mut tape, &f.params, "", true);
        bound.extend(Binding::bind(&mut tape, mom.params(), "", true));
        let ctx = StepContext { seed: 11, epoch: 0, train: true };
        let loss = cssl_step(&mut tape, &bound, batch, queue, mom, &f.enc, &f.cfg, ctx).unwrap();
        let v = tape.value(loss).item().unwrap();
        (v, tape.backward(loss).unwrap())
    }

    #[test]
    fn cssl_step_is_deterministic_and_blocks_momentum_gradients() {
        let f = fixture(16);
        let mom = MomentumEncoder::new(&f.params, 0.999).unwrap();
        let run = || {
            let mut q = KeyQueue::new(f.cfg.queue_size).unwrap();
            warm_queue(&mut q, &mom, &f.corpus, &f.enc, &f.cfg, 3).unwrap();
            assert!(q.is_full());
            let (l, g) = step(&f, &mut q, &mom, &f.corpus[..4]);
            (l, g, q.iter().map(|e| e.origin).collect::<Vec<_>>())
        };
        let (l1, g1, o1) = run();
        let (l2, g2, o2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(o1, o2);
        assert!(l1.is_finite() && l1 > 0.0);
        assert_eq!(&o1[12..], &[0, 1, 2, 3]);
        for (name, g) in &g1 {
            assert_eq!(g, &g2[name]);
            if name.starts_with(MOMENTUM_PREFIX) {
                assert!(g.data().iter().all(|&x| x == 0.0), "{name} received gradient");
            }
        }
        assert!(g1["enc/layer0/W"].data().iter().any(|&x| x != 0.0));
    }

    #[test]
    fn single_graph_batch_against_unrelated_queue() {
        let f = fixture(8);
        let mom = MomentumEncoder::new(&f.params, 0.999).unwrap();
        let mut q = KeyQueue::new(8).unwrap();
        warm_queue(&mut q, &mom, &f.corpus[1..], &f.enc, &f.cfg, 0).unwrap();
        let (l, _) = step(&f, &mut q, &mom, &f.corpus[..1]);
        assert!(l.is_finite() && l > 0.0);
    }

    #[test]
    fn same_origin_queue_is_rejected() {
        let f = fixture(4);
        let mom = MomentumEncoder::new(&f.params, 0.999).unwrap();
        let mut q = KeyQueue::new(4).unwrap();
        warm_queue(&mut q, &mom, &f.corpus[..1], &f.enc, &f.cfg, 0).unwrap();
        let mut tape = Tape::new();
        let bound = Binding::bind(&mut tape, &f.params, "", true);
        let ctx = StepContext { seed: 0, epoch: 0, train: false };
        let r = cssl_step(&mut tape, &bound, &f.corpus[..1], &mut q, &mom, &f.enc, &f.cfg, ctx);
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn keys_are_unit_norm() {
        let f = fixture(4);
        let mom = MomentumEncoder::new(&f.params, 0.999).unwrap();
        for g in &f.corpus {
            let k = mom.key(g, &f.enc).unwrap();
            let n = k.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn queue_matches_sliding_window(cap in 1usize..20, sizes in proptest::collection::vec(0usize..8, 0..12)) {
            let mut q = KeyQueue::new(cap).unwrap();
            let mut all = Vec::new();
            let mut next = 0usize;
            for b in sizes {
                for _ in 0..b {
                    q.push(vec![next as f64], next).unwrap();
                    all.push(next);
                    next += 1;
                }
                let window: Vec<usize> = all[all.len().saturating_sub(cap)..].to_vec();
                let got: Vec<usize> = q.iter().map(|e| e.origin).collect();
                proptest::prop_assert_eq!(got, window);
                proptest::prop_assert!(q.len() <= cap);
            }
        }

        #[test]
        fn loss_is_positive_and_scale_invariant(seed in 0u64..1000, k in 1usize..10, scale in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() };
            let zi = v(6);
            let zj = v(6);
            let negs: Vec<Vec<f64>> = (0..k).map(|_| v(6)).collect();
            let l = loss_value(&zi, &zj, &negs, 0.2);
            let s = |x: &[f64]| x.iter().map(|a| a * scale).collect::<Vec<_>>();
            let ls = loss_value(&s(&zi), &s(&zj), &negs.iter().map(|n| s(n)).collect::<Vec<_>>(), 0.2);
            proptest::prop_assert!(l > 0.0);
            proptest::prop_assert!((l - ls).abs() < 1e-10);
        }
    }
}
