//! Training regimes: contrastive pretraining followed by finetuning, joint
//! classification plus weighted contrastive regularization, head-only
//! training on a frozen pretrained encoder, and plain supervised training.
//!
//! Supervised phases use constant-rate Adam with early stopping on
//! validation loss; the parameters of the best epoch are restored before
//! testing. Pretraining uses a cosine-decayed rate and keeps only the
//! encoder.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::contrastive::{
    cssl_step, init_projection, warm_queue, CsslConfig, KeyQueue, MomentumEncoder, StepContext,
};
use crate::encoder::{argmax, classify, cross_entropy, encode, init_classifier, init_encoder, EncoderConfig, Mode};
use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::numerics::{cosine_lr, AdamState, Binding, Params, Tape, Tensor, Var};
use crate::seeding;
use crate::tu::{Dataset, SplitPlan};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    PretrainFinetune,
    Reg,
    Freeze,
    SupervisedOnly,
}

impl Regime {
    pub fn name(self) -> &'static str {
        match self {
            Regime::PretrainFinetune => "pretrain_finetune",
            Regime::Reg => "reg",
            Regime::Freeze => "freeze",
            Regime::SupervisedOnly => "supervised_only",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "pretrain_finetune" | "pretrain" => Ok(Regime::PretrainFinetune),
            "reg" => Ok(Regime::Reg),
            "freeze" => Ok(Regime::Freeze),
            "supervised_only" | "supervised" => Ok(Regime::SupervisedOnly),
            other => Err(Error::Config(format!("unknown regime '{other}'"))),
        }
    }
}

/// Which graphs feed contrastive pretraining.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSelector {
    /// Training split of the target dataset.
    Specific,
    /// Union of the training splits of every configured dataset.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub lambda: f64,
    pub lr: f64,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub pretrain_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub corpus: CorpusSelector,
    pub encoder: EncoderConfig,
    pub cssl: CsslConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::SupervisedOnly,
            lambda: 0.0,
            lr: 1e-3,
            pretrain_lr: 1e-3,
            batch_size: 32,
            max_epochs: 1000,
            pretrain_epochs: 100,
            patience: 100,
            seed: 0,
            corpus: CorpusSelector::Specific,
            encoder: EncoderConfig::default(),
            cssl: CsslConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.cssl.validate()?;
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if self.lambda != 0.0 && self.regime != Regime::Reg {
            return Err(Error::Config(format!("lambda is only used by the reg regime, not {}", self.regime)));
        }
        if !(self.lr >= 0.0 && self.pretrain_lr >= 0.0) {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if self.patience == 0 || self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("patience, batch_size and max_epochs must be positive".into()));
        }
        Ok(())
    }
}

/// Train/validation/test graphs of one dataset.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Vec<LabeledGraph>,
    pub val: Vec<LabeledGraph>,
    pub test: Vec<LabeledGraph>,
    pub num_classes: usize,
    pub feature_dim: usize,
}

impl Splits {
    pub fn from_plan(ds: &Dataset, plan: &SplitPlan) -> Result<Self> {
        Ok(Self {
            train: ds.select(&plan.train_ids)?,
            val: ds.select(&plan.val_ids)?,
            test: ds.select(&plan.test_ids)?,
            num_classes: ds.num_classes,
            feature_dim: ds.feature_dim,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: Phase,
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch objective: cross-entropy when training, contrastive
    /// loss when pretraining.
    pub train_loss: f64,
    pub cssl_loss: Option<f64>,
    pub train_acc: Option<f64>,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub regime: Regime,
    pub seed: u64,
    pub lambda: f64,
    pub best_epoch: usize,
    pub stop_epoch: usize,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub test_acc: f64,
    /// `|train_acc - test_acc|` at the selected checkpoint.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub summary: RunSummary,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Epoch(EpochRecord),
    Summary(RunSummary),
}

impl RunResult {
    /// One JSON object per epoch followed by the summary. Wall-clock time is
    /// left out so identical runs produce identical logs.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        let records = self
            .epochs
            .iter()
            .cloned()
            .map(LogRecord::Epoch)
            .chain(std::iter::once(LogRecord::Summary(self.summary.clone())));
        for r in records {
            out.push_str(&serde_json::to_string(&r).expect("records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<(Vec<EpochRecord>, RunSummary)> {
        let mut epochs = Vec::new();
        let mut summary = None;
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let rec: LogRecord = serde_json::from_str(line)
                .map_err(|e| Error::invalid(format!("log line {}: {e}", i + 1)))?;
            match rec {
                LogRecord::Epoch(e) => epochs.push(e),
                LogRecord::Summary(s) => summary = Some(s),
            }
        }
        let summary = summary.ok_or_else(|| Error::invalid("run log has no summary record"))?;
        Ok((epochs, summary))
    }
}

/// A finished run and the parameters of its selected checkpoint.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub result: RunResult,
    pub params: Params,
}

/// Encoder, classifier and projection parameters drawn from fixed streams of
/// `seed`, so regimes sharing a seed share their starting point.
pub fn init_model(cfg: &TrainConfig, feature_dim: usize, num_classes: usize) -> Params {
    let mut p = init_encoder(&cfg.encoder, feature_dim, &mut seeding::stream(cfg.seed, &[seeding::INIT, 0]));
    p.merge(&init_classifier(&cfg.encoder, num_classes, &mut seeding::stream(cfg.seed, &[seeding::INIT, 1])));
    p
}

pub fn init_projection_for(cfg: &TrainConfig) -> Params {
    init_projection(&cfg.encoder, cfg.cssl.proj_dim, &mut seeding::stream(cfg.seed, &[seeding::INIT, 2]))
}

fn encoder_input_dim(params: &Params) -> Result<usize> {
    Ok(params.get("enc/layer0/W")?.rows())
}

fn check_feature_dim(params: &Params, feature_dim: usize) -> Result<()> {
    let want = encoder_input_dim(params)?;
    if want != feature_dim {
        return Err(Error::Config(format!(
            "encoder expects {want} input features but the dataset has {feature_dim}"
        )));
    }
    Ok(())
}

fn shuffled(graphs: &[LabeledGraph], seed: u64, epoch: usize) -> Vec<LabeledGraph> {
    let mut order = graphs.to_vec();
    order.shuffle(&mut seeding::stream(seed, &[epoch as u64, seeding::SHUFFLE]));
    order
}

fn labels_of(graphs: &[LabeledGraph]) -> Result<Vec<usize>> {
    graphs
        .iter()
        .map(|g| g.label().ok_or_else(|| Error::invalid(format!("graph {} has no label", g.graph_id()))))
        .collect()
}

/// Classification loss of one minibatch with dropout streams keyed by
/// `(seed, graph id, epoch)`.
pub fn classification_loss(
    tape: &mut Tape,
    bound: &Binding,
    batch: &[LabeledGraph],
    enc: &EncoderConfig,
    seed: u64,
    epoch: u64,
) -> Result<Var> {
    let labels = labels_of(batch)?;
    let mut rows = Vec::with_capacity(batch.len());
    for g in batch {
        let mut rng = seeding::stream(seed, &[g.graph_id() as u64, epoch, seeding::DROPOUT_CLS]);
        let h = encode(tape, g, bound, enc, Mode::Train(&mut rng))?;
        rows.push(classify(tape, h, bound)?);
    }
    let logits = tape.concat(&rows, 0)?;
    cross_entropy(tape, logits, &labels)
}

/// Parts of the joint objective recorded on one tape.
#[derive(Debug, Clone, Copy)]
pub struct JointLoss {
    pub cls: Var,
    pub cssl: Var,
    /// `cls + λ·cssl`; exactly `cls` when `λ = 0`.
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn joint_loss(
    tape: &mut Tape,
    bound: &Binding,
    batch: &[LabeledGraph],
    queue: &mut KeyQueue,
    mom: &MomentumEncoder,
    cfg: &TrainConfig,
    epoch: u64,
    lambda: f64,
) -> Result<JointLoss> {
    let cls = classification_loss(tape, bound, batch, &cfg.encoder, cfg.seed, epoch)?;
    let ctx = StepContext {
        seed: cfg.seed,
        epoch,
        train: true,
    };
    let cssl = cssl_step(tape, bound, batch, queue, mom, &cfg.encoder, &cfg.cssl, ctx)?;
    let total = if lambda == 0.0 {
        cls
    } else {
        let weighted = tape.scale(cssl, lambda);
        tape.add(cls, weighted)?
    };
    Ok(JointLoss { cls, cssl, total })
}

/// Mean cross-entropy and accuracy of `params` on `graphs` in eval mode.
pub fn evaluate_loss_acc(params: &Params, graphs: &[LabeledGraph], enc: &EncoderConfig) -> Result<(f64, f64)> {
    if graphs.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty split"));
    }
    let labels = labels_of(graphs)?;
    let (mut loss, mut correct) = (0.0, 0usize);
    for (g, &y) in graphs.iter().zip(&labels) {
        let mut tape = Tape::new();
        let bound = Binding::bind(&mut tape, params, "", false);
        let h = encode(&mut tape, g, &bound, enc, Mode::Eval)?;
        let logits = classify(&mut tape, h, &bound)?;
        if argmax(tape.value(logits).data()) == y {
            correct += 1;
        }
        let ce = cross_entropy(&mut tape, logits, &[y])?;
        loss += tape.value(ce).item()?;
    }
    let n = graphs.len() as f64;
    Ok((loss / n, correct as f64 / n))
}

/// Fraction of graphs whose argmax prediction matches the label.
pub fn evaluate(params: &Params, graphs: &[LabeledGraph], enc: &EncoderConfig) -> Result<f64> {
    evaluate_loss_acc(params, graphs, enc).map(|(_, acc)| acc)
}

/// Something the early-stopping driver can train for one epoch and score.
trait Learner {
    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, Option<f64>)>;
    fn score(&self, which: Split) -> Result<(f64, f64)>;
    fn snapshot(&self) -> Params;
    fn restore(&mut self, params: Params);
}

#[derive(Clone, Copy)]
enum Split {
    Train,
    Val,
    Test,
}

struct Fitted {
    epochs: Vec<EpochRecord>,
    best_epoch: usize,
    stop_epoch: usize,
    best_val: (f64, f64),
}

/// Trains until validation loss has not improved for `patience` epochs or
/// `max_epochs` is reached, then restores the best epoch's snapshot.
fn fit(learner: &mut dyn Learner, cfg: &TrainConfig) -> Result<Fitted> {
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, f64, Params)> = None;
    let mut stop_epoch = 0;
    for epoch in 0..cfg.max_epochs {
        let (train_loss, cssl_loss) = learner.train_epoch(epoch)?;
        let (_, train_acc) = learner.score(Split::Train)?;
        let (val_loss, val_acc) = learner.score(Split::Val)?;
        epochs.push(EpochRecord {
            phase: Phase::Train,
            epoch,
            lr: cfg.lr,
            train_loss,
            cssl_loss,
            train_acc: Some(train_acc),
            val_loss: Some(val_loss),
            val_acc: Some(val_acc),
        });
        stop_epoch = epoch;
        if best.as_ref().is_none_or(|b| val_loss < b.1) {
            best = Some((epoch, val_loss, val_acc, learner.snapshot()));
        } else if epoch - best.as_ref().expect("set on first epoch").0 >= cfg.patience {
            break;
        }
    }
    let (best_epoch, val_loss, val_acc, params) = best.expect("max_epochs >= 1");
    learner.restore(params);
    Ok(Fitted {
        epochs,
        best_epoch,
        stop_epoch,
        best_val: (val_loss, val_acc),
    })
}

fn finish(
    learner: &mut dyn Learner,
    regime: Regime,
    cfg: &TrainConfig,
    fitted: Fitted,
    mut prefix: Vec<EpochRecord>,
    start: Instant,
) -> Result<RunOutput> {
    let train_acc = fitted.epochs[fitted.best_epoch]
        .train_acc
        .expect("train epochs record accuracy");
    let (_, test_acc) = learner.score(Split::Test)?;
    prefix.extend(fitted.epochs);
    let summary = RunSummary {
        regime,
        seed: cfg.seed,
        lambda: if regime == Regime::Reg { cfg.lambda } else { 0.0 },
        best_epoch: fitted.best_epoch,
        stop_epoch: fitted.stop_epoch,
        train_acc,
        val_loss: fitted.best_val.0,
        val_acc: fitted.best_val.1,
        test_acc,
        gap: (train_acc - test_acc).abs(),
    };
    Ok(RunOutput {
        result: RunResult {
            summary,
            epochs: prefix,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        },
        params: learner.snapshot(),
    })
}

/// Encoder and head trained end to end, optionally with the contrastive
/// regularizer.
struct FullLearner<'a> {
    splits: &'a Splits,
    cfg: &'a TrainConfig,
    params: Params,
    adam: AdamState,
    reg: Option<(KeyQueue, MomentumEncoder)>,
}

impl Learner for FullLearner<'_> {
    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, Option<f64>)> {
        let order = shuffled(&self.splits.train, self.cfg.seed, epoch);
        let (mut cls_sum, mut cssl_sum) = (0.0, 0.0);
        for batch in order.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = Binding::bind(&mut tape, &self.params, "", true);
            let (cls, cssl, objective) = match &mut self.reg {
                Some((queue, mom)) => {
                    let j = joint_loss(&mut tape, &bound, batch, queue, mom, self.cfg, epoch as u64, self.cfg.lambda)?;
                    (j.cls, Some(tape.value(j.cssl).item()?), j.total)
                }
                None => {
                    let l = classification_loss(&mut tape, &bound, batch, &self.cfg.encoder, self.cfg.seed, epoch as u64)?;
                    (l, None, l)
                }
            };
            let w = batch.len() as f64;
            cls_sum += tape.value(cls).item()? * w;
            cssl_sum += cssl.unwrap_or(0.0) * w;
            let grads = tape.backward(objective)?;
            self.adam.step(&mut self.params, &grads, self.cfg.lr)?;
            if let Some((_, mom)) = &mut self.reg {
                mom.update(&self.params)?;
            }
        }
        let n = order.len() as f64;
        Ok((cls_sum / n, self.reg.as_ref().map(|_| cssl_sum / n)))
    }

    fn score(&self, which: Split) -> Result<(f64, f64)> {
        let graphs = match which {
            Split::Train => &self.splits.train,
            Split::Val => &self.splits.val,
            Split::Test => &self.splits.test,
        };
        evaluate_loss_acc(&self.params, graphs, &self.cfg.encoder)
    }

    fn snapshot(&self) -> Params {
        let mut p = self.params.clone();
        if let Some((_, mom)) = &self.reg {
            p.merge(mom.params());
        }
        p
    }

    fn restore(&mut self, mut params: Params) {
        if let Some((_, mom)) = &mut self.reg {
            let shadow = params.with_prefix(crate::contrastive::MOMENTUM_PREFIX);
            for name in shadow.names() {
                params.remove(name);
            }
            *mom = MomentumEncoder::from_shadow(shadow, mom.momentum());
        }
        self.params = params;
    }
}

/// Head-only training on embeddings of a frozen encoder, computed once in
/// eval mode.
struct HeadLearner<'a> {
    cfg: &'a TrainConfig,
    params: Params,
    adam: AdamState,
    embeddings: [Vec<Tensor>; 3],
    labels: [Vec<usize>; 3],
}

impl<'a> HeadLearner<'a> {
    fn new(splits: &Splits, cfg: &'a TrainConfig, params: Params) -> Result<Self> {
        let encoder = params.with_prefix("enc/");
        let embed = |graphs: &[LabeledGraph]| -> Result<Vec<Tensor>> {
            graphs
                .iter()
                .map(|g| {
                    let mut tape = Tape::new();
                    let bound = Binding::bind(&mut tape, &encoder, "", false);
                    let h = encode(&mut tape, g, &bound, &cfg.encoder, Mode::Eval)?;
                    Ok(tape.value(h).clone())
                })
                .collect()
        };
        let embeddings = [embed(&splits.train)?, embed(&splits.val)?, embed(&splits.test)?];
        let labels = [labels_of(&splits.train)?, labels_of(&splits.val)?, labels_of(&splits.test)?];
        Ok(Self {
            cfg,
            adam: AdamState::new(cfg.lr),
            params,
            embeddings,
            labels,
        })
    }

    fn split_index(which: Split) -> usize {
        match which {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }
}

impl Learner for HeadLearner<'_> {
    fn train_epoch(&mut self, epoch: usize) -> Result<(f64, Option<f64>)> {
        let mut order: Vec<usize> = (0..self.embeddings[0].len()).collect();
        order.shuffle(&mut seeding::stream(self.cfg.seed, &[epoch as u64, seeding::SHUFFLE]));
        let mut head = self.params.with_prefix("head/");
        let mut sum = 0.0;
        for batch in order.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = Binding::bind(&mut tape, &head, "", true);
            let mut rows = Vec::with_capacity(batch.len());
            for &i in batch {
                let h = tape.constant(self.embeddings[0][i].clone());
                rows.push(classify(&mut tape, h, &bound)?);
            }
            let logits = tape.concat(&rows, 0)?;
            let labels: Vec<usize> = batch.iter().map(|&i| self.labels[0][i]).collect();
            let loss = cross_entropy(&mut tape, logits, &labels)?;
            sum += tape.value(loss).item()? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            self.adam.step(&mut head, &grads, self.cfg.lr)?;
        }
        self.params.merge(&head);
        Ok((sum / order.len() as f64, None))
    }

    fn score(&self, which: Split) -> Result<(f64, f64)> {
        let k = Self::split_index(which);
        if self.embeddings[k].is_empty() {
            return Err(Error::invalid("cannot evaluate an empty split"));
        }
        let (mut loss, mut correct) = (0.0, 0usize);
        let head = self.params.with_prefix("head/");
        for (h, &y) in self.embeddings[k].iter().zip(&self.labels[k]) {
            let mut tape = Tape::new();
            let bound = Binding::bind(&mut tape, &head, "", false);
            let hv = tape.constant(h.clone());
            let logits = classify(&mut tape, hv, &bound)?;
            if argmax(tape.value(logits).data()) == y {
                correct += 1;
            }
            let ce = cross_entropy(&mut tape, logits, &[y])?;
            loss += tape.value(ce).item()?;
        }
        let n = self.embeddings[k].len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    fn snapshot(&self) -> Params {
        self.params.clone()
    }

    fn restore(&mut self, params: Params) {
        self.params = params;
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutput {
    /// Encoder parameters only; the projection head is dropped.
    pub encoder: Params,
    pub epochs: Vec<EpochRecord>,
}

impl PretrainOutput {
    /// One JSON object per pretraining epoch.
    pub fn to_jsonl(&self) -> String {
        self.epochs
            .iter()
            .map(|e| serde_json::to_string(&LogRecord::Epoch(e.clone())).expect("records serialize") + "\n")
            .collect()
    }
}

/// Contrastive pretraining of encoder and projection head with a
/// cosine-decayed learning rate.
pub fn pretrain(corpus: &[LabeledGraph], feature_dim: usize, cfg: &TrainConfig) -> Result<PretrainOutput> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("pretraining corpus is empty"));
    }
    if let Some(g) = corpus.iter().find(|g| g.feature_dim() != feature_dim) {
        return Err(Error::Config(format!(
            "graph {} has {} features, expected {feature_dim}",
            g.graph_id(),
            g.feature_dim()
        )));
    }
    let mut params = init_encoder(&cfg.encoder, feature_dim, &mut seeding::stream(cfg.seed, &[seeding::INIT, 0]));
    params.merge(&init_projection_for(cfg));
    let mut mom = MomentumEncoder::new(&params, cfg.cssl.momentum)?;
    let mut queue = KeyQueue::new(cfg.cssl.queue_size)?;
    warm_queue(&mut queue, &mom, corpus, &cfg.encoder, &cfg.cssl, cfg.seed)?;

    let mut adam = AdamState::new(cfg.pretrain_lr);
    let per_epoch = corpus.len().div_ceil(cfg.batch_size);
    let total = cfg.pretrain_epochs * per_epoch;
    let mut step = 0;
    let mut epochs = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let start_lr = cosine_lr(cfg.pretrain_lr, step, total)?;
        let mut sum = 0.0;
        let order = shuffled(corpus, cfg.seed, epoch);
        for batch in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = Binding::bind(&mut tape, &params, "", true);
            let ctx = StepContext {
                seed: cfg.seed,
                epoch: epoch as u64,
                train: true,
            };
            let loss = cssl_step(&mut tape, &bound, batch, &mut queue, &mom, &cfg.encoder, &cfg.cssl, ctx)?;
            sum += tape.value(loss).item()? * batch.len() as f64;
            let grads = tape.backward(loss)?;
            adam.step(&mut params, &grads, cosine_lr(cfg.pretrain_lr, step, total)?)?;
            mom.update(&params)?;
            step += 1;
        }
        let mean = sum / corpus.len() as f64;
        log::debug!("pretrain epoch {epoch}: cssl loss {mean:.4}");
        epochs.push(EpochRecord {
            phase: Phase::Pretrain,
            epoch,
            lr: start_lr,
            train_loss: mean,
            cssl_loss: Some(mean),
            train_acc: None,
            val_loss: None,
            val_acc: None,
        });
    }
    Ok(PretrainOutput {
        encoder: params.with_prefix("enc/"),
        epochs,
    })
}

fn with_head(init: &Params, splits: &Splits, cfg: &TrainConfig) -> Result<Params> {
    check_feature_dim(init, splits.feature_dim)?;
    let mut params = init.with_prefix("enc/");
    params.merge(&init_classifier(
        &cfg.encoder,
        splits.num_classes,
        &mut seeding::stream(cfg.seed, &[seeding::INIT, 1]),
    ));
    Ok(params)
}

/// Supervised training starting from a pretrained encoder.
pub fn finetune(splits: &Splits, init: &Params, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut learner = FullLearner {
        splits,
        cfg,
        params: with_head(init, splits, cfg)?,
        adam: AdamState::new(cfg.lr),
        reg: None,
    };
    let fitted = fit(&mut learner, cfg)?;
    finish(&mut learner, Regime::PretrainFinetune, cfg, fitted, Vec::new(), start)
}

/// Head-only training on top of a frozen encoder. Every `enc/` tensor is
/// checked to be unchanged afterwards.
pub fn train_freeze(splits: &Splits, init: &Params, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let params = with_head(init, splits, cfg)?;
    let before = params.checksum("enc/");
    let mut learner = HeadLearner::new(splits, cfg, params)?;
    let fitted = fit(&mut learner, cfg)?;
    let out = finish(&mut learner, Regime::Freeze, cfg, fitted, Vec::new(), start)?;
    if out.params.checksum("enc/") != before {
        return Err(Error::invalid("frozen encoder parameters changed during training"));
    }
    Ok(out)
}

/// Classification loss on the original graphs plus `λ` times the
/// contrastive loss on their augmentations, one backward pass per batch.
pub fn train_reg(splits: &Splits, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut params = init_model(cfg, splits.feature_dim, splits.num_classes);
    params.merge(&init_projection_for(cfg));
    let mom = MomentumEncoder::new(&params, cfg.cssl.momentum)?;
    let mut queue = KeyQueue::new(cfg.cssl.queue_size)?;
    warm_queue(&mut queue, &mom, &splits.train, &cfg.encoder, &cfg.cssl, cfg.seed)?;
    let mut learner = FullLearner {
        splits,
        cfg,
        params,
        adam: AdamState::new(cfg.lr),
        reg: Some((queue, mom)),
    };
    let fitted = fit(&mut learner, cfg)?;
    finish(&mut learner, Regime::Reg, cfg, fitted, Vec::new(), start)
}

pub fn supervised_only(splits: &Splits, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let mut learner = FullLearner {
        splits,
        cfg,
        params: init_model(cfg, splits.feature_dim, splits.num_classes),
        adam: AdamState::new(cfg.lr),
        reg: None,
    };
    let fitted = fit(&mut learner, cfg)?;
    finish(&mut learner, Regime::SupervisedOnly, cfg, fitted, Vec::new(), start)
}

/// Runs `cfg.regime`. Pretraining regimes use `corpus` when given, otherwise
/// the training split.
pub fn run_regime(splits: &Splits, cfg: &TrainConfig, corpus: Option<&[LabeledGraph]>) -> Result<RunOutput> {
    match cfg.regime {
        Regime::SupervisedOnly => supervised_only(splits, cfg),
        Regime::Reg => train_reg(splits, cfg),
        Regime::PretrainFinetune | Regime::Freeze => {
            let start = Instant::now();
            let pre = pretrain(corpus.unwrap_or(&splits.train), splits.feature_dim, cfg)?;
            let mut out = if cfg.regime == Regime::Freeze {
                train_freeze(splits, &pre.encoder, cfg)?
            } else {
                finetune(splits, &pre.encoder, cfg)?
            };
            let mut epochs = pre.epochs;
            epochs.append(&mut out.result.epochs);
            out.result.epochs = epochs;
            out.result.wall_clock_secs = start.elapsed().as_secs_f64();
            Ok(out)
        }
    }
}
