//! Multi-seed experiment runner.
//!
//! Every (dataset, configuration, seed) job writes its epoch log and
//! selected checkpoint to its own directory and is listed in
//! `manifest.json`. Summary rows are then rebuilt from the persisted logs
//! alone, so anything in a summary can be recomputed from disk.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::OpKind;
use crate::error::{Error, Result};
use crate::graph::LabeledGraph;
use crate::numerics::checkpoint;
use crate::pipeline::{run_regime, CorpusSelector, Regime, RunResult, RunSummary, Splits, TrainConfig};
use crate::tu::{load_tu, make_splits, Dataset};

/// Default λ grid of the regularized regime.
pub const LAMBDA_GRID: [f64; 5] = [1.0, 0.1, 0.01, 0.001, 0.0001];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub datasets: Vec<String>,
    pub data_root: PathBuf,
    /// Use a fixed random subset of this many graphs per dataset.
    pub subset: Option<usize>,
    pub seeds: Vec<u64>,
    pub lambdas: Vec<f64>,
    pub output_dir: PathBuf,
    pub jobs: usize,
    pub train: TrainConfig,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        Self {
            datasets: Vec::new(),
            data_root: PathBuf::from("data"),
            subset: None,
            seeds: (0..10).collect(),
            lambdas: LAMBDA_GRID.to_vec(),
            output_dir: PathBuf::from("runs"),
            jobs: 1,
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("no datasets given".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        if self.subset == Some(0) {
            return Err(Error::Config("subset size must be positive".into()));
        }
        self.train.validate()
    }
}

/// Mean and population standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// `mean±std` of fractions, as percentages with two decimals.
pub fn format_pm(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub dataset: String,
    pub config: String,
    pub ops: String,
    pub seed: u64,
    pub log: PathBuf,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub config: String,
    pub regime: Regime,
    pub lambda: f64,
    pub ops: String,
    pub seeds: usize,
    pub test_mean: f64,
    pub test_std: f64,
    pub train_mean: f64,
    pub gap_mean: f64,
    pub gap_std: f64,
    pub val_mean: f64,
}

impl SummaryRow {
    pub fn test_pm(&self) -> String {
        format_pm(self.test_mean, self.test_std)
    }

    pub fn gap_pm(&self) -> String {
        format_pm(self.gap_mean, self.gap_std)
    }
}

pub fn render_table(rows: &[SummaryRow]) -> String {
    let mut out = format!(
        "{:<12} {:<28} {:<10} {:>8} {:>6} {:>14} {:>14}\n",
        "dataset", "config", "ops", "lambda", "seeds", "test acc", "gap"
    );
    for r in rows {
        out.push_str(&format!(
            "{:<12} {:<28} {:<10} {:>8} {:>6} {:>14} {:>14}\n",
            r.dataset,
            r.config,
            r.ops,
            r.lambda,
            r.seeds,
            r.test_pm(),
            r.gap_pm()
        ));
    }
    out
}

/// Plot-ready columns: `lambda mean_acc std_acc mean_gap std_gap`.
pub fn render_sweep(rows: &[SummaryRow]) -> String {
    let mut out = String::from("dataset\tlambda\tmean_acc\tstd_acc\tmean_gap\tstd_gap\n");
    for r in rows {
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\n",
            r.dataset, r.lambda, r.test_mean, r.test_std, r.gap_mean, r.gap_std
        ));
    }
    out
}

pub fn ops_label(ops: &[OpKind]) -> String {
    if OpKind::ALL.iter().all(|k| ops.contains(k)) {
        "all".to_string()
    } else {
        ops.iter().map(|k| k.name()).collect::<Vec<_>>().join("+")
    }
}

/// Loads the experiment's datasets, applying the subset and, for the all-datasets
/// corpus, zero-padding every dataset to the widest feature dimension.
pub fn load_datasets(spec: &ExperimentSpec) -> Result<Vec<Dataset>> {
    let mut out = Vec::with_capacity(spec.datasets.len());
    for name in &spec.datasets {
        let ds = load_tu(&spec.data_root, name)?;
        out.push(match spec.subset {
            Some(n) if n < ds.graphs.len() => ds.subset(n, 0),
            _ => ds,
        });
    }
    if spec.train.corpus == CorpusSelector::All {
        let dim = out.iter().map(|d| d.feature_dim).max().unwrap_or(0);
        out = out.iter().map(|d| d.pad_features(dim)).collect::<Result<_>>()?;
    }
    Ok(out)
}

/// Union of every dataset's training split for `seed`, with graph ids
/// offset so they stay unique across datasets.
pub fn union_corpus(datasets: &[Dataset], seed: u64) -> Result<Vec<LabeledGraph>> {
    let mut corpus = Vec::new();
    for ds in datasets {
        let plan = make_splits(ds, seed)?;
        for g in ds.select(&plan.train_ids)? {
            let id = corpus.len();
            corpus.push(g.with_graph_id(id));
        }
    }
    Ok(corpus)
}

struct Job<'a> {
    dataset: &'a Dataset,
    config: String,
    cfg: TrainConfig,
    seed: u64,
}

fn run_job(job: &Job<'_>, all: &[Dataset], out_dir: &Path) -> Result<ManifestEntry> {
    let mut cfg = job.cfg.clone();
    cfg.seed = job.seed;
    let plan = make_splits(job.dataset, job.seed)?;
    let splits = Splits::from_plan(job.dataset, &plan)?;
    let corpus = match cfg.corpus {
        CorpusSelector::All if matches!(cfg.regime, Regime::PretrainFinetune | Regime::Freeze) => {
            Some(union_corpus(all, job.seed)?)
        }
        _ => None,
    };
    log::info!("{} / {} / seed {}: starting", job.dataset.name, job.config, job.seed);
    let out = run_regime(&splits, &cfg, corpus.as_deref())?;
    let dir = out_dir
        .join(&job.dataset.name)
        .join(&job.config)
        .join(format!("seed{}", job.seed));
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let log_path = dir.join("log.jsonl");
    fs::write(&log_path, out.result.to_jsonl()).map_err(|e| Error::io(&log_path, e))?;
    let ckpt = dir.join("model.ckpt");
    checkpoint::save(&ckpt, &out.params)?;
    let timing = dir.join("timing.json");
    let t = serde_json::json!({ "wall_clock_secs": out.result.wall_clock_secs });
    fs::write(&timing, t.to_string()).map_err(|e| Error::io(&timing, e))?;
    log::info!(
        "{} / {} / seed {}: test acc {:.4}, gap {:.4}",
        job.dataset.name,
        job.config,
        job.seed,
        out.result.summary.test_acc,
        out.result.summary.gap
    );
    Ok(ManifestEntry {
        dataset: job.dataset.name.clone(),
        config: job.config.clone(),
        ops: ops_label(&cfg.cssl.augment.op_whitelist),
        seed: job.seed,
        log: log_path.strip_prefix(out_dir).unwrap_or(&log_path).to_path_buf(),
        checkpoint: ckpt.strip_prefix(out_dir).unwrap_or(&ckpt).to_path_buf(),
    })
}

/// Runs every (dataset, config, seed) combination, writes the manifest and
/// summaries, and returns rows rebuilt from the logs.
fn run_grid(spec: &ExperimentSpec, configs: &[(String, TrainConfig)], tag: &str) -> Result<Vec<SummaryRow>> {
    spec.validate()?;
    for (_, cfg) in configs {
        cfg.validate()?;
    }
    let datasets = load_datasets(spec)?;
    let jobs: Vec<Job> = datasets
        .iter()
        .flat_map(|ds| {
            configs.iter().flat_map(move |(name, cfg)| {
                spec.seeds.iter().map(move |&seed| Job {
                    dataset: ds,
                    config: name.clone(),
                    cfg: cfg.clone(),
                    seed,
                })
            })
        })
        .collect();
    let out_dir = &spec.output_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(spec.jobs)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let entries: Vec<ManifestEntry> = pool.install(|| {
        jobs.par_iter()
            .map(|j| run_job(j, &datasets, out_dir))
            .collect::<Result<_>>()
    })?;
    let manifest = out_dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&entries).expect("manifest serializes");
    fs::write(&manifest, text).map_err(|e| Error::io(&manifest, e))?;

    let rows = summarize_logs(out_dir)?;
    let json = out_dir.join(format!("{tag}.json"));
    let text = serde_json::to_string_pretty(&rows).expect("rows serialize");
    fs::write(&json, text).map_err(|e| Error::io(&json, e))?;
    let table = out_dir.join(format!("{tag}.txt"));
    fs::write(&table, render_table(&rows)).map_err(|e| Error::io(&table, e))?;
    Ok(rows)
}

/// Rebuilds summary rows from `manifest.json` and the per-run logs under
/// `out_dir`, grouping runs by (dataset, config) in manifest order.
pub fn summarize_logs(out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let manifest = out_dir.join("manifest.json");
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let entries: Vec<ManifestEntry> =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("{}: {e}", manifest.display())))?;
    let mut groups: Vec<(ManifestEntry, Vec<RunSummary>)> = Vec::new();
    for e in entries {
        let path = out_dir.join(&e.log);
        let log = fs::read_to_string(&path).map_err(|err| Error::io(&path, err))?;
        let (_, summary) = RunResult::from_jsonl(&log)?;
        match groups.iter_mut().find(|(k, _)| k.dataset == e.dataset && k.config == e.config) {
            Some((_, runs)) => runs.push(summary),
            None => groups.push((e, vec![summary])),
        }
    }
    Ok(groups
        .into_iter()
        .map(|(key, runs)| {
            let col = |f: fn(&RunSummary) -> f64| runs.iter().map(f).collect::<Vec<_>>();
            let (test_mean, test_std) = mean_std(&col(|r| r.test_acc));
            let (gap_mean, gap_std) = mean_std(&col(|r| r.gap));
            SummaryRow {
                dataset: key.dataset,
                config: key.config,
                regime: runs[0].regime,
                lambda: runs[0].lambda,
                ops: key.ops,
                seeds: runs.len(),
                test_mean,
                test_std,
                train_mean: mean_std(&col(|r| r.train_acc)).0,
                gap_mean,
                gap_std,
                val_mean: mean_std(&col(|r| r.val_acc)).0,
            }
        })
        .collect())
}

/// The experiment's regime over every dataset and seed.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<SummaryRow>> {
    let name = match spec.train.regime {
        Regime::Reg => format!("reg_lambda{}", spec.train.lambda),
        r => r.name().to_string(),
    };
    run_grid(spec, &[(name, spec.train.clone())], "summary")
}

/// The regularized regime at each listed λ plus a λ = 0 baseline,
/// rows sorted by λ.
pub fn run_lambda_sweep(spec: &ExperimentSpec) -> Result<Vec<SummaryRow>> {
    if spec.train.regime != Regime::Reg {
        return Err(Error::Config(format!("lambda sweep needs the reg regime, not {}", spec.train.regime)));
    }
    if spec.lambdas.is_empty() {
        return Err(Error::Config("lambda list is empty".into()));
    }
    let mut lambdas = spec.lambdas.clone();
    if let Some(bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Config(format!("invalid lambda {bad}")));
    }
    if !lambdas.contains(&0.0) {
        lambdas.push(0.0);
    }
    lambdas.sort_by(f64::total_cmp);
    lambdas.dedup();
    let configs: Vec<(String, TrainConfig)> = lambdas
        .iter()
        .map(|&l| {
            let cfg = TrainConfig { lambda: l, ..spec.train.clone() };
            (format!("reg_lambda{l}"), cfg)
        })
        .collect();
    let mut rows = run_grid(spec, &configs, "lambda_sweep")?;
    rows.sort_by(|a, b| a.dataset.cmp(&b.dataset).then(a.lambda.total_cmp(&b.lambda)));
    let tsv = spec.output_dir.join("lambda_sweep.tsv");
    fs::write(&tsv, render_sweep(&rows)).map_err(|e| Error::io(&tsv, e))?;
    Ok(rows)
}

/// One row per single-operation whitelist plus the all-operations row.
pub fn run_op_ablation(spec: &ExperimentSpec) -> Result<Vec<SummaryRow>> {
    if spec.train.regime != Regime::Reg {
        return Err(Error::Config(format!("op ablation needs the reg regime, not {}", spec.train.regime)));
    }
    let mut whitelists: Vec<Vec<OpKind>> = OpKind::ALL.iter().map(|&k| vec![k]).collect();
    whitelists.push(OpKind::ALL.to_vec());
    let configs: Vec<(String, TrainConfig)> = whitelists
        .into_iter()
        .map(|ops| {
            let mut cfg = spec.train.clone();
            let name = format!("ops_{}", ops_label(&ops));
            cfg.cssl.augment.op_whitelist = ops;
            (name, cfg)
        })
        .collect();
    run_grid(spec, &configs, "op_ablation")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::contrastive::CsslConfig;
    use crate::synth::{self, SynthConfig};
    use crate::tu::write_tu;

    #[test]
    fn mean_std_and_formatting() {
        let (m, s) = mean_std(&[0.8491]);
        assert_eq!(format_pm(m, s), "84.91±0.00");
        let (m, s) = mean_std(&[0.5, 0.7]);
        assert!((m - 0.6).abs() < 1e-15 && (s - 0.1).abs() < 1e-15);
        assert_eq!(format_pm(m, s), "60.00±10.00");
        let xs: Vec<f64> = (0..10).map(|i| 0.8 + 0.01 * i as f64).collect();
        let (m, s) = mean_std(&xs);
        let oracle = (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 10.0).sqrt();
        assert_eq!(s, oracle);
        assert_eq!(format_pm(m, s), "84.50±2.87");
    }

    #[test]
    fn ops_labels() {
        assert_eq!(ops_label(&OpKind::ALL), "all");
        assert_eq!(ops_label(&[OpKind::NodeInsertion]), "NodeInsertion");
    }

    fn spec_in(dir: &Path, regime: Regime) -> ExperimentSpec {
        let ds = synth::dataset("TOY", &SynthConfig { num_graphs: 30, min_nodes: 4, max_nodes: 7, ..SynthConfig::default() }, 1);
        write_tu(&dir.join("data"), "TOY", &ds.graphs).unwrap();
        ExperimentSpec {
            datasets: vec!["TOY".into()],
            data_root: dir.join("data"),
            subset: None,
            seeds: vec![0, 1],
            lambdas: vec![0.1, 0.0],
            output_dir: dir.join("out"),
            jobs: 1,
            train: TrainConfig {
                regime,
                lr: 0.01,
                batch_size: 8,
                max_epochs: 2,
                pretrain_epochs: 1,
                patience: 2,
                encoder: EncoderConfig { num_layers: 1, hidden_dim: 4, ..EncoderConfig::default() },
                cssl: CsslConfig { queue_size: 8, proj_dim: 4, ..CsslConfig::default() },
                ..TrainConfig::default()
            },
        }
    }

    #[test]
    fn experiment_summary_is_recomputable_and_repeatable() {
        let dir = tempfile::tempdir().unwrap();
        let spec = spec_in(dir.path(), Regime::SupervisedOnly);
        let rows = run_experiment(&spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].seeds, 2);
        assert_eq!(summarize_logs(&spec.output_dir).unwrap(), rows);
        let log0 = fs::read(spec.output_dir.join("TOY/supervised_only/seed0/log.jsonl")).unwrap();
        let ck0 = fs::read(spec.output_dir.join("TOY/supervised_only/seed0/model.ckpt")).unwrap();
        let again = run_experiment(&spec).unwrap();
        assert_eq!(again, rows);
        assert_eq!(fs::read(spec.output_dir.join("TOY/supervised_only/seed0/log.jsonl")).unwrap(), log0);
        assert_eq!(fs::read(spec.output_dir.join("TOY/supervised_only/seed0/model.ckpt")).unwrap(), ck0);
        let table = fs::read_to_string(spec.output_dir.join("summary.txt")).unwrap();
        assert!(table.contains(&rows[0].test_pm()));
    }

    #[test]
    fn single_seed_has_zero_std() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_in(dir.path(), Regime::SupervisedOnly);
        spec.seeds = vec![3];
        let rows = run_experiment(&spec).unwrap();
        assert_eq!(rows[0].test_std, 0.0);
        assert!(rows[0].test_pm().ends_with("±0.00"));
    }

    #[test]
    fn sweep_rows_sorted_with_baseline() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_in(dir.path(), Regime::Reg);
        spec.seeds = vec![0];
        spec.lambdas = vec![0.1, 0.001];
        let rows = run_lambda_sweep(&spec).unwrap();
        let ls: Vec<f64> = rows.iter().map(|r| r.lambda).collect();
        assert_eq!(ls, vec![0.0, 0.001, 0.1]);
        let tsv = fs::read_to_string(spec.output_dir.join("lambda_sweep.tsv")).unwrap();
        assert_eq!(tsv.lines().count(), 4);

        spec.lambdas.clear();
        assert!(matches!(run_lambda_sweep(&spec), Err(Error::Config(_))));
        spec.train.regime = Regime::SupervisedOnly;
        spec.lambdas = vec![0.1];
        assert!(matches!(run_lambda_sweep(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_has_five_rows() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_in(dir.path(), Regime::Reg);
        spec.seeds = vec![0];
        spec.train.lambda = 0.1;
        let rows = run_op_ablation(&spec).unwrap();
        let ops: Vec<&str> = rows.iter().map(|r| r.ops.as_str()).collect();
        assert_eq!(ops, vec!["EdgeDeletion", "NodeDeletion", "EdgeInsertion", "NodeInsertion", "all"]);
    }

    #[test]
    fn missing_dataset_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_in(dir.path(), Regime::SupervisedOnly);
        spec.datasets = vec!["NOPE".into()];
        let err = run_experiment(&spec).unwrap_err();
        assert_eq!(err.category(), "io-error");
        spec.seeds.clear();
        assert!(matches!(run_experiment(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn all_datasets_corpus_pads_and_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = spec_in(dir.path(), Regime::PretrainFinetune);
        let other = synth::dataset("WIDE", &SynthConfig { num_graphs: 20, num_node_labels: 5, min_nodes: 4, max_nodes: 6, ..SynthConfig::default() }, 2);
        write_tu(&spec.data_root, "WIDE", &other.graphs).unwrap();
        spec.datasets.push("WIDE".into());
        spec.seeds = vec![0];
        spec.train.corpus = CorpusSelector::All;
        let ds = load_datasets(&spec).unwrap();
        assert!(ds.iter().all(|d| d.feature_dim == 5));
        let corpus = union_corpus(&ds, 0).unwrap();
        assert_eq!(corpus.len(), 24 + 16);
        assert!(corpus.iter().enumerate().all(|(i, g)| g.graph_id() == i));
        let rows = run_experiment(&spec).unwrap();
        assert_eq!(rows.len(), 2);
    }
}
