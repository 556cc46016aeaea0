use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use graphcssl::augment::OpKind;
use graphcssl::experiment::{
    load_datasets, render_sweep, render_table, run_experiment, run_lambda_sweep, run_op_ablation, union_corpus,
    ExperimentSpec,
};
use graphcssl::numerics::checkpoint;
use graphcssl::pipeline::{pretrain, CorpusSelector, Regime};
use graphcssl::tu::{dataset_stats, make_splits};
use graphcssl::Error;
use serde::Deserialize;

const DATA_ROOT_ENV: &str = "GRAPHCSSL_DATA_ROOT";

#[derive(Parser, Debug)]
#[command(name = "graphcssl", version, about = "Contrastive self-supervised graph classification experiments")]
struct Cli {
    /// Debug-level logging (RUST_LOG overrides).
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print graph, node and edge statistics and split sizes.
    LoadStats(Common),
    /// Contrastive pretraining; saves encoder checkpoints.
    Pretrain(Common),
    /// Train one regime over every dataset and seed.
    Train(Common),
    /// Reg regime over the lambda list plus a lambda = 0 baseline.
    SweepLambda(Common),
    /// Reg regime with each single-operation whitelist and with all operations.
    AblateOps(Common),
}

#[derive(Args, Debug, Default)]
struct Common {
    /// TOML file with [experiment], [train], [encoder], [cssl] and [augment] sections.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    sections: Sections,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct Sections {
    #[command(flatten)]
    experiment: ExperimentSection,
    #[command(flatten)]
    train: TrainSection,
    #[command(flatten)]
    encoder: EncoderSection,
    #[command(flatten)]
    cssl: CsslSection,
    #[command(flatten)]
    augment: AugmentSection,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExperimentSection {
    #[arg(long, alias = "dataset", value_delimiter = ',')]
    datasets: Option<Vec<String>>,
    /// Dataset root; falls back to $GRAPHCSSL_DATA_ROOT, then ./data.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct TrainSection {
    /// pretrain_finetune, reg, freeze or supervised_only.
    #[arg(long)]
    regime: Option<String>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    pretrain_lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    pretrain_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    /// specific or all.
    #[arg(long)]
    corpus: Option<String>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct EncoderSection {
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
    #[arg(long)]
    pooling_ratio: Option<f64>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    similarity_threshold: Option<f64>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct CsslSection {
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    queue_size: Option<usize>,
    #[arg(long)]
    proj_dim: Option<usize>,
}

#[derive(Args, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct AugmentSection {
    /// Alteration steps per augmented view (1 or 3).
    #[arg(long = "augment-steps")]
    num_steps: Option<usize>,
    #[arg(long = "augment-seed")]
    seed: Option<u64>,
    /// Whitelisted operation kinds, e.g. EdgeDeletion,NodeInsertion.
    #[arg(long, value_delimiter = ',')]
    ops: Option<Vec<String>>,
}

/// `flag.or(file)` for each listed field.
macro_rules! overlay {
    ($flags:expr, $file:expr; $($f:ident),+) => {
        $( if $flags.$f.is_none() { $flags.$f = $file.$f.take(); } )+
    };
}

impl Sections {
    fn overlay(&mut self, mut file: Sections) {
        overlay!(self.experiment, file.experiment; datasets, data_root, subset, seeds, lambdas, output_dir, jobs);
        overlay!(self.train, file.train; regime, lambda, lr, pretrain_lr, batch_size, max_epochs, pretrain_epochs, patience, corpus);
        overlay!(self.encoder, file.encoder; num_layers, hidden_dim, pooling_ratio, dropout, similarity_threshold);
        overlay!(self.cssl, file.cssl; temperature, momentum, queue_size, proj_dim);
        overlay!(self.augment, file.augment; num_steps, seed, ops);
    }
}

fn read_config(path: &Path) -> anyhow::Result<Sections> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sections = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Ok(sections)
}

fn build_spec(common: Common, default_regime: Regime) -> anyhow::Result<ExperimentSpec> {
    let mut s = common.sections;
    if let Some(path) = &common.config {
        s.overlay(read_config(path).with_context(|| format!("loading config {}", path.display()))?);
    }
    let mut spec = ExperimentSpec::default();
    let e = s.experiment;
    spec.data_root = e
        .data_root
        .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from))
        .unwrap_or(spec.data_root);
    spec.datasets = e.datasets.unwrap_or_default();
    spec.subset = e.subset.or(spec.subset);
    spec.seeds = e.seeds.unwrap_or(spec.seeds);
    spec.lambdas = e.lambdas.unwrap_or(spec.lambdas);
    spec.output_dir = e.output_dir.unwrap_or(spec.output_dir);
    spec.jobs = e.jobs.unwrap_or(spec.jobs);

    let t = &mut spec.train;
    t.regime = match s.train.regime {
        Some(r) => r.parse()?,
        None => default_regime,
    };
    t.lambda = s.train.lambda.unwrap_or(t.lambda);
    t.lr = s.train.lr.unwrap_or(t.lr);
    t.pretrain_lr = s.train.pretrain_lr.unwrap_or(t.pretrain_lr);
    t.batch_size = s.train.batch_size.unwrap_or(t.batch_size);
    t.max_epochs = s.train.max_epochs.unwrap_or(t.max_epochs);
    t.pretrain_epochs = s.train.pretrain_epochs.unwrap_or(t.pretrain_epochs);
    t.patience = s.train.patience.unwrap_or(t.patience);
    if let Some(c) = s.train.corpus {
        t.corpus = match c.trim().to_ascii_lowercase().as_str() {
            "specific" => CorpusSelector::Specific,
            "all" => CorpusSelector::All,
            other => return Err(Error::Config(format!("unknown corpus '{other}' (specific or all)")).into()),
        };
    }

    let enc = &mut t.encoder;
    enc.num_layers = s.encoder.num_layers.unwrap_or(enc.num_layers);
    enc.hidden_dim = s.encoder.hidden_dim.unwrap_or(enc.hidden_dim);
    enc.pooling_ratio = s.encoder.pooling_ratio.unwrap_or(enc.pooling_ratio);
    enc.dropout = s.encoder.dropout.unwrap_or(enc.dropout);
    enc.similarity_threshold = s.encoder.similarity_threshold.unwrap_or(enc.similarity_threshold);

    let c = &mut t.cssl;
    c.temperature = s.cssl.temperature.unwrap_or(c.temperature);
    c.momentum = s.cssl.momentum.unwrap_or(c.momentum);
    c.queue_size = s.cssl.queue_size.unwrap_or(c.queue_size);
    c.proj_dim = s.cssl.proj_dim.unwrap_or(c.proj_dim);
    c.augment.num_steps = s.augment.num_steps.unwrap_or(c.augment.num_steps);
    c.augment.seed = s.augment.seed.unwrap_or(c.augment.seed);
    if let Some(ops) = s.augment.ops {
        c.augment.op_whitelist = ops.iter().map(|o| o.parse::<OpKind>()).collect::<Result<_, _>>()?;
    }
    spec.validate()?;
    Ok(spec)
}

fn load_stats(spec: &ExperimentSpec) -> anyhow::Result<()> {
    println!("dataset\tgraphs\tclasses\tfeatures\tavg_nodes\tavg_edges\ttrain\tval\ttest");
    for ds in load_datasets(spec)? {
        let s = dataset_stats(&ds);
        let plan = make_splits(&ds, spec.seeds[0])?;
        println!(
            "{}\t{}\t{}\t{}\t{:.2}\t{:.2}\t{}\t{}\t{}",
            s.name,
            s.num_graphs,
            s.num_classes,
            s.feature_dim,
            s.avg_nodes,
            s.avg_edges,
            plan.train_ids.len(),
            plan.val_ids.len(),
            plan.test_ids.len()
        );
    }
    Ok(())
}

fn run_pretrain(spec: &ExperimentSpec) -> anyhow::Result<()> {
    let datasets = load_datasets(spec)?;
    for &seed in &spec.seeds {
        let mut cfg = spec.train.clone();
        cfg.seed = seed;
        let corpora = match cfg.corpus {
            CorpusSelector::All => vec![("all".to_string(), union_corpus(&datasets, seed)?, datasets[0].feature_dim)],
            CorpusSelector::Specific => datasets
                .iter()
                .map(|ds| {
                    let plan = make_splits(ds, seed)?;
                    Ok((ds.name.clone(), ds.select(&plan.train_ids)?, ds.feature_dim))
                })
                .collect::<graphcssl::Result<_>>()?,
        };
        for (name, corpus, dim) in corpora {
            let out = pretrain(&corpus, dim, &cfg)?;
            let dir = spec.output_dir.join(&name).join("pretrain").join(format!("seed{seed}"));
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            checkpoint::save(&dir.join("encoder.ckpt"), &out.encoder)?;
            let log_path = dir.join("log.jsonl");
            fs::write(&log_path, out.to_jsonl()).map_err(|e| Error::io(&log_path, e))?;
            let last = out.epochs.last().map_or(f64::NAN, |e| e.train_loss);
            println!("{name}\tseed {seed}\tfinal cssl loss {last:.4}\t{}", dir.display());
        }
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::LoadStats(c) => load_stats(&build_spec(c, Regime::SupervisedOnly)?),
        Command::Pretrain(c) => run_pretrain(&build_spec(c, Regime::PretrainFinetune)?),
        Command::Train(c) => {
            let spec = build_spec(c, Regime::SupervisedOnly)?;
            print!("{}", render_table(&run_experiment(&spec)?));
            Ok(())
        }
        Command::SweepLambda(c) => {
            let spec = build_spec(c, Regime::Reg)?;
            print!("{}", render_sweep(&run_lambda_sweep(&spec)?));
            Ok(())
        }
        Command::AblateOps(c) => {
            let spec = build_spec(c, Regime::Reg)?;
            if spec.train.lambda == 0.0 {
                return Err(Error::Config("ablate-ops needs --lambda > 0".into()).into());
            }
            print!("{}", render_table(&run_op_ablation(&spec)?));
            Ok(())
        }
    }
}

fn exit_code(category: &str) -> u8 {
    match category {
        "config-error" => 2,
        "io-error" => 3,
        "format-error" => 4,
        "invalid-argument" => 5,
        "shape-error" => 6,
        "not-applicable" => 7,
        "augmentation-exhausted" => 8,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "debug" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.downcast_ref::<Error>().map_or("error", Error::category);
            log::debug!("{e:?}");
            eprintln!("error [{category}]: {e:#}");
            ExitCode::from(exit_code(category))
        }
    }
}
