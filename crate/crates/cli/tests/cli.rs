use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use graphcssl::numerics::checkpoint;
use graphcssl::synth::{self, SynthConfig};
use graphcssl::tu::write_tu;

const TINY: &str = r#"
[experiment]
datasets = ["TOY"]
seeds = [0]

[train]
lr = 0.01
batch_size = 8
max_epochs = 3
pretrain_epochs = 2
patience = 2

[encoder]
num_layers = 2
hidden_dim = 8

[cssl]
queue_size = 8
proj_dim = 8
"#;

fn setup(dir: &Path) -> std::path::PathBuf {
    let ds = synth::dataset("TOY", &SynthConfig { num_graphs: 20, min_nodes: 4, max_nodes: 8, ..SynthConfig::default() }, 3);
    write_tu(&dir.join("data"), "TOY", &ds.graphs).unwrap();
    let cfg = dir.join("tiny.toml");
    fs::write(&cfg, TINY).unwrap();
    cfg
}

fn graphcssl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_graphcssl"))
        .args(args)
        .env("GRAPHCSSL_DATA_ROOT", dir.join("data"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn load_stats_reads_the_env_data_root() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path());
    let o = graphcssl(dir.path(), &["load-stats", "--dataset", "TOY"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    let row = out.lines().find(|l| l.starts_with("TOY\t")).unwrap();
    let cols: Vec<&str> = row.split('\t').collect();
    assert_eq!(&cols[1..3], ["20", "2"]);
    assert_eq!(&cols[6..], ["16", "2", "2"]);
}

#[test]
fn train_writes_logs_and_prints_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let runs = dir.path().join("runs");
    let o = graphcssl(
        dir.path(),
        &["train", "-c", cfg.to_str().unwrap(), "--regime", "reg", "--lambda", "0.1", "--output-dir", runs.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("reg_lambda0.1"));
    let seed = runs.join("TOY/reg_lambda0.1/seed0");
    assert!(seed.join("log.jsonl").is_file() && seed.join("model.ckpt").is_file());
    assert!(runs.join("summary.json").is_file() && runs.join("manifest.json").is_file());
}

#[test]
fn flags_override_the_config_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let runs = dir.path().join("runs");
    let o = graphcssl(
        dir.path(),
        &["train", "-c", cfg.to_str().unwrap(), "--seeds", "2", "--output-dir", runs.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(runs.join("TOY/supervised_only/seed2").is_dir());
    assert!(!runs.join("TOY/supervised_only/seed0").exists());
}

#[test]
fn sweep_emits_sorted_columns_with_a_zero_baseline() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let runs = dir.path().join("runs");
    let o = graphcssl(
        dir.path(),
        &["sweep-lambda", "-c", cfg.to_str().unwrap(), "--lambdas", "0.1,0.01", "--output-dir", runs.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let tsv = fs::read_to_string(runs.join("lambda_sweep.tsv")).unwrap();
    let lambdas: Vec<f64> = tsv
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(lambdas, [0.0, 0.01, 0.1]);
}

#[test]
fn ablation_has_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let runs = dir.path().join("runs");
    let o = graphcssl(
        dir.path(),
        &["ablate-ops", "-c", cfg.to_str().unwrap(), "--lambda", "0.1", "--output-dir", runs.to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let json = fs::read_to_string(runs.join("op_ablation.json")).unwrap();
    assert_eq!(json.matches("\"config\"").count(), 5);
}

#[test]
fn pretrain_saves_an_encoder_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let runs = dir.path().join("runs");
    let o = graphcssl(dir.path(), &["pretrain", "-c", cfg.to_str().unwrap(), "--output-dir", runs.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let seed = runs.join("TOY/pretrain/seed0");
    let params = checkpoint::load(&seed.join("encoder.ckpt")).unwrap();
    assert!(!params.is_empty() && params.names().all(|n| n.starts_with("enc/")));
    assert_eq!(fs::read_to_string(seed.join("log.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn errors_map_to_categorised_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = setup(dir.path());
    let c = cfg.to_str().unwrap();

    let o = graphcssl(dir.path(), &["train", "-c", c, "--dataset", "MISSING"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("io-error"));

    let o = graphcssl(dir.path(), &["train", "-c", c, "--lambda", "0.1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("config-error"));

    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "[train]\nlearning_rate = 1\n").unwrap();
    let o = graphcssl(dir.path(), &["train", "-c", bad.to_str().unwrap(), "--dataset", "TOY"]);
    assert_eq!(o.status.code(), Some(2));

    let o = graphcssl(dir.path(), &["train", "-c", c, "--ops", "Teleport"]);
    assert_eq!(o.status.code(), Some(2));
}
