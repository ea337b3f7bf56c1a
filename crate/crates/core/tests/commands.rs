mod common;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use kbc::cli::{self, SweepSpec, SWEEP_HEADER};
use kbc::evaluator::DEFAULT_HITS;
use kbc::{Error, TiePolicy, TrainConfig};
use sha2::{Digest, Sha256};

fn small_config(max_epochs: usize) -> TrainConfig {
    TrainConfig {
        dim: 16,
        batch_size: 64,
        negatives: 10,
        max_epochs,
        patience: 3,
        valid_sample: None,
        seed: 3,
        ..TrainConfig::default()
    }
}

fn toy(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    common::write_toy_dataset(&data, 21);
    data
}

fn sha(path: &Path) -> String {
    hex::encode(Sha256::digest(fs::read(path).unwrap()))
}

fn kbc_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_kbc"))
}

#[test]
fn train_reports_missing_split_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    fs::remove_file(data.join("valid.txt")).unwrap();
    let err = cli::cmd_train(&data, &small_config(1), &tmp.path().join("out"), |_| {}).unwrap_err();
    assert!(matches!(err, Error::MissingFile(_)));
    assert!(err.to_string().contains("valid.txt"), "{err}");
}

#[test]
fn train_writes_every_artifact_deterministically() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let outcome = cli::cmd_train(&data, &small_config(4), &a, |_| {}).unwrap();
    cli::cmd_train(&data, &small_config(4), &b, |_| {}).unwrap();
    for name in [
        cli::CHECKPOINT_FILE,
        cli::HISTORY_FILE,
        cli::RUN_RECORD_FILE,
        cli::VALID_METRICS_FILE,
        cli::TEST_METRICS_FILE,
        kbc::kb::ENTITY_DUMP,
        kbc::kb::RELATION_DUMP,
    ] {
        assert!(a.join(name).is_file(), "{name} missing");
        assert_eq!(sha(&a.join(name)), sha(&b.join(name)), "{name} differs");
    }
    assert_eq!(
        outcome.record.dataset_fingerprint,
        cli::dataset_fingerprint(&data).unwrap()
    );
    let history = fs::read_to_string(a.join(cli::HISTORY_FILE)).unwrap();
    assert_eq!(history.lines().count(), outcome.record.epochs_trained + 1);
    let first: serde_json::Value = serde_json::from_str(history.lines().next().unwrap()).unwrap();
    assert_eq!(first["epoch"], 1);
    assert!(first["valid_hits10"].is_number());
}

#[test]
fn different_seed_changes_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    cli::cmd_train(&data, &small_config(1), &tmp.path().join("a"), |_| {}).unwrap();
    let other = TrainConfig {
        seed: 4,
        ..small_config(1)
    };
    cli::cmd_train(&data, &other, &tmp.path().join("b"), |_| {}).unwrap();
    assert_ne!(
        sha(&tmp.path().join("a").join(cli::CHECKPOINT_FILE)),
        sha(&tmp.path().join("b").join(cli::CHECKPOINT_FILE))
    );
}

#[test]
fn trained_checkpoint_memorizes_its_training_split() {
    // DistMult scores (h, r, t) and (t, r, h) alike, so Hits@1 can only reach
    // 1 on a KB that is closed under reversal.
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    fs::create_dir_all(&data).unwrap();
    let mut triples = common::clustered_kb(50, 5, 5, 300, 21);
    let reversed: Vec<_> = triples
        .iter()
        .map(|t| kbc::RawTriple::new(t.tail.clone(), t.relation.clone(), t.head.clone()))
        .filter(|t| !triples.contains(t))
        .collect();
    triples.extend(reversed);
    let (train, valid, test) = common::split_90_5_5(&triples);
    common::write_split(&data.join("train.txt"), &train);
    common::write_split(&data.join("valid.txt"), &valid);
    common::write_split(&data.join("test.txt"), &test);
    let config = TrainConfig {
        dim: 32,
        negatives: 20,
        max_epochs: 200,
        patience: 200,
        eval_every: 10,
        ..small_config(0)
    };
    cli::cmd_train(&data, &config, &tmp.path().join("run"), |_| {}).unwrap();
    let ckpt = tmp.path().join("run").join(cli::CHECKPOINT_FILE);
    let eval = cli::cmd_eval(&[ckpt], &data, "train", TiePolicy::Average, &[1, 10]).unwrap();
    assert!(
        eval.overall.hits_at[&1] >= 0.9,
        "{:?}",
        eval.overall.hits_at
    );
    assert!(
        eval.overall.hits_at[&10] >= 0.99,
        "{:?}",
        eval.overall.hits_at
    );
}

#[test]
fn eval_of_repeated_checkpoint_equals_single() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    cli::cmd_train(&data, &small_config(5), &tmp.path().join("run"), |_| {}).unwrap();
    let ckpt = tmp.path().join("run").join(cli::CHECKPOINT_FILE);
    let single = cli::cmd_eval(
        std::slice::from_ref(&ckpt),
        &data,
        "test",
        TiePolicy::Average,
        &DEFAULT_HITS,
    )
    .unwrap();
    let triple = cli::cmd_eval(
        &[ckpt.clone(), ckpt.clone(), ckpt],
        &data,
        "test",
        TiePolicy::Average,
        &DEFAULT_HITS,
    )
    .unwrap();
    assert_eq!(
        single.to_json_string().unwrap(),
        triple.to_json_string().unwrap()
    );
}

#[test]
fn eval_rejects_unknown_split_and_foreign_vocabulary() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    cli::cmd_train(&data, &small_config(1), &tmp.path().join("run"), |_| {}).unwrap();
    let ckpt = tmp.path().join("run").join(cli::CHECKPOINT_FILE);
    let err = cli::cmd_eval(
        std::slice::from_ref(&ckpt),
        &data,
        "dev",
        TiePolicy::Average,
        &DEFAULT_HITS,
    )
    .unwrap_err();
    assert!(matches!(err, Error::UnknownSplit(_)));

    let other = tmp.path().join("other");
    common::write_toy_dataset(&other, 99);
    let err =
        cli::cmd_eval(&[ckpt], &other, "test", TiePolicy::Average, &DEFAULT_HITS).unwrap_err();
    assert!(matches!(err, Error::VocabularyMismatch(_)), "{err}");
}

#[test]
fn sweep_runs_grid_and_records_failures() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    let spec = SweepSpec::parse(
        "b=16,2048\nN=8\nM=5\nmax_epochs=2\nvalid_sample=none\n",
        "sweep",
    )
    .unwrap();
    let report = cli::cmd_sweep(&data, &spec, &tmp.path().join("sweep"), 1).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert!(report.failures.is_empty());
    let csv = fs::read_to_string(tmp.path().join("sweep").join(cli::LEADERBOARD_FILE)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], SWEEP_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("8,16,5,"));
    assert!(lines[2].starts_with("8,2048,5,"));

    // dim=0 is rejected at that grid point only
    let spec = SweepSpec::parse("N=0,8\nM=5\nmax_epochs=1\n", "sweep").unwrap();
    let report = cli::cmd_sweep(&data, &spec, &tmp.path().join("sweep2"), 2).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.failures.len(), 1);
    assert_eq!(report.failures[0].0, 0);
}

#[test]
fn sweep_results_do_not_depend_on_workers() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    let spec = SweepSpec::parse("N=4,8\nb=32\nM=5\nmax_epochs=2\n", "sweep").unwrap();
    let strip_wall = |csv: String| -> Vec<String> {
        csv.lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_owned())
            .collect()
    };
    let seq = cli::cmd_sweep(&data, &spec, &tmp.path().join("s1"), 1).unwrap();
    let par = cli::cmd_sweep(&data, &spec, &tmp.path().join("s2"), 2).unwrap();
    assert_eq!(strip_wall(seq.to_csv()), strip_wall(par.to_csv()));
}

#[test]
fn binary_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    let config = tmp.path().join("toy.cfg");
    fs::write(&config, "# toy run\nN=16\nb=64\nM=10\nmax_epochs=3\n").unwrap();
    let out = tmp.path().join("run");
    let output = kbc_bin()
        .args(["train", "--quiet", "--seed", "5", "--valid-sample", "20"])
        .arg("--data")
        .arg(&data)
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let record: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join(cli::RUN_RECORD_FILE)).unwrap()).unwrap();
    assert_eq!(record["config"]["seed"], 5);
    assert_eq!(record["config"]["valid_sample"], 20);
    assert_eq!(record["config"]["dim"], 16);

    let ranks = tmp.path().join("ranks.csv");
    let output = kbc_bin()
        .args([
            "eval",
            "--split",
            "valid",
            "--tie-policy",
            "pessimistic",
            "--hits",
            "1,10",
        ])
        .arg("--checkpoint")
        .arg(out.join(cli::CHECKPOINT_FILE))
        .arg("--data")
        .arg(&data)
        .arg("--ranks")
        .arg(&ranks)
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "{}",
        String::from_utf8_lossy(&output.stderr)
    );
    let metrics: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    let keys: Vec<&String> = metrics["hits"].as_object().unwrap().keys().collect();
    assert_eq!(keys, ["1", "10"]);
    assert_eq!(metrics["tie_policy"], "pessimistic");
    let rank_lines = fs::read_to_string(&ranks).unwrap().lines().count();
    assert_eq!(
        rank_lines,
        1 + metrics["num_queries"].as_u64().unwrap() as usize
    );

    let output = kbc_bin()
        .args(["train", "--quiet"])
        .arg("--data")
        .arg(tmp.path().join("nowhere"))
        .arg("--out")
        .arg(tmp.path().join("x"))
        .output()
        .unwrap();
    assert!(!output.status.success());
    assert!(String::from_utf8_lossy(&output.stderr).contains("train.txt"));
}

#[test]
fn binary_sweep_and_plot_data() {
    let tmp = tempfile::tempdir().unwrap();
    let data = toy(tmp.path());
    let sweep = tmp.path().join("grid.cfg");
    fs::write(&sweep, "b=32,16\nN=8\nM=5\nmax_epochs=1\n").unwrap();
    let out = tmp.path().join("sweep");
    let status = kbc_bin()
        .arg("sweep")
        .arg("--data")
        .arg(&data)
        .arg("--sweep")
        .arg(&sweep)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap()
        .status;
    assert!(status.success());

    let output = kbc_bin()
        .args(["plot-data", "--x", "b", "--y", "H10", "--y", "H1"])
        .arg("--csv")
        .arg(out.join(cli::LEADERBOARD_FILE))
        .output()
        .unwrap();
    assert!(output.status.success());
    let tsv = String::from_utf8(output.stdout).unwrap();
    let xs: Vec<&str> = tsv.lines().map(|l| l.split('\t').next().unwrap()).collect();
    assert_eq!(xs, ["16", "32"]);
    assert!(tsv.lines().all(|l| l.split('\t').count() == 3));

    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "").unwrap();
    let output = kbc_bin()
        .args(["plot-data", "--csv"])
        .arg(&empty)
        .output()
        .unwrap();
    assert!(output.status.success());
    assert!(output.stdout.is_empty());

    let output = kbc_bin()
        .args(["plot-data", "--y", "MAP", "--csv"])
        .arg(out.join(cli::LEADERBOARD_FILE))
        .output()
        .unwrap();
    assert!(!output.status.success());
}
