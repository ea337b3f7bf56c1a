//! Command implementations behind the `kbc` binary: training runs, evaluation
//! of checkpoints and ensembles, hyper-parameter sweeps and plot data export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::evaluator::{evaluate, Evaluation, Scorer, TiePolicy, DEFAULT_HITS};
use crate::kb::{expand_queries, split_paths, Dataset, Vocabulary, SPLIT_FILES};
use crate::model::ModelParams;
use crate::trainer::{fit_with, EpochRecord, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const HISTORY_FILE: &str = "history.jsonl";
pub const RUN_RECORD_FILE: &str = "run.json";
pub const VALID_METRICS_FILE: &str = "metrics_valid.json";
pub const TEST_METRICS_FILE: &str = "metrics_test.json";
pub const LEADERBOARD_FILE: &str = "leaderboard.csv";
pub const FAILURES_FILE: &str = "failures.csv";

fn io_error(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(io_error(path))
}

fn read_file(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(io_error(path))
}

fn config_error(source_name: &str, message: impl Into<String>) -> Error {
    Error::Config {
        source_name: source_name.to_owned(),
        message: message.into(),
    }
}

/// `key=value` lines; blank lines and `#` comments are ignored.
fn parse_pairs(text: &str, source_name: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or_default().trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_error(
                source_name,
                format!("line {}: expected key=value, got {line:?}", idx + 1),
            )
        })?;
        pairs.push((key.trim().to_owned(), value.trim().to_owned()));
    }
    Ok(pairs)
}

fn canonical_key(key: &str) -> &str {
    match key {
        "N" => "dim",
        "b" => "batch_size",
        "M" => "negatives",
        "lr" => "learning_rate",
        other => other,
    }
}

fn parse_value<T: std::str::FromStr>(source_name: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| config_error(source_name, format!("key {key}: cannot parse {value:?}")))
}

/// Applies one `key=value` setting to `config`.
pub fn apply_setting(
    config: &mut TrainConfig,
    key: &str,
    value: &str,
    source_name: &str,
) -> Result<()> {
    let key = canonical_key(key);
    match key {
        "dim" => config.dim = parse_value(source_name, key, value)?,
        "batch_size" => config.batch_size = parse_value(source_name, key, value)?,
        "negatives" => config.negatives = parse_value(source_name, key, value)?,
        "learning_rate" => config.learning_rate = parse_value(source_name, key, value)?,
        "l2" => config.l2 = parse_value(source_name, key, value)?,
        "adam_beta1" => config.adam_beta1 = parse_value(source_name, key, value)?,
        "adam_beta2" => config.adam_beta2 = parse_value(source_name, key, value)?,
        "adam_epsilon" => config.adam_epsilon = parse_value(source_name, key, value)?,
        "max_epochs" => config.max_epochs = parse_value(source_name, key, value)?,
        "patience" => config.patience = parse_value(source_name, key, value)?,
        "eval_every" => config.eval_every = parse_value(source_name, key, value)?,
        "valid_sample" => {
            config.valid_sample = match value {
                "none" | "all" => None,
                v => Some(parse_value(source_name, key, v)?),
            }
        }
        "seed" => config.seed = parse_value(source_name, key, value)?,
        _ => return Err(config_error(source_name, format!("unknown key {key:?}"))),
    }
    Ok(())
}

/// Parses a config file body over the default configuration.
pub fn parse_config(text: &str, source_name: &str) -> Result<TrainConfig> {
    let mut config = TrainConfig::default();
    for (key, value) in parse_pairs(text, source_name)? {
        apply_setting(&mut config, &key, &value, source_name)?;
    }
    Ok(config)
}

pub fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(path) => parse_config(&read_file(path)?, &path.display().to_string()),
    }
}

/// SHA-256 over the three split files, each prefixed with its name and length.
pub fn dataset_fingerprint(data_dir: &Path) -> Result<String> {
    let mut hasher = Sha256::new();
    for (name, path) in SPLIT_FILES.iter().zip(split_paths(data_dir)) {
        let bytes = fs::read(&path).map_err(io_error(&path))?;
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        hasher.update((bytes.len() as u64).to_le_bytes());
        hasher.update(&bytes);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub dataset_fingerprint: String,
    /// Relative to the run directory.
    pub checkpoint: String,
    pub history: String,
    pub epochs_trained: usize,
    pub best_epoch: Option<usize>,
    pub valid_metrics: Option<serde_json::Value>,
    pub test_metrics: Option<serde_json::Value>,
}

impl RunRecord {
    pub fn to_json_string(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        Ok(text)
    }
}

/// Result of a training run: the record plus the full evaluations.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub record: RunRecord,
    pub valid: Option<Evaluation>,
    pub test: Option<Evaluation>,
}

fn evaluate_split<S: Scorer + ?Sized>(
    scorer: &S,
    dataset: &Dataset,
    split: &str,
    policy: TiePolicy,
    ks: &[usize],
) -> Result<Option<Evaluation>> {
    let triples = dataset.split(split)?;
    if triples.is_empty() {
        return Ok(None);
    }
    let queries = expand_queries(triples);
    evaluate(
        scorer,
        &queries,
        dataset.num_entities(),
        &dataset.filter,
        policy,
        ks,
    )
    .map(Some)
}

/// Trains on `data_dir` and writes the checkpoint, vocabulary dump, history,
/// metrics and run record into `out_dir`.
pub fn cmd_train<F: FnMut(&EpochRecord)>(
    data_dir: &Path,
    config: &TrainConfig,
    out_dir: &Path,
    on_epoch: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    let dataset = Dataset::load(data_dir)?;
    let fingerprint = dataset_fingerprint(data_dir)?;
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;

    let (params, history) = fit_with(&dataset, config, on_epoch)?;
    params.save(&out_dir.join(CHECKPOINT_FILE))?;
    dataset.vocabulary.write_dump(out_dir)?;
    history.write_jsonl(&out_dir.join(HISTORY_FILE))?;

    let valid = evaluate_split(
        &params,
        &dataset,
        "valid",
        TiePolicy::default(),
        &DEFAULT_HITS,
    )?;
    let test = evaluate_split(
        &params,
        &dataset,
        "test",
        TiePolicy::default(),
        &DEFAULT_HITS,
    )?;
    if let Some(eval) = &valid {
        write_file(&out_dir.join(VALID_METRICS_FILE), eval.to_json_string()?)?;
    }
    if let Some(eval) = &test {
        write_file(&out_dir.join(TEST_METRICS_FILE), eval.to_json_string()?)?;
    }
    let record = RunRecord {
        config: config.clone(),
        dataset_fingerprint: fingerprint,
        checkpoint: CHECKPOINT_FILE.into(),
        history: HISTORY_FILE.into(),
        epochs_trained: history.epochs.len(),
        best_epoch: history.best_epoch,
        valid_metrics: valid.as_ref().map(Evaluation::to_json),
        test_metrics: test.as_ref().map(Evaluation::to_json),
    };
    write_file(&out_dir.join(RUN_RECORD_FILE), record.to_json_string()?)?;
    Ok(TrainOutcome {
        record,
        valid,
        test,
    })
}

/// Loads a checkpoint and checks the vocabulary dump stored next to it
/// against `vocabulary`.
pub fn load_checkpoint(path: &Path, vocabulary: &Vocabulary) -> Result<ModelParams> {
    let params = ModelParams::load(path)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let dumped = Vocabulary::read_dump(dir)?;
    if dumped.entities() != vocabulary.entities() || dumped.relations() != vocabulary.relations() {
        return Err(Error::VocabularyMismatch(format!(
            "vocabulary dump in {} does not match the dataset",
            dir.display()
        )));
    }
    if params.num_entities() != vocabulary.num_entities()
        || params.num_relations() != vocabulary.num_relations()
    {
        return Err(Error::VocabularyMismatch(format!(
            "{} has {} entities and {} relations, vocabulary has {} and {}",
            path.display(),
            params.num_entities(),
            params.num_relations(),
            vocabulary.num_entities(),
            vocabulary.num_relations()
        )));
    }
    Ok(params)
}

/// Evaluates one checkpoint, or the probability-averaging ensemble of
/// several, on a split.
pub fn cmd_eval(
    checkpoints: &[PathBuf],
    data_dir: &Path,
    split: &str,
    policy: TiePolicy,
    ks: &[usize],
) -> Result<Evaluation> {
    if !matches!(split, "train" | "valid" | "test") {
        return Err(Error::UnknownSplit(split.to_owned()));
    }
    let dataset = Dataset::load(data_dir)?;
    let mut members = checkpoints
        .iter()
        .map(|p| load_checkpoint(p, &dataset.vocabulary))
        .collect::<Result<Vec<_>>>()?;
    let evaluation = match members.len() {
        0 => return Err(Error::Invalid("no checkpoint given".into())),
        1 => evaluate_split(&members.remove(0), &dataset, split, policy, ks)?,
        _ => evaluate_split(&Ensemble::new(members)?, &dataset, split, policy, ks)?,
    };
    evaluation.ok_or_else(|| Error::Invalid(format!("split {split} is empty")))
}

/// Explicit value lists for N, b and M on top of a shared configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub base: TrainConfig,
    pub dims: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub negatives: Vec<usize>,
}

impl SweepSpec {
    /// Same syntax as a config file; `dim`, `batch_size` and `negatives`
    /// accept comma-separated lists.
    pub fn parse(text: &str, source_name: &str) -> Result<Self> {
        let mut base = TrainConfig::default();
        let mut dims = None;
        let mut batch_sizes = None;
        let mut negatives = None;
        for (key, value) in parse_pairs(text, source_name)? {
            let slot = match canonical_key(&key) {
                "dim" => &mut dims,
                "batch_size" => &mut batch_sizes,
                "negatives" => &mut negatives,
                _ => {
                    apply_setting(&mut base, &key, &value, source_name)?;
                    continue;
                }
            };
            let list: Vec<usize> = value
                .split(',')
                .map(str::trim)
                .filter(|v| !v.is_empty())
                .map(|v| parse_value(source_name, &key, v))
                .collect::<Result<_>>()?;
            if list.is_empty() {
                return Err(config_error(
                    source_name,
                    format!("key {key}: empty value list"),
                ));
            }
            *slot = Some(list);
        }
        Ok(SweepSpec {
            dims: dims.unwrap_or_else(|| vec![base.dim]),
            batch_sizes: batch_sizes.unwrap_or_else(|| vec![base.batch_size]),
            negatives: negatives.unwrap_or_else(|| vec![base.negatives]),
            base,
        })
    }

    /// Cartesian product, N outermost and M innermost.
    pub fn grid(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &dim in &self.dims {
            for &batch_size in &self.batch_sizes {
                for &negatives in &self.negatives {
                    out.push(TrainConfig {
                        dim,
                        batch_size,
                        negatives,
                        ..self.base.clone()
                    });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dim: usize,
    pub batch_size: usize,
    pub negatives: usize,
    /// Validation Hits@1 and Hits@10 in percent.
    pub hits1: f64,
    pub hits10: f64,
    pub mrr: f64,
    pub mr: f64,
    pub epochs: usize,
    pub wall_seconds: f64,
}

pub const SWEEP_HEADER: &str = "N,b,M,H1,H10,MRR,MR,epochs,wall_seconds";

#[derive(Debug, Clone, Default)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Grid index and error message of every failed point.
    pub failures: Vec<(usize, String)>,
}

impl SweepReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{:.3}",
                r.dim,
                r.batch_size,
                r.negatives,
                r.hits1,
                r.hits10,
                r.mrr,
                r.mr,
                r.epochs,
                r.wall_seconds
            )
            .expect("write to string");
        }
        out
    }
}

/// Runs every grid point (each in `out_dir/run_<index>`), writes the
/// leaderboard CSV and a failure log. Failed points are skipped.
pub fn cmd_sweep(
    data_dir: &Path,
    spec: &SweepSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<SweepReport> {
    let grid = spec.grid();
    fs::create_dir_all(out_dir).map_err(io_error(out_dir))?;
    let run_point =
        |(index, config): (usize, &TrainConfig)| -> std::result::Result<SweepRow, String> {
            let started = Instant::now();
            let run_dir = out_dir.join(format!("run_{index:03}"));
            let outcome =
                cmd_train(data_dir, config, &run_dir, |_| {}).map_err(|e| e.to_string())?;
            let valid = outcome.valid.ok_or("validation split is empty")?;
            let m = &valid.overall;
            Ok(SweepRow {
                dim: config.dim,
                batch_size: config.batch_size,
                negatives: config.negatives,
                hits1: 100.0 * m.hits_at[&1],
                hits10: 100.0 * m.hits_at[&10],
                mrr: m.mean_reciprocal_rank,
                mr: m.mean_rank,
                epochs: outcome.record.epochs_trained,
                wall_seconds: started.elapsed().as_secs_f64(),
            })
        };
    let results: Vec<_> = if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?;
        pool.install(|| grid.par_iter().enumerate().map(run_point).collect())
    } else {
        grid.iter().enumerate().map(run_point).collect()
    };
    let mut report = SweepReport::default();
    for (index, result) in results.into_iter().enumerate() {
        match result {
            Ok(row) => report.rows.push(row),
            Err(message) => report.failures.push((index, message)),
        }
    }
    write_file(&out_dir.join(LEADERBOARD_FILE), report.to_csv())?;
    let mut failures = String::from("index,error\n");
    for (index, message) in &report.failures {
        writeln!(failures, "{index},\"{}\"", message.replace('"', "'")).expect("write to string");
    }
    write_file(&out_dir.join(FAILURES_FILE), failures)?;
    Ok(report)
}

const PLOT_X: [&str; 3] = ["b", "N", "M"];
const PLOT_Y: [&str; 4] = ["H1", "H10", "MRR", "MR"];

/// Turns a sweep CSV into tab-separated `x y1 y2 ...` lines sorted by `x`.
pub fn cmd_plot_data(sweep_csv: &str, x: &str, ys: &[String]) -> Result<String> {
    if !PLOT_X.contains(&x) {
        return Err(Error::Invalid(format!(
            "unknown x column {x:?} (expected b, N or M)"
        )));
    }
    if ys.is_empty() {
        return Err(Error::Invalid("at least one y column is required".into()));
    }
    if let Some(y) = ys.iter().find(|y| !PLOT_Y.contains(&y.as_str())) {
        return Err(Error::Invalid(format!(
            "unknown y column {y:?} (expected H1, H10, MRR or MR)"
        )));
    }
    let mut lines = sweep_csv.lines().filter(|l| !l.trim().is_empty());
    let Some(header) = lines.next() else {
        return Ok(String::new());
    };
    let columns: Vec<&str> = header.split(',').map(str::trim).collect();
    let column = |name: &str| {
        columns
            .iter()
            .position(|c| *c == name)
            .ok_or_else(|| Error::Invalid(format!("sweep CSV has no column {name:?}")))
    };
    let x_col = column(x)?;
    let y_cols = ys.iter().map(|y| column(y)).collect::<Result<Vec<_>>>()?;

    let mut rows = Vec::new();
    for (idx, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let get = |col: usize| -> Result<f64> {
            fields.get(col).and_then(|v| v.parse().ok()).ok_or_else(|| {
                Error::Invalid(format!(
                    "sweep CSV row {}: bad value in column {col}",
                    idx + 2
                ))
            })
        };
        let xv = get(x_col)?;
        let yv = y_cols.iter().map(|&c| get(c)).collect::<Result<Vec<_>>>()?;
        rows.push((xv, yv));
    }
    rows.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = String::new();
    for (xv, yv) in rows {
        out.push_str(&xv.to_string());
        for v in yv {
            write!(out, "\t{v}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}
