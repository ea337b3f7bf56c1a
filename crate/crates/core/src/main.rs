use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use kbc::cli::{self, SweepSpec};
use kbc::evaluator::DEFAULT_HITS;
use kbc::{Result, TiePolicy, TrainConfig};

#[derive(Parser)]
#[command(name = "kbc", version, about = "DistMult knowledge base completion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoint, history and metrics.
    Train {
        /// Directory holding train.txt, valid.txt and test.txt.
        #[arg(long)]
        data: PathBuf,
        /// key=value config file; missing keys take the FB15k defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate one checkpoint, or an ensemble of several, under the filtered protocol.
    Eval {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "average")]
        tie_policy: TiePolicy,
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_HITS)]
        hits: Vec<usize>,
        /// Write the metrics JSON here as well as to stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-query rank CSV.
        #[arg(long)]
        ranks: Option<PathBuf>,
    },
    /// Train every point of an N/b/M grid and write a leaderboard CSV.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        valid_sample: Option<usize>,
        /// Grid points trained concurrently.
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Extract sorted (x, y...) columns from a sweep CSV for plotting.
    PlotData {
        #[arg(long)]
        csv: PathBuf,
        #[arg(long, default_value = "b")]
        x: String,
        #[arg(long = "y", default_values_t = ["H10".to_string(), "H1".to_string()])]
        ys: Vec<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    valid_sample: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    negatives: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_every: Option<usize>,
}

impl Overrides {
    fn apply(&self, config: &mut TrainConfig) {
        if let Some(v) = self.seed {
            config.seed = v;
        }
        if let Some(v) = self.valid_sample {
            config.valid_sample = Some(v);
        }
        if let Some(v) = self.dim {
            config.dim = v;
        }
        if let Some(v) = self.batch_size {
            config.batch_size = v;
        }
        if let Some(v) = self.negatives {
            config.negatives = v;
        }
        if let Some(v) = self.learning_rate {
            config.learning_rate = v;
        }
        if let Some(v) = self.max_epochs {
            config.max_epochs = v;
        }
        if let Some(v) = self.patience {
            config.patience = v;
        }
        if let Some(v) = self.eval_every {
            config.eval_every = v;
        }
    }
}

fn write_output(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| kbc::Error::Io {
        path: path.clone(),
        source,
    })
}

fn percent(fraction: f64) -> String {
    format!("{:.2}%", 100.0 * fraction)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train {
            data,
            config,
            out,
            overrides,
            quiet,
        } => {
            let mut cfg = cli::load_config(config.as_deref())?;
            overrides.apply(&mut cfg);
            let outcome = cli::cmd_train(&data, &cfg, &out, |rec| {
                if quiet {
                    return;
                }
                match rec.valid_hits10 {
                    Some(h) => eprintln!(
                        "epoch {:>4}  loss {:.6}  valid H@10 {}",
                        rec.epoch,
                        rec.mean_loss,
                        percent(h)
                    ),
                    None => eprintln!("epoch {:>4}  loss {:.6}", rec.epoch, rec.mean_loss),
                }
            })?;
            if let Some(valid) = &outcome.valid {
                let m = &valid.overall;
                println!(
                    "valid: MR {:.2}  MRR {:.4}  {}",
                    m.mean_rank,
                    m.mean_reciprocal_rank,
                    m.hits_at
                        .iter()
                        .map(|(k, h)| format!("H@{k} {}", percent(*h)))
                        .collect::<Vec<_>>()
                        .join("  ")
                );
            }
            println!("run record: {}", out.join(cli::RUN_RECORD_FILE).display());
        }
        Command::Eval {
            checkpoints,
            data,
            split,
            tie_policy,
            hits,
            out,
            ranks,
        } => {
            let evaluation = cli::cmd_eval(&checkpoints, &data, &split, tie_policy, &hits)?;
            let json = evaluation.to_json_string()?;
            print!("{json}");
            let m = &evaluation.overall;
            eprintln!(
                "{split}: MR {:.2}  MRR {:.4}  {}",
                m.mean_rank,
                m.mean_reciprocal_rank,
                m.hits_at
                    .iter()
                    .map(|(k, h)| format!("H@{k} {}", percent(*h)))
                    .collect::<Vec<_>>()
                    .join("  ")
            );
            if let Some(path) = out {
                write_output(&path, &json)?;
            }
            if let Some(path) = ranks {
                write_output(&path, &evaluation.ranks_csv())?;
            }
        }
        Command::Sweep {
            data,
            sweep,
            out,
            seed,
            valid_sample,
            workers,
        } => {
            let text = std::fs::read_to_string(&sweep).map_err(|source| kbc::Error::Io {
                path: sweep.clone(),
                source,
            })?;
            let mut spec = SweepSpec::parse(&text, &sweep.display().to_string())?;
            if let Some(s) = seed {
                spec.base.seed = s;
            }
            if let Some(n) = valid_sample {
                spec.base.valid_sample = Some(n);
            }
            let report = cli::cmd_sweep(&data, &spec, &out, workers)?;
            print!("{}", report.to_csv());
            for (index, message) in &report.failures {
                eprintln!("grid point {index} failed: {message}");
            }
        }
        Command::PlotData { csv, x, ys, out } => {
            let text = std::fs::read_to_string(&csv).map_err(|source| kbc::Error::Io {
                path: csv.clone(),
                source,
            })?;
            let tsv = cli::cmd_plot_data(&text, &x, &ys)?;
            match out {
                Some(path) => write_output(&path, &tsv)?,
                None => print!("{tsv}"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::FAILURE
        }
    }
}
