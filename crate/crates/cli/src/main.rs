use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use metarims_cli::commands;
use metarims_cli::report::emit_report;
use metarims_cli::{Result, RunConfig};

#[derive(Parser)]
#[command(name = "metarims", version, about = "Train and analyse fast/slow modular recurrent agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set loop.t_in=8`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }

    /// Only when a file or override was given.
    fn load_optional(&self) -> Result<Option<RunConfig>> {
        if self.config.is_none() && self.set.is_empty() {
            Ok(None)
        } else {
            self.load().map(Some)
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train every configured variant and seed.
    Train(ConfigArgs),
    /// Greedy evaluation of a checkpoint; prints a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run the breadth-first planner instead of an agent.
        #[arg(long)]
        oracle: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train on the easy DoorKey size and evaluate on larger ones.
    Zeroshot(ConfigArgs),
    /// Pretrain on a source task, fine-tune on a target, compare with scratch.
    Curriculum(ConfigArgs),
    /// Record per-step module activity and values.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 9)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "trace")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Switch off active modules at random and count frames.
    Deactivate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        task: String,
        #[arg(long, default_value_t = 20)]
        episodes: usize,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        off_count: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long, default_value = "deactivation.csv")]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Plots and summary for a training output directory.
    Report {
        dir: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(args) => {
            for d in commands::train(&args.load()?)? {
                println!("{}", d.display());
            }
        }
        Command::Eval {
            checkpoint,
            task,
            episodes,
            seed,
            oracle,
            cfg,
        } => {
            let cfg = cfg.load_optional()?;
            let rep = commands::eval(checkpoint.as_deref(), cfg.as_ref(), &task, episodes, seed, oracle)?;
            println!("{}", serde_json::to_string(&rep)?);
        }
        Command::Zeroshot(args) => {
            let cfg = args.load()?;
            commands::zeroshot(&cfg)?;
            println!("{}", cfg.out_dir.join("zeroshot.csv").display());
        }
        Command::Curriculum(args) => {
            let cfg = args.load()?;
            commands::curriculum(&cfg)?;
            println!("{}", cfg.out_dir.join("curriculum.csv").display());
        }
        Command::Trace {
            checkpoint,
            task,
            episodes,
            seed,
            out,
            cfg,
        } => {
            let cfg = cfg.load_optional()?;
            let recs = commands::trace(&checkpoint, cfg.as_ref(), &task, episodes, seed, &out)?;
            println!("{} records in {}", recs.len(), out.join("trace.jsonl").display());
        }
        Command::Deactivate {
            checkpoint,
            task,
            episodes,
            off_count,
            seeds,
            out,
            cfg,
        } => {
            let cfg = cfg.load_optional()?;
            let rows = commands::deactivate(&checkpoint, cfg.as_ref(), &task, episodes, &off_count, &seeds, &out)?;
            println!("off_count,median_frames,median_success");
            for (o, f, s) in commands::deactivation_medians(&rows) {
                println!("{o},{f},{s}");
            }
        }
        Command::Report { dir } => {
            let r = emit_report(&dir)?;
            println!("{}", r.summary.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

