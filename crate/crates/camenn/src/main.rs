use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use camenn::dataset_io::write_dataset;
use camenn::runner::{self, report_line, Session};
use camenn::{CliError, CliResult, RunConfig};
use camenn_core::synth::generate;

#[derive(Parser)]
#[command(name = "camenn", version, about = "Multi-task cross-modal alignment and conversion-rate model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file. Defaults apply to anything it leaves out.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.lr=0.001`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Shorthand for `--set seed=N`.
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> CliResult<RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model, checkpointing into the output directory every epoch.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the configuration when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Report test metrics of a checkpoint.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write the text-by-image cosine similarity matrix of held-out items as CSV.
    ExportSimilarity {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Untrained initial parameters are used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every expert kind over several seeds and tabulate test CVR AUC.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        /// Also write the table here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let mut stdout = io::stdout().lock();
    match cli.command {
        Command::GenData { common, out } => {
            let cfg = common.load()?;
            let dataset = generate(&cfg.generator())?;
            let m = write_dataset(&out, &dataset, cfg.seed, &cfg.data)?;
            writeln!(
                stdout,
                "wrote {} concepts={} items={} users={} interactions={}",
                out.display(),
                m.counts.concepts,
                m.counts.items,
                m.counts.users,
                m.counts.interactions
            )
            .ok();
        }
        Command::Train { common, data, out, resume } => {
            let cfg = common.load()?;
            let session = Session::open(&cfg, data.as_deref())?;
            runner::train(&session, Some(&out), resume, &mut stdout)?;
        }
        Command::Eval { common, data, checkpoint } => {
            let cfg = common.load()?;
            let session = Session::open(&cfg, data.as_deref())?;
            let r = runner::evaluate(&session, &checkpoint)?;
            writeln!(stdout, "{}", report_line("test", &r)).ok();
        }
        Command::ExportSimilarity { common, data, checkpoint, out } => {
            let cfg = common.load()?;
            let session = Session::open(&cfg, data.as_deref())?;
            let model = match &checkpoint {
                Some(p) => session.load_model(p)?,
                None => session.fresh_model()?,
            };
            let export = runner::similarity(&session, &model)?;
            if !export.undefined.is_empty() {
                eprintln!("warning: {} similarity cells have a zero-norm embedding", export.undefined.len());
            }
            fs::write(&out, export.to_csv()).map_err(|e| CliError::io(&out, e))?;
            writeln!(
                stdout,
                "wrote {} diagonal_mean={:.6} off_diagonal_mean={:.6}",
                out.display(),
                export.diagonal_mean(),
                export.off_diagonal_mean()
            )
            .ok();
        }
        Command::Ablate { common, data, seeds, out } => {
            let cfg = common.load()?;
            let table = runner::ablate(&cfg, data.as_deref(), &seeds, &mut io::stderr())?;
            let text = table.render();
            write!(stdout, "{text}").ok();
            if let Some(p) = out {
                fs::write(&p, &text).map_err(|e| CliError::io(&p, e))?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
