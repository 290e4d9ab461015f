mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dialdesc::ErrorKind;

use config::{one_line, RunConfig};

#[derive(Parser)]
#[command(name = "dialdesc", version, about = "Generate image descriptions from question-answer dialogues")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// run config (TOML)
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// beam size
    #[arg(long)]
    beam: Option<usize>,
    /// output directory, overrides paths.out_dir
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// join dialogues with captions and write train/dev/test corpora
    BuildDataset(Common),
    Train {
        #[command(flatten)]
        common: Common,
        /// continue from paths.checkpoint
        #[arg(long)]
        resume: bool,
    },
    /// decode the test corpus
    Generate {
        #[command(flatten)]
        common: Common,
        /// argmax decoding instead of beam search
        #[arg(long)]
        greedy: bool,
    },
    /// score a hypothesis file against the test corpus
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// defaults to <out>/hypotheses.jsonl
        #[arg(long)]
        hyps: Option<PathBuf>,
    },
    /// generate and evaluate once per beam size in sweep_beams
    SweepBeam(Common),
    /// dump co-attention and decoder attention for one record
    InspectAttention {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        record: String,
    },
}

fn load(c: &Common) -> dialdesc::Result<RunConfig> {
    let mut cfg = RunConfig::load(&c.config)?;
    if let Some(s) = c.seed {
        cfg.set_seed(s);
    }
    if let Some(k) = c.beam {
        cfg.beam = k;
        cfg.sweep_beams = vec![k];
    }
    if let Some(o) = &c.out {
        cfg.paths.out_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> dialdesc::Result<()> {
    match cli.command {
        Command::BuildDataset(c) => commands::build(&load(&c)?),
        Command::Train { common, resume } => commands::train(&load(&common)?, resume),
        Command::Generate { common, greedy } => commands::generate(&load(&common)?, greedy),
        Command::Evaluate { common, hyps } => commands::evaluate(&load(&common)?, hyps),
        Command::SweepBeam(c) => commands::sweep_beam(&load(&c)?),
        Command::InspectAttention { common, record } => commands::inspect_attention(&load(&common)?, &record),
    }
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Numeric => 4,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or_default().trim_start_matches("error: ");
            eprintln!("error[config]: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
