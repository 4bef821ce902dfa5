use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdlab_cli::{error_record, run, write_error_record, Command, Common};

/// Masked-diffusion decoding lab.
#[derive(Parser)]
#[command(name = "mdlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with its model, prior and statistics.
    GenCorpus(Flags),
    /// Train the linear denoiser on a corpus.
    Train(Flags),
    /// Preference fine-tuning against rule-based repetition negatives.
    R2ft(Flags),
    /// Decode one or more windows and write their traces.
    Decode(Flags),
    /// Decode over a grid of block sizes, kernel sizes or step counts.
    Sweep(Flags),
    /// Score and audit the runs of a decode directory.
    Metrics(Flags),
    /// Tabulate closed-form log-survival of the decoding schedules.
    Hazard(Flags),
}

#[derive(Args)]
struct Flags {
    /// Config file (key = value with [subcommand] sections) or a manifest.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: $MDLAB_OUT/<subcommand>, else runs/<subcommand>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    jobs: Option<usize>,
    /// Override a config key, e.g. --set L=256. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cmd, f) = match cli.command {
        Cmd::GenCorpus(f) => (Command::GenCorpus, f),
        Cmd::Train(f) => (Command::Train, f),
        Cmd::R2ft(f) => (Command::R2ft, f),
        Cmd::Decode(f) => (Command::Decode, f),
        Cmd::Sweep(f) => (Command::Sweep, f),
        Cmd::Metrics(f) => (Command::Metrics, f),
        Cmd::Hazard(f) => (Command::Hazard, f),
    };
    let common = Common {
        config: f.config,
        seed: f.seed,
        out: f.out,
        jobs: f.jobs,
        set: f.set,
    };
    match run(cmd, &common) {
        Ok(out) => {
            println!("{}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            let record = error_record(cmd.name(), &e);
            eprintln!("{record}");
            write_error_record(&common.out_dir(cmd.name()), &record);
            ExitCode::from(2)
        }
    }
}
