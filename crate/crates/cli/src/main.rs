use std::io::{self, BufReader};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use flowvit::checkpoint::Checkpoint;
use flowvit::heads::HeadKind;
use flowvit::trainer::Pipeline;
use flowvit_cli::{
    cmd_evaluate, cmd_synth, cmd_train, exit_code, infer_stream, parse_shares, EvaluateArgs, SynthArgs, TrainArgs,
    EXIT_OK, EXIT_PARTIAL,
};

#[derive(Parser)]
#[command(name = "flowvit", version, about = "Vision-transformer classification of network flow records")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic labelled flow CSV.
    Synth {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 38)]
        features: usize,
        /// Total number of rows.
        #[arg(long, default_value_t = 2000)]
        rows: usize,
        /// Class shares separated by colons, e.g. 0.995:0.005.
        #[arg(long)]
        imbalance: Option<String>,
        #[arg(long, default_value_t = 3.0)]
        margin: f64,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value = "label")]
        label_column: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "vit")]
        pipeline: Pipeline,
        /// dnn, lstm or blstm; defaults to head.kind from the config.
        #[arg(long)]
        head: Option<HeadKind>,
        /// Output directory for checkpoint.json, history.csv and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a labelled CSV with a checkpoint.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated classes removed before scoring.
        #[arg(long, default_value = "Theft", value_delimiter = ',')]
        drop_classes: Vec<String>,
    },
    /// Classify headerless feature rows from standard input.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Skip the first input line.
        #[arg(long)]
        header: bool,
    },
}

fn run(cli: Cli) -> flowvit::Result<i32> {
    match cli.command {
        Command::Synth {
            classes,
            features,
            rows,
            imbalance,
            margin,
            seed,
            label_column,
            out,
        } => {
            let imbalance = imbalance.as_deref().map(parse_shares).transpose()?;
            cmd_synth(&SynthArgs {
                classes,
                features,
                rows,
                imbalance,
                margin,
                seed,
                label_column,
                out,
            })?;
        }
        Command::Train {
            config,
            pipeline,
            head,
            out,
        } => {
            cmd_train(
                &TrainArgs {
                    config,
                    pipeline,
                    head,
                    out,
                },
                &mut io::stdout(),
            )?;
        }
        Command::Evaluate {
            checkpoint,
            data,
            out,
            drop_classes,
        } => {
            let drop_classes = drop_classes.into_iter().filter(|c| !c.is_empty()).collect();
            cmd_evaluate(
                &EvaluateArgs {
                    checkpoint,
                    data,
                    drop_classes,
                    out,
                },
                &mut io::stdout(),
            )?;
        }
        Command::Infer { checkpoint, header } => {
            let bundle = Checkpoint::load(&checkpoint)?.bundle;
            let skipped = infer_stream(
                &bundle,
                BufReader::new(io::stdin().lock()),
                io::stdout().lock(),
                io::stderr(),
                header,
            )?;
            if skipped > 0 {
                eprintln!("{skipped} line(s) skipped");
                return Ok(EXIT_PARTIAL);
            }
        }
    }
    Ok(EXIT_OK)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
