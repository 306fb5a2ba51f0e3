use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nar_cli::commands::{self, Context};
use nar_cli::config::{RunConfig, OUT_DIR_ENV};
use nar_cli::Result;
use nar_core::eval::BucketRow;
use nar_core::synth::Split;

#[derive(Parser)]
#[command(name = "nar", version, about = "Non-autoregressive masked transformer toolkit")]
struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; overrides the task, model and training seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Configuration override, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (also settable through NAR_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen,
    /// Train a model on the generated corpus.
    Train,
    /// Decode a split with a trained checkpoint.
    Decode {
        #[arg(long, default_value = "dev")]
        split: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Score a hypotheses file.
    Eval {
        #[arg(long)]
        hyps: PathBuf,
        /// Corpus split (`.bin`) or another hypotheses file.
        #[arg(long)]
        refs: Option<PathBuf>,
    },
    /// Count decoder passes and time the decoding strategies.
    Bench {
        #[arg(long = "checkpoint")]
        checkpoints: Vec<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<()> {
    let config = RunConfig::from_file(cli.config.as_deref(), &cli.overrides, cli.seed)?;
    let out = std::env::var_os(OUT_DIR_ENV)
        .map(PathBuf::from)
        .or(cli.out)
        .unwrap_or_else(|| PathBuf::from("."));
    let ctx = Context::new(config, out);
    match cli.command {
        Command::Gen => {
            let s = commands::cmd_gen(&ctx)?;
            for (split, n) in s.sizes {
                println!("{}\t{n}", split.name());
            }
            println!("corpus\t{}", s.dir.display());
        }
        Command::Train => {
            let s = commands::cmd_train(&ctx, |r| {
                let cer = r.val_cer.map_or("NA".into(), |c| format!("{c:.4}"));
                eprintln!("epoch {:>3}  step {:>6}  lr {:.2e}  loss {:.4}  val_cer {cer}", r.epoch, r.step, r.lr, r.loss);
            })?;
            println!("parameters\t{}", s.parameters);
            println!("checkpoint\t{}", s.checkpoint.display());
        }
        Command::Decode { split, checkpoint } => {
            let split = Split::parse(&split)?;
            let path = commands::cmd_decode(&ctx, checkpoint.as_deref(), split)?;
            println!("hypotheses\t{}", path.display());
        }
        Command::Eval { hyps, refs } => {
            let s = commands::cmd_eval(&ctx, &hyps, refs.as_deref())?;
            println!("utterances\t{}", s.utterances);
            println!("cer\t{:.6}", s.cer);
            println!(
                "sub\t{}\ndel\t{}\nins\t{}\nref_len\t{}",
                s.stats.substitutions, s.stats.deletions, s.stats.insertions, s.stats.ref_len
            );
            println!("{}", BucketRow::HEADER);
            for b in &s.buckets {
                println!("{}", b.to_tsv());
            }
        }
        Command::Bench { checkpoints } => {
            let report = commands::cmd_bench(&ctx, &checkpoints)?;
            print!("{}", report.to_tsv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
