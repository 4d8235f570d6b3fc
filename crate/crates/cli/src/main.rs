use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zoomnet_cli::{
    cmd_ablate, cmd_eval, cmd_gen, cmd_gradcheck, cmd_propose, cmd_train, CliError, CliResult, Preset, DEFAULT_BUDGET,
};

#[derive(Parser)]
#[command(name = "zoomnet", version, about = "Region proposals with a zoom-out-and-in network")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train, cal and eval splits.
    Gen {
        /// Scene spec (`key = value`), including train_images, cal_images, eval_images.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus seed; overrides `seed` in the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and calibrate its proposal stage.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Corpus root written by `gen`.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Test scales used for calibration.
        #[arg(long, value_delimiter = ',', default_value = "256,192,128")]
        scales: Vec<usize>,
    },
    /// Write ranked proposals for every image of a split as JSON lines.
    Propose {
        /// `model.ckpt` or the run directory holding it.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Corpus root (its eval split is used) or a split directory.
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        /// Override the scales stored with the checkpoint.
        #[arg(long, value_delimiter = ',')]
        scales: Option<Vec<usize>>,
        /// Accepted for uniformity; proposal generation is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score proposals against annotations.
    Eval {
        proposals: PathBuf,
        annotations: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        /// Model config for the full-network check.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, propose and evaluate one ablation arm.
    Ablate {
        /// zoomout, zip-noMAD, zip-mad or split-anchors.
        preset: Preset,
        /// Base run config the preset modifies.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DEFAULT_BUDGET)]
        budget: usize,
        #[arg(long, value_delimiter = ',', default_value = "256,192,128")]
        scales: Vec<usize>,
    },
}

fn run(cli: Cli, argv: &[String]) -> CliResult<()> {
    match cli.command {
        Command::Gen { config, seed, out } => {
            let m = cmd_gen(config.as_deref(), seed, &out, argv)?;
            println!("corpus_sha256 {}", m.corpus_sha256.unwrap_or_default());
        }
        Command::Train { config, corpus, out, seed, scales } => {
            let t = cmd_train(config.as_deref(), &corpus, &out, seed, &scales, argv)?;
            println!("checkpoint {} sha256 {}", t.checkpoint.display(), t.manifest.checkpoint_sha256.unwrap_or_default());
        }
        Command::Propose { checkpoint, corpus, out, budget, scales, seed: _ } => {
            let m = cmd_propose(&checkpoint, &corpus, &out, budget, scales.as_deref(), argv)?;
            println!("{}", m.metrics);
        }
        Command::Eval { proposals, annotations, out } => {
            let r = cmd_eval(&proposals, &annotations, &out, argv)?;
            for (n, ar) in &r.ar {
                println!("AR@{n} {ar:.4}");
            }
            for b in &r.buckets {
                match b.ar {
                    Some(v) => println!("AR@{:?}@{} {v:.4}", b.bucket, r.bucket_budget),
                    None => println!("AR@{:?}@{} absent", b.bucket, r.bucket_budget),
                }
            }
        }
        Command::Gradcheck { config, seed } => {
            let s = cmd_gradcheck(config.as_deref(), seed)?;
            for l in s.lines() {
                println!("{l}");
            }
            if !s.passed {
                return Err(CliError::new(
                    "gradcheck_failed",
                    format!("max relative error {:.3e} exceeds tolerance", s.max_rel_error),
                ));
            }
        }
        Command::Ablate { preset, config, corpus, out, seed, budget, scales } => {
            let a = cmd_ablate(preset, config.as_deref(), &corpus, &out, seed, budget, &scales, argv)?;
            println!("{} AR@{budget} {:.4}", preset.name(), a.report.ar_at(budget).unwrap_or(0.0));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.render().to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::new("usage", first).line());
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    // The manifest records the invocation, not where the binary lives.
    let recorded: Vec<String> = std::iter::once("zoomnet".to_string()).chain(argv.iter().skip(1).cloned()).collect();
    match run(cli, &recorded) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
