use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use music_cdr::cli::{self, Store};
use music_cdr::config::RunConfig;
use music_cdr::Error;

/// Cold-start cross-domain recommendation with a conditional diffusion model.
///
/// Log verbosity is read from MUSIC_LOG (e.g. MUSIC_LOG=info).
#[derive(Parser)]
#[command(name = "music", version)]
struct Args {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stage; overrides the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory.
    #[arg(long, global = true, default_value = "music-out")]
    out: PathBuf,
    /// Extra `key=value` overrides, applied last.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read rating files and embeddings into a corpus artifact.
    Ingest,
    /// Generate a planted synthetic corpus.
    Synth,
    /// Fit feature projectors for each split.
    Pretrain,
    /// Train the denoiser for each split.
    Train,
    /// Generate target features for the cold-start users.
    Infer,
    /// Score the trained models.
    Evaluate,
    /// Run the ablation matrix, or the diffusion-step sweep.
    Ablate {
        /// Sweep the step count instead (values from `sweep_steps`).
        #[arg(long)]
        sweep: bool,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Parse { .. } => 2,
        Error::Validation(_) => 3,
        Error::DegenerateSplit(_) => 4,
        Error::Config(_) => 5,
        Error::State(_) => 6,
        Error::Dependency { .. } => 7,
        Error::Format(_) => 8,
        Error::Io { .. } => 9,
    }
}

fn run(args: Args) -> music_cdr::Result<()> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = args.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    cfg.apply_overrides(&args.overrides)?;
    cfg.validate()?;
    let store = Store::open(&args.out)?;
    match args.command {
        Command::Ingest => println!("{}", cli::cmd_ingest(&store, &cfg)?.display()),
        Command::Synth => println!("{}", cli::cmd_synth(&store, &cfg)?.display()),
        Command::Pretrain => cli::cmd_pretrain(&store, &cfg)?
            .iter()
            .for_each(|p| println!("{}", p.display())),
        Command::Train => cli::cmd_train(&store, &cfg)?
            .iter()
            .for_each(|p| println!("{}", p.display())),
        Command::Infer => cli::cmd_infer(&store, &cfg)?
            .iter()
            .for_each(|p| println!("{}", p.display())),
        Command::Evaluate => println!("{}", cli::cmd_evaluate(&store, &cfg)?.0.display()),
        Command::Ablate { sweep } => println!("{}", cli::cmd_ablate(&store, &cfg, sweep)?.display()),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MUSIC_LOG", "warn")).init();
    match run(Args::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::from(exit_code(&e))
        }
    }
}
