use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use raserec_core::config::RunConfig;
use raserec_core::pipeline::{artifact_root, exit_code, AblationKind, Command, Run, ARTIFACT_ROOT_ENV};
use raserec_core::Error;

#[derive(Parser)]
#[command(name = "raserec", version, about = "Retrieval-augmented sequential recommendation pipeline")]
#[command(after_help = format!("Artifacts go to ${ARTIFACT_ROOT_ENV}/<fingerprint> (default ./artifacts)."))]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    /// Configuration file (`key = value` lines, `include <path>`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Read and filter the interaction log.
    Ingest,
    /// Pre-train the backbone.
    Pretrain,
    /// Encode the memory bank and build its index.
    BuildBank,
    /// Fine-tune the retrieval-augmented module.
    Raft,
    /// Evaluate the backbone and the augmented model on the test split.
    Eval,
    /// Run ablation protocols.
    Ablate {
        #[arg(long, value_enum, default_value = "all")]
        kind: Kind,
    },
    /// Recommend items after a sequence of item names.
    Recommend {
        /// Comma-separated item names, oldest first.
        #[arg(long, value_delimiter = ',', required = true)]
        items: Vec<String>,
    },
    /// Print the effective configuration and its fingerprints.
    Config,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Drift,
    Partition,
    Noise,
    Sweep,
    All,
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut c = match &cli.config {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    for o in &cli.overrides {
        c.set_pair(o)?;
    }
    c.validate()?;
    Ok(c)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let config = load_config(cli)?;
    if let Cmd::Config = cli.command {
        print!("{}", config.canonical());
        println!("# fingerprint {}", config.fingerprint());
        println!("# artifact fingerprint {}", config.artifact_fingerprint());
        return Ok(());
    }
    let commands = match &cli.command {
        Cmd::Ingest => vec![Command::Ingest],
        Cmd::Pretrain => vec![Command::Pretrain],
        Cmd::BuildBank => vec![Command::BuildBank],
        Cmd::Raft => vec![Command::Raft],
        Cmd::Eval => vec![Command::Eval],
        Cmd::Ablate { kind } => match kind {
            Kind::Drift => vec![Command::Ablate(AblationKind::Drift)],
            Kind::Partition => vec![Command::Ablate(AblationKind::Partition)],
            Kind::Noise => vec![Command::Ablate(AblationKind::Noise)],
            Kind::Sweep => vec![Command::Ablate(AblationKind::Sweep)],
            Kind::All => AblationKind::ALL.into_iter().map(Command::Ablate).collect(),
        },
        Cmd::Recommend { items } => vec![Command::Recommend(items.clone())],
        Cmd::Config => unreachable!(),
    };
    let run = Run::new(config, &artifact_root())?;
    for c in &commands {
        let out = run.execute(c, &mut |line| eprintln!("{line}"))?;
        print!("{out}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
