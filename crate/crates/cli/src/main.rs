use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use umfda::pipeline::{self, ExperimentConfig, Layout, Preset};
use umfda::prompt::Direction;
use umfda::Error;

const EXIT_CONFIG: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "umfda", version, about = "Multi-source few-shot domain adaptation with uploadable prompt stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment config (JSON). Without it the preset is used.
    #[arg(long, global = true, conflicts_with = "preset")]
    config: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    preset: Option<PresetArg>,

    /// Overrides the experiment seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Prompt projection direction.
    #[arg(long, global = true, value_enum)]
    direction: Option<DirectionArg>,

    /// Drops a loss term from the objective; repeatable.
    #[arg(long, global = true, value_enum)]
    ablate: Vec<Ablation>,

    /// Work directory; overrides `eval.output_dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate and export the warm-up, source and target domains.
    Synth,
    /// Warm up and checkpoint the encoder, then train one prompt stack per source domain.
    Train,
    /// Average per-domain logits on the target domain and write metrics.json.
    Integrate { stacks: Vec<PathBuf> },
    /// Run synth, train and integrate in sequence.
    Eval,
    /// Write target-domain features and variance statistics.
    Export { stacks: Vec<PathBuf> },
    /// Print the resolved configuration.
    Config,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PresetArg {
    Toy,
    Paper,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum DirectionArg {
    V2t,
    T2v,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Ablation {
    Tsd,
    Tcc,
    Dda,
}

fn resolve(cli: &Cli) -> umfda::Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.preset) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, Some(PresetArg::Paper)) => ExperimentConfig::preset(Preset::Paper),
        (None, _) => ExperimentConfig::preset(Preset::Toy),
    };
    if let Some(seed) = cli.seed {
        cfg.apply_seed(seed);
    }
    if let Some(d) = cli.direction {
        cfg.train.direction = match d {
            DirectionArg::V2t => Direction::VisionToText,
            DirectionArg::T2v => Direction::TextToVision,
        };
    }
    for a in &cli.ablate {
        match a {
            Ablation::Tsd => cfg.train.losses.tsd = false,
            Ablation::Tcc => cfg.train.losses.tcc = false,
            Ablation::Dda => cfg.train.losses.dda = false,
        }
    }
    if let Some(out) = &cli.out {
        cfg.eval.output_dir = out.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    let layout = Layout::new(&cfg.eval.output_dir);
    match &cli.command {
        Command::Config => print!("{}", cfg.to_json()?),
        Command::Synth => {
            pipeline::synth(cfg, &layout)?;
            println!("datasets written to {}", layout.root.join("data").display());
        }
        Command::Train => {
            let out = pipeline::train(cfg, &layout)?;
            println!("encoder {}", out.encoder_sha256);
            for p in &out.uploads {
                println!("upload {}", p.display());
            }
            println!("{} steps logged to {}", out.log.records.len(), layout.train_log().display());
        }
        Command::Integrate { stacks } => {
            let m = pipeline::integrate(cfg, &layout, stacks)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Eval => {
            let m = pipeline::run_all(cfg, &layout)?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Export { stacks } => {
            let stats = pipeline::export(cfg, &layout, stacks)?;
            println!("{}", serde_json::to_string_pretty(&stats)?);
            println!("features written to {}", layout.features().display());
        }
    }
    Ok(())
}

fn is_config_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_config))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(if e.is_config() { EXIT_CONFIG } else { EXIT_RUNTIME });
        }
    };
    match run(&cli, &cfg).with_context(|| format!("work directory {}", cfg.eval.output_dir.display())) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(if is_config_error(&e) { EXIT_CONFIG } else { EXIT_RUNTIME })
        }
    }
}
