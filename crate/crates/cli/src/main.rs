//! `c3net`: run the pipeline stages from the command line.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 invalid
//! configuration or missing checkpoint. Failures print one `error: ...` line
//! on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use c3net::config::RunConfig;
use c3net::control::Fusion;
use c3net::data::Modality;
use c3net::pipeline;
use c3net::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "c3net",
    version,
    about = "Compound-conditioned multimodal diffusion at desk scale"
)]
struct Cli {
    /// TOML run configuration; every key is optional.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed (overrides run.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory (overrides run.out).
    #[arg(long, global = true)]
    out: Option<String>,
    /// Control-residual weight (overrides control.alpha).
    #[arg(long, global = true, allow_negative_numbers = true)]
    alpha: Option<f64>,
    /// How per-condition residuals combine (overrides control.fusion).
    #[arg(long, global = true, value_parser = parse_fusion)]
    fusion: Option<Fusion>,
    /// Train only the control branch (sets control.freeze_base).
    #[arg(long, global = true)]
    freeze_base: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render the synthetic dataset.
    GenData,
    /// Masked-reconstruction pretraining of each encoder.
    Pretrain,
    /// Contrastive alignment of the pretrained encoders.
    Align,
    /// Train the denoiser and control branch of every configured output.
    Train,
    /// Generate outputs for the test concepts from the given conditions.
    Sample {
        /// Comma list from {image,audio,text}.
        #[arg(long, required = true, value_delimiter = ',', value_parser = parse_modality)]
        conditions: Vec<Modality>,
    },
    /// Score retrieval and generation into metrics/eval.csv.
    Eval,
    /// Render SVG charts from the metric CSVs.
    Report,
    /// Generate from deliberately contradictory conditions.
    DemoContradict,
    /// gen-data, pretrain, align, train, eval and report in one go.
    All,
}

fn parse_fusion(s: &str) -> Result<Fusion, String> {
    Fusion::parse(s).map_err(|e| e.to_string())
}

fn parse_modality(s: &str) -> Result<Modality, String> {
    Modality::parse(s).map_err(|e| e.to_string())
}

fn config(cli: &Cli) -> c3net::Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.run.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.run.out = o.clone();
    }
    if let Some(a) = cli.alpha {
        cfg.control.alpha = a;
    }
    if let Some(f) = cli.fusion {
        cfg.control.fusion = f;
    }
    if cli.freeze_base {
        cfg.control.freeze_base = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> c3net::Result<()> {
    let cfg = config(cli)?;
    let dir = match &cli.command {
        Command::GenData => pipeline::gen_data(&cfg)?,
        Command::Pretrain => pipeline::pretrain(&cfg)?,
        Command::Align => pipeline::align(&cfg)?,
        Command::Train => pipeline::train(&cfg)?,
        Command::Sample { conditions } => {
            let mut conds: Vec<Modality> = conditions.clone();
            conds.sort();
            conds.dedup();
            pipeline::sample(&cfg, &conds)?
        }
        Command::Eval => pipeline::eval(&cfg)?,
        Command::Report => pipeline::report(&cfg)?,
        Command::DemoContradict => pipeline::demo_contradict(&cfg)?,
        Command::All => pipeline::run_all(&cfg)?,
    };
    log::info!("done: {}", dir.root.display());
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::CheckpointNotFound(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().split_whitespace().collect::<Vec<_>>().join(" ");
            eprintln!("error: {msg}");
            ExitCode::from(exit_code(&e))
        }
    }
}
