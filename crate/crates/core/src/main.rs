use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use endoseg::config::PipelineConfig;
use endoseg::{pipeline, service, Error, Result};

#[derive(Parser)]
#[command(name = "endoseg", version, about = "Corneal endothelium segmentation and morphometry")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML config file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for every randomized stage.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (for `synth`, the dataset directory).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic annotated dataset.
    Synth,
    /// Train the network on the training split.
    Train,
    /// Segment the test split (or the whole data root).
    Infer,
    /// Morphometry for every inferred label map.
    Report,
    /// Agreement statistics against the ground truth.
    Eval,
    /// Run the annotation service.
    Serve,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config = config.with_seed(seed);
    }
    if let Some(out) = &cli.out {
        match cli.command {
            Command::Synth => config.paths.data_root = out.clone(),
            _ => config.paths.output_dir = out.clone(),
        }
    }
    Ok(config)
}

fn run(cli: &Cli) -> Result<()> {
    let config = load_config(cli)?;
    match cli.command {
        Command::Synth => {
            let manifest = pipeline::cmd_synth(&config)?;
            println!("wrote {} images to {}", manifest.entries.len(), config.paths.data_root.display());
        }
        Command::Train => {
            pipeline::cmd_train(&config)?;
            println!("weights written to {}", config.paths.weights.display());
        }
        Command::Infer => {
            let n = pipeline::cmd_infer(&config)?;
            println!("segmented {n} images into {}", config.paths.output_dir.join("infer").display());
        }
        Command::Report => {
            for (name, report) in pipeline::cmd_report(&config)? {
                println!("{name}: {report}");
            }
        }
        Command::Eval => {
            let summary = pipeline::cmd_eval(&config)?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::Serve => {
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(service::serve(&config))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e),
    }
}

fn report_error(e: &Error) -> ExitCode {
    let body = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
    eprintln!("{body}");
    ExitCode::from(e.exit_code() as u8)
}
