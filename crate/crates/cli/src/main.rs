use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hcae::codec::QuantMode;
use hcae_cli::stages::{self, CodecSource, Context};
use hcae_cli::{CliError, RunConfig, Workspace};

#[derive(Parser)]
#[command(name = "hcae", version, about = "Classifier-supervised compressive autoencoder pipeline")]
struct Cli {
    /// Run configuration file.
    #[arg(short, long, global = true, default_value = "hcae.toml")]
    config: PathBuf,
    /// Replace existing stage outputs.
    #[arg(long, global = true)]
    force: bool,
    /// Print nothing on success.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Source {
    Supervised,
    Unsupervised,
}

#[derive(Clone, Copy, ValueEnum)]
enum Quant {
    /// 32-bit floats, lossless with respect to the latent.
    F32,
    /// Per-channel affine 8-bit codes.
    U8,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into the workspace.
    SynthData,
    /// Train the autoencoder on reconstruction error.
    TrainAe,
    /// Train the classifier with its staged schedule.
    TrainClf,
    /// Fine-tune the autoencoder through the frozen classifier.
    TrainEnsemble,
    /// Split an autoencoder into encoder and decoder artifacts.
    ExportCodec {
        #[arg(long, value_enum, default_value = "supervised")]
        from: Source,
    },
    /// Encode an image into a `.hcl` latent file.
    Compress {
        input: PathBuf,
        /// Defaults to the input path with a `.hcl` extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "u8")]
        quant: Quant,
        /// Encoder artifact directory; defaults to the workspace codec.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Decode a `.hcl` latent file into a PNG.
    Decompress {
        input: PathBuf,
        /// Defaults to the input path with a `.png` extension.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Decoder artifact directory; defaults to the workspace codec.
        #[arg(long)]
        codec: Option<PathBuf>,
    },
    /// Score the classifier on originals and both reconstruction streams.
    Evaluate,
    /// Summarize histories, lineage and the evaluation.
    Report,
}

fn context(cli: &Cli) -> Result<Context, CliError> {
    let cfg = RunConfig::load(&cli.config)?;
    let ws = Workspace::new(cfg.output.workspace.clone());
    Ok(Context { cfg, ws, force: cli.force })
}

/// Workspace for codec commands, which may run without a config when `--codec` is given.
fn optional_workspace(cli: &Cli, codec: &Option<PathBuf>) -> Result<Option<Workspace>, CliError> {
    if codec.is_some() && !cli.config.exists() {
        return Ok(None);
    }
    Ok(Some(context(cli)?.ws))
}

fn run(cli: &Cli) -> Result<String, CliError> {
    match &cli.command {
        Command::SynthData => stages::synth_data(&context(cli)?),
        Command::TrainAe => stages::train_ae(&context(cli)?),
        Command::TrainClf => stages::train_clf(&context(cli)?),
        Command::TrainEnsemble => stages::train_ensemble_stage(&context(cli)?),
        Command::ExportCodec { from } => {
            let source = match from {
                Source::Supervised => CodecSource::Supervised,
                Source::Unsupervised => CodecSource::Unsupervised,
            };
            stages::export_codec(&context(cli)?, source)
        }
        Command::Compress {
            input,
            output,
            quant,
            codec,
        } => {
            let ws = optional_workspace(cli, codec)?;
            let output = output.clone().unwrap_or_else(|| input.with_extension(hcae::codec::EXTENSION));
            let mode = match quant {
                Quant::F32 => QuantMode::Float32,
                Quant::U8 => QuantMode::Affine8,
            };
            stages::compress(ws.as_ref(), codec.clone(), input, &output, mode, cli.force)
        }
        Command::Decompress { input, output, codec } => {
            let ws = optional_workspace(cli, codec)?;
            let output = output.clone().unwrap_or_else(|| input.with_extension("png"));
            stages::decompress(ws.as_ref(), codec.clone(), input, &output, cli.force)
        }
        Command::Evaluate => stages::evaluate(&context(cli)?),
        Command::Report => stages::report(&context(cli)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(summary) => {
            if !cli.quiet {
                println!("{}", summary.trim_end());
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
