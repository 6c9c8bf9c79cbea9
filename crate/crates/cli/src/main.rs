use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(name = "acanet", version, about = "Speaker embeddings with asymmetric cross attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus overrides, shared by train and params.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML run configuration (default: $ACANET_CONFIG_DIR/config.toml, else built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set model.channels=64`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Ablation variant: no_mla, no_latent_blocks, no_posenc, weight_sharing.
    #[arg(long)]
    pub variant: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-speaker corpus and a trial list over its test split.
    GenData {
        #[arg(long, default_value_t = 12)]
        speakers: usize,
        #[arg(long, default_value_t = 20)]
        utts: usize,
        /// Utterance length in seconds.
        #[arg(long, default_value_t = 2.0)]
        duration: f64,
        #[arg(long, default_value_t = 8000)]
        sample_rate: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of test trials; 0 uses every pair.
        #[arg(long, default_value_t = 0)]
        trials: usize,
        #[arg(long, default_value_t = 0.5)]
        target_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoint, metrics log and resolved config to --out.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Embed every utterance of a manifest.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trial list; prints EER and minDCF.
    Score {
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        trials: PathBuf,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Score zero-norm embeddings as 0 instead of failing.
        #[arg(long)]
        allow_zero_norm: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Print the parameter count per layer and in total.
    Params {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Dump log-mel features of one WAV file.
    Fbank {
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData {
            speakers,
            utts,
            duration,
            sample_rate,
            seed,
            trials,
            target_fraction,
            out,
        } => commands::gen_data(
            &acanet::data::CorpusSpec {
                n_speakers: speakers,
                utts_per_speaker: utts,
                duration_s: duration,
                sample_rate,
                seed,
            },
            trials,
            target_fraction,
            &out,
        ),
        Command::Train { cfg, out } => commands::train(&cfg, &out),
        Command::Embed {
            checkpoint,
            manifest,
            out,
        } => commands::embed(&checkpoint, &manifest, &out),
        Command::Score {
            embeddings,
            trials,
            report,
            allow_zero_norm,
            cfg,
        } => commands::score(&embeddings, &trials, report.as_deref(), allow_zero_norm, &cfg),
        Command::Params { cfg } => commands::params(&cfg),
        Command::Fbank { wav, out, cfg } => commands::fbank(&wav, &out, &cfg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
