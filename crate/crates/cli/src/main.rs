//! `maskpred` command line.
//!
//! Every command reads an optional `--config` file, applies `--seed`, and
//! writes its outputs under `--out`. Logs go to standard error; failures end
//! with a single `ERR <code>: <message>` line and exit status 1.

mod commands;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "maskpred", version, about = "Masked-prediction target experiments")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Seed for every model-side component; `gen-corpus` uses it as the corpus seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Experiment config file (sections of `key = value`).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    /// Corpus manifest; the synthetic corpus of the config is generated when absent.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write the synthetic corpus: manifest.tsv, wav/, clean/, labels/.
    GenCorpus,
    /// Write one feature tensor per utterance to features/.
    ExtractFeatures {
        /// logmel, mfcc, spectrum or waveform.
        #[arg(long, default_value = "logmel")]
        kind: String,
    },
    /// Build iteration-1 targets: codebook.cdbk, targets.tgts and, for model-based strategies, initial.ckpt.
    TrainInitial {
        /// mfcc, mels or random.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long)]
        k: Option<usize>,
    },
    /// Fit k-means on feature tensors and write codebook.cdbk.
    KmeansFit {
        /// Tensor files or directories of `.mtl` files; rows are points.
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        /// Feature kind of the inputs, recorded in the codebook.
        #[arg(long, default_value = "mfcc")]
        kind: String,
        /// Encoder layer the inputs came from; marks a layer codebook.
        #[arg(long)]
        layer: Option<usize>,
    },
    /// Assign the corpus to codebooks and write targets.tgts, one stream per codebook.
    MakeTargets {
        #[arg(long, required = true, num_args = 1..)]
        codebook: Vec<PathBuf>,
        /// Model whose layers were clustered; required for layer codebooks.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train a fresh encoder on a target file; writes model.ckpt and train_loss.tsv.
    Train {
        #[arg(long)]
        targets: PathBuf,
        /// single, flat or conditional; single for one stream, the config's mode otherwise.
        #[arg(long)]
        head_mode: Option<String>,
    },
    /// Write per-utterance hidden states to layers/L<l>/.
    DumpLayers {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated layers; all of them when absent.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
    },
    /// Train the residual quantizer; writes model.rvqm, rvq_mse.tsv and targets.tgts.
    RvqTrain {
        /// Target file whose first stream pins level 1.
        #[arg(long)]
        targets: Option<PathBuf>,
        #[arg(long)]
        levels: Option<usize>,
    },
    /// Probe a checkpoint; writes probe.tsv and layer_weights.tsv.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        /// phone, speaker, denoise or all.
        #[arg(long, default_value = "all")]
        task: String,
    },
    /// Run or resume the iterative pipeline in --out; writes summary.tsv.
    PipelineRun {
        #[arg(long)]
        max_iterations: Option<usize>,
        /// layer, multilayer or rvq.
        #[arg(long)]
        targets: Option<String>,
    },
    /// One cell per value of an axis; writes grid.tsv.
    Grid {
        /// clusters, layers, rvq_levels or strategies.
        #[arg(long)]
        axis: String,
        /// Comma-separated values; layer sets join layers with `+`.
        #[arg(long)]
        values: String,
        /// Shared model to cluster; a two-iteration run is trained when absent.
        #[arg(long)]
        base: Option<PathBuf>,
    },
    /// Summarise a pipeline run or grid directory into report.tsv.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).target(env_logger::Target::Stderr).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERR usage: {first}");
            return ExitCode::FAILURE;
        }
    };
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("ERR {}: {}", e.code(), e.to_string().replace(['\n', '\r'], " "));
            ExitCode::FAILURE
        }
    }
}
