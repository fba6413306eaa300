//! Command-line driver: argument parsing, config resolution, run manifests
//! and the subcommand implementations.

pub mod config;
pub mod jobs;

use std::path::PathBuf;

use aoan_core::data::Benchmark;
use aoan_core::{Error, ErrorKind, Result, Split};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use config::{ModelArgs, RunConfig};
use jobs::*;

#[derive(Parser, Debug)]
#[command(name = "aoan", version, about = "Aspect-level sentiment classification with span-aware attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Parse SemEval XML or Twitter files into canonical JSONL plus statistics
    Ingest(IngestArgs),
    /// Class counts and average lengths of canonical files
    Stats(StatsArgs),
    /// Generate a synthetic planted-cue corpus
    Synth(SynthArgs),
    /// Train a model and write checkpoint, log, metrics and manifest
    Train(TrainArgs),
    /// Evaluate a checkpoint on a canonical file
    Eval(EvalArgs),
    /// Train and evaluate every ablation variant
    Ablate(AblateArgs),
    /// Predict the polarity of one sentence-aspect pair
    Predict(PredictArgs),
    /// Write per-span attention weights for chosen instances
    ExportAttention(ExportArgs),
    /// Paired bootstrap comparison of two sets of evaluation reports
    Compare(CompareArgs),
    /// Re-run the job recorded in a manifest
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Semeval,
    Twitter,
}

#[derive(Args, Debug)]
pub struct IngestArgs {
    /// Input format; inferred from --dataset when omitted
    #[arg(long, value_enum)]
    pub format: Option<InputFormat>,
    /// Benchmark to compare published class counts against
    #[arg(long)]
    pub dataset: Option<Benchmark>,
    #[arg(long)]
    pub train: Option<PathBuf>,
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    /// Canonical JSONL files
    #[arg(long = "input", required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub dataset: Option<Benchmark>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Cue within distance 2 of the aspect
    Near,
    /// Cue at distance exactly 5, conflicting cue at 7 or more
    Far,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, value_enum)]
    pub kind: SynthKind,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value = "train")]
    pub split: Split,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// Canonical training file
    #[arg(long)]
    pub train: PathBuf,
    /// Canonical test file, evaluated after every epoch
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<Benchmark>,
    #[arg(long = "length-threshold")]
    pub length_threshold: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Seeds to average over; defaults to the run seed
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Bootstrap resamples for the comparison against the full model
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub sentence: String,
    #[arg(long)]
    pub aspect: String,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Key into the embedding file
    #[arg(long, default_value = "input")]
    pub id: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Canonical file to draw instances from
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Instance ids to export; all instances of --data when omitted
    #[arg(long = "id", value_delimiter = ',')]
    pub ids: Vec<String>,
    /// A raw sentence; use with one or more --aspect
    #[arg(long)]
    pub sentence: Option<String>,
    #[arg(long = "aspect")]
    pub aspects: Vec<String>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    /// Metrics files of system A (one per seed)
    #[arg(long = "a", required = true)]
    pub a: Vec<PathBuf>,
    /// Metrics files of system B (one per seed)
    #[arg(long = "b", required = true)]
    pub b: Vec<PathBuf>,
    #[arg(long, default_value_t = 10_000)]
    pub resamples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ReplayArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory; defaults to the one recorded in the manifest
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Process exit code for an error.
pub fn exit_code(err: &Error) -> u8 {
    match err.kind() {
        ErrorKind::Io => 1,
        ErrorKind::Config => 2,
        ErrorKind::Data => 3,
        ErrorKind::Training => 4,
    }
}

/// Resolves arguments into a job and runs it.
pub fn run(cli: Cli) -> Result<()> {
    let job = match cli.command {
        Command::Ingest(a) => {
            let format = a
                .format
                .or(a.dataset.map(|d| if d.is_semeval() { InputFormat::Semeval } else { InputFormat::Twitter }))
                .ok_or_else(|| Error::Config("give --format or --dataset".into()))?;
            if a.train.is_none() && a.test.is_none() {
                return Err(Error::Config("give --train and/or --test".into()));
            }
            Job::Ingest(IngestJob {
                format,
                dataset: a.dataset,
                train: a.train,
                test: a.test,
                out: a.out,
            })
        }
        Command::Stats(a) => Job::Stats(StatsJob {
            inputs: a.inputs,
            dataset: a.dataset,
            out: a.out,
        }),
        Command::Synth(a) => Job::Synth(SynthJob {
            kind: a.kind,
            count: a.count,
            split: a.split,
            seed: a.seed,
            out: a.out,
        }),
        Command::Train(a) => Job::Train(TrainJob {
            config: RunConfig::resolve(&a.model)?,
            train: a.train,
            test: a.test,
            out: a.out,
        }),
        Command::Eval(a) => Job::Eval(EvalJob {
            checkpoint: a.checkpoint,
            data: a.data,
            embeddings: a.embeddings,
            length_threshold: a
                .length_threshold
                .or(a.dataset.map(Benchmark::length_threshold))
                .unwrap_or(aoan_core::TrainConfig::default().length_threshold),
            out: a.out,
        }),
        Command::Ablate(a) => {
            let config = RunConfig::resolve(&a.model)?;
            let seeds = if a.seeds.is_empty() { vec![config.seed] } else { a.seeds };
            Job::Ablate(AblateJob {
                config,
                train: a.train,
                test: a.test,
                seeds,
                resamples: a.resamples,
                out: a.out,
            })
        }
        Command::Predict(a) => Job::Predict(PredictJob {
            checkpoint: a.checkpoint,
            sentence: a.sentence,
            aspect: a.aspect,
            embeddings: a.embeddings,
            id: a.id,
            out: a.out,
        }),
        Command::ExportAttention(a) => {
            if a.data.is_none() && a.sentence.is_none() {
                return Err(Error::Config("give --data or --sentence".into()));
            }
            if a.sentence.is_some() && a.aspects.is_empty() {
                return Err(Error::Config("--sentence needs at least one --aspect".into()));
            }
            Job::ExportAttention(ExportJob {
                checkpoint: a.checkpoint,
                data: a.data,
                ids: a.ids,
                sentence: a.sentence,
                aspects: a.aspects,
                embeddings: a.embeddings,
                out: a.out,
            })
        }
        Command::Compare(a) => Job::Compare(CompareJob {
            a: a.a,
            b: a.b,
            resamples: a.resamples,
            seed: a.seed,
            out: a.out,
        }),
        Command::Replay(a) => {
            let manifest = Manifest::load(&a.manifest)?;
            let mut job = manifest.job;
            if let Some(out) = a.out {
                job.set_out(out);
            }
            job
        }
    };
    job.execute()
}
