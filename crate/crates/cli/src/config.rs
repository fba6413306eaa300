//! Run configuration: built-in defaults, an optional TOML file, then flags.

use std::fs;
use std::path::{Path, PathBuf};

use aoan_core::data::Benchmark;
use aoan_core::encoder::{EncoderConfig, EncoderKind};
use aoan_core::{Error, ModelConfig, Result, TrainConfig, Variant};
use clap::Args;
use serde::{Deserialize, Serialize};

/// Span threshold when no benchmark is named.
pub const DEFAULT_SPAN_THRESHOLD: usize = 4;

/// Learning rate for precomputed pretrained features; the toy encoder trains
/// from scratch and uses the core default instead.
pub const PRETRAINED_LR: f64 = 2e-5;

/// Model and training flags shared by the training subcommands. Every field
/// is optional so that unset flags fall through to the config file.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// TOML file with any of the keys below (snake_case)
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Benchmark whose defaults to apply: laptop, restaurant or twitter
    #[arg(long)]
    pub dataset: Option<Benchmark>,
    /// full, nonall, nonspan, aspect, maxpool or single(l)
    #[arg(long)]
    pub variant: Option<Variant>,
    /// Largest span size L
    #[arg(long = "span-threshold")]
    pub span_threshold: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub dim: Option<usize>,
    /// toy or precomputed
    #[arg(long)]
    pub encoder: Option<EncoderKind>,
    /// Precomputed embedding file (with --encoder precomputed)
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Self-attention blocks in the toy encoder
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long = "max-len")]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// L2 weight
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Sentences with at least this many tokens count as long
    #[arg(long = "length-threshold")]
    pub length_threshold: Option<usize>,
}

/// Keys accepted in the TOML config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub dataset: Option<Benchmark>,
    pub variant: Option<Variant>,
    pub span_threshold: Option<usize>,
    pub heads: Option<usize>,
    pub dim: Option<usize>,
    pub encoder: Option<EncoderKind>,
    pub embeddings: Option<PathBuf>,
    pub layers: Option<usize>,
    pub max_len: Option<usize>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub length_threshold: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::storage(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Fully resolved configuration, as recorded in run manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub dataset: Option<Benchmark>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub embeddings: Option<PathBuf>,
}

impl RunConfig {
    pub fn resolve(args: &ModelArgs) -> Result<Self> {
        let file = match &args.config {
            Some(path) => FileConfig::load(path)?,
            None => FileConfig::default(),
        };
        macro_rules! pick {
            ($field:ident) => {
                args.$field.clone().or(file.$field.clone())
            };
        }
        let model_defaults = ModelConfig::default();
        let train_defaults = TrainConfig::default();
        let dataset = pick!(dataset);
        let seed = pick!(seed).unwrap_or(train_defaults.seed);
        let dim = pick!(dim).unwrap_or(model_defaults.dim);
        let heads = pick!(heads).unwrap_or(model_defaults.heads);
        let kind = pick!(encoder).unwrap_or(EncoderKind::Toy);
        let embeddings = pick!(embeddings);
        let encoder_defaults = EncoderConfig::default();
        let model = ModelConfig {
            dim,
            heads,
            span_threshold: pick!(span_threshold)
                .unwrap_or_else(|| dataset.map_or(DEFAULT_SPAN_THRESHOLD, Benchmark::default_span_threshold)),
            variant: pick!(variant).unwrap_or(Variant::Full),
            lambda: pick!(lambda).unwrap_or(model_defaults.lambda),
            encoder: EncoderConfig {
                kind,
                dim,
                heads,
                layers: pick!(layers).unwrap_or(encoder_defaults.layers),
                trainable: kind == EncoderKind::Toy,
                max_len: pick!(max_len).unwrap_or(encoder_defaults.max_len),
            },
        };
        let train = TrainConfig {
            lr: pick!(lr).unwrap_or(match kind {
                EncoderKind::Toy => train_defaults.lr,
                EncoderKind::Precomputed => PRETRAINED_LR,
            }),
            epochs: pick!(epochs).unwrap_or(train_defaults.epochs),
            batch_size: pick!(batch_size).unwrap_or(train_defaults.batch_size),
            seed,
            length_threshold: pick!(length_threshold)
                .unwrap_or_else(|| dataset.map_or(train_defaults.length_threshold, Benchmark::length_threshold)),
            ..train_defaults
        };
        let cfg = RunConfig {
            seed,
            dataset,
            model,
            train,
            embeddings,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        match (self.model.encoder.kind, &self.embeddings) {
            (EncoderKind::Precomputed, None) => Err(Error::Config("--encoder precomputed needs --embeddings".into())),
            (EncoderKind::Toy, Some(_)) => Err(Error::Config("--embeddings is only used with --encoder precomputed".into())),
            _ => Ok(()),
        }
    }
}
