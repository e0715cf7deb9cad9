//! Command-line flags and the matching config-file sections.
//!
//! Every setting is optional at this level so that flags can be layered over
//! a TOML config file, which is layered over the built-in defaults.

use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand};
use serde::Deserialize;

#[derive(Debug, Parser)]
#[command(
    name = "admri",
    version,
    about = "Bayesian and deterministic CNNs for dementia-stage MRI classification"
)]
pub struct Cli {
    /// Directory for default output paths.
    #[arg(long, global = true, env = "ADMRI_OUT_DIR")]
    pub out_dir: Option<PathBuf>,

    /// Worker threads (defaults to one per core).
    #[arg(long, global = true, env = "ADMRI_THREADS")]
    pub threads: Option<usize>,

    /// TOML file with one table per command, keys named like the flags.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with planted class patterns.
    Synth(SynthArgs),
    /// Read a `root/<class>/<image>` folder tree into a dataset file.
    Ingest(IngestArgs),
    /// Balance a dataset with SMOTE followed by Tomek-link removal.
    Resample(ResampleArgs),
    /// Train a model; writes a checkpoint, history and the held-out test set.
    Train(TrainArgs),
    /// Score a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Render Grad-CAM overlays.
    Gradcam(GradcamArgs),
    /// Merge evaluation reports into one table.
    Compare(CompareArgs),
    /// Re-run a command from its manifest and check the outputs match.
    Replay(ReplayArgs),
}

/// Fill every unset field of `self` from `file`.
macro_rules! overlay {
    ($ty:ident { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(self, file: Option<Self>) -> Self {
                let Some(file) = file else { return self };
                Self { $($field: self.$field.or(file.$field)),* }
            }
        }
    };
}

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    #[arg(long)]
    pub per_class: Option<usize>,
    /// Square image side; `--height`/`--width` override it.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// quadrants or stripes
    #[arg(long)]
    pub pattern: Option<String>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
overlay!(SynthArgs {
    classes,
    per_class,
    size,
    height,
    width,
    channels,
    pattern,
    noise,
    seed,
    out
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestArgs {
    /// Root folder with one subdirectory per class.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
overlay!(IngestArgs {
    input,
    size,
    channels,
    out
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResampleArgs {
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    /// Grow every class to this count instead of the majority count.
    #[arg(long)]
    pub target_count: Option<usize>,
    /// majority_only or both
    #[arg(long)]
    pub link_removal: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Before/after class-count CSV.
    #[arg(long)]
    pub report: Option<PathBuf>,
}
overlay!(ResampleArgs {
    input,
    k_neighbors,
    target_count,
    link_removal,
    seed,
    out,
    report
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainArgs {
    /// Dataset file to split and train on.
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// addnet, bayescnn, cnn or unet
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Fractions "train,test" or "train,val,test".
    #[arg(long)]
    pub split: Option<String>,
    /// Rebalance the training split with SMOTE-Tomek.
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    pub resample: Option<bool>,
    #[arg(long)]
    pub k_neighbors: Option<usize>,
    /// Filters per block, e.g. "16,32,64".
    #[arg(long, value_delimiter = ',')]
    pub filters: Option<Vec<usize>>,
    #[arg(long)]
    pub dense_units: Option<usize>,
    /// Fixed KL weight; the default spreads one KL over each epoch's batches.
    #[arg(long)]
    pub kl_weight: Option<f64>,
    /// Weight samples per step for Bayesian models.
    #[arg(long)]
    pub train_samples: Option<usize>,
    /// Output directory for model.bnnm, history.csv and test.imds.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
overlay!(TrainArgs {
    data,
    arch,
    lr,
    batch_size,
    dropout,
    patience,
    epochs,
    seed,
    split,
    resample,
    k_neighbors,
    filters,
    dense_units,
    kl_weight,
    train_samples,
    out,
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalArgs {
    #[arg(long, short)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// Stochastic passes averaged per prediction (Bayesian models).
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Row label in the report; defaults to the architecture.
    #[arg(long)]
    pub model_name: Option<String>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub confusion: Option<PathBuf>,
}
overlay!(EvalArgs {
    checkpoint,
    data,
    samples,
    batch_size,
    seed,
    model_name,
    out,
    confusion
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcamArgs {
    #[arg(long, short)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, short)]
    pub data: Option<PathBuf>,
    /// Sample indices, e.g. "0,4,9"; defaults to the first `--count`.
    #[arg(long, value_delimiter = ',')]
    pub indices: Option<Vec<usize>>,
    #[arg(long)]
    pub count: Option<usize>,
    /// "pred", "true", a class index or a class name.
    #[arg(long)]
    pub class: Option<String>,
    /// Convolutional layer id; defaults to the last one.
    #[arg(long)]
    pub layer: Option<String>,
    /// mean_weights or averaged[:S] (Bayesian models).
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
overlay!(GradcamArgs {
    checkpoint,
    data,
    indices,
    count,
    class,
    layer,
    mode,
    alpha,
    seed,
    out
});

#[derive(Debug, Default, Args, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareArgs {
    /// Report CSVs written by `eval`.
    #[arg(num_args = 0..)]
    pub reports: Option<Vec<PathBuf>>,
    #[arg(long, short)]
    pub out: Option<PathBuf>,
}
overlay!(CompareArgs { reports, out });

#[derive(Debug, Args)]
pub struct ReplayArgs {
    pub manifest: PathBuf,
    /// Write the outputs here instead of over the recorded paths.
    #[arg(long)]
    pub into: Option<PathBuf>,
}

/// Contents of `--config`.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: Option<SynthArgs>,
    pub ingest: Option<IngestArgs>,
    pub resample: Option<ResampleArgs>,
    pub train: Option<TrainArgs>,
    pub eval: Option<EvalArgs>,
    pub gradcam: Option<GradcamArgs>,
    pub compare: Option<CompareArgs>,
}
