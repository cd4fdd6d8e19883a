use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mrsquant_core::{ReductionVariant, SizeVariant};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "mrsquant", version, about = "Quantify edited MR spectra with a trained network or an NNLS baseline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise one basis archive per linewidth.
    GenBasis(GenBasisArgs),
    /// Generate labelled synthetic spectra from basis archives.
    GenDataset(GenDatasetArgs),
    /// Train a network on a training and a validation archive.
    Train(TrainArgs),
    /// Predict concentrations for scans or dataset archives.
    Quantify(QuantifyArgs),
    /// Score a network and/or the NNLS baseline against known concentrations.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenBasisArgs {
    /// JSON metabolite definitions; the built-in set when omitted.
    #[arg(long)]
    pub defs: Option<PathBuf>,
    /// Lorentzian linewidths in Hz.
    #[arg(long, value_delimiter = ',', default_value = "1.0")]
    pub linewidths: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDatasetArgs {
    /// A basis archive, or a directory whose `*.basis` files are all used.
    #[arg(long)]
    pub basis: PathBuf,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Fraction of samples that receive noise.
    #[arg(long, default_value_t = 0.5)]
    pub noisy_fraction: f64,
    /// Upper end of the random noise level.
    #[arg(long, default_value_t = 0.25)]
    pub max_sigma: f64,
    /// Use this noise level for every noisy sample.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// First Sobol index to use.
    #[arg(long, default_value_t = 1)]
    pub sobol_skip: u64,
    /// Split weights such as `train=5,val=1,test=0`.
    #[arg(long, default_value = "train=1")]
    pub split: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value = "small")]
    #[serde(serialize_with = "display")]
    pub size: SizeVariant,
    #[arg(long, default_value = "strided")]
    #[serde(serialize_with = "display")]
    pub reduction: ReductionVariant,
    #[arg(long, default_value = "off,diff")]
    pub acquisitions: String,
    #[arg(long, default_value = "m")]
    pub components: String,
    #[arg(long, default_value_t = 64)]
    pub batch: usize,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 15)]
    pub patience: usize,
    #[arg(long, default_value_t = 1.0)]
    pub channel_scale: f64,
    /// Skip B0 alignment of the inputs.
    #[arg(long)]
    pub no_b0: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Checkpoint path; the loss log goes to `<out>.history.tsv`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    /// Tab-separated, one row per spectrum.
    Tsv,
    /// JSON list of named concentration maps.
    Report,
}

#[derive(Debug, Args, Serialize)]
pub struct QuantifyArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Scan or dataset archives.
    #[arg(long, num_args = 1.., required = true)]
    pub spectra: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "tsv")]
    pub format: Format,
    /// Output file; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    Nnls,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[arg(long, required_unless_present = "baseline")]
    pub model: Option<PathBuf>,
    #[arg(long, value_enum, requires = "basis")]
    pub baseline: Option<Baseline>,
    /// Basis archive (or directory) for the baseline.
    #[arg(long)]
    pub basis: Option<PathBuf>,
    /// Acquisitions fitted by the baseline.
    #[arg(long, default_value = "off,on,diff")]
    pub acquisitions: String,
    /// Components fitted by the baseline.
    #[arg(long, default_value = "r,i")]
    pub components: String,
    #[arg(long, conflicts_with = "phantom_manifest", required_unless_present = "phantom_manifest")]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub phantom_manifest: Option<PathBuf>,
    /// Metabolites to keep, renormalised, e.g. `naa,gaba,glx`.
    #[arg(long)]
    pub reduce: Option<String>,
    /// Sum Glu and Gln into GLX before reducing.
    #[arg(long, requires = "reduce")]
    pub merge_glx: bool,
    /// Report directory.
    #[arg(long)]
    pub out: PathBuf,
}

fn display<T: std::fmt::Display, S: serde::Serializer>(v: &T, s: S) -> Result<S::Ok, S::Error> {
    s.collect_str(v)
}
