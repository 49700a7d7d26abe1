//! `beetsense <subcommand> --config path [overrides]`

use std::path::PathBuf;
use std::process::ExitCode;

use beetsense::config::{Method, RunConfig};
use beetsense::pipeline;
use beetsense::preprocess::Variant;
use beetsense::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

const WORKDIR_ENV: &str = "BEETSENSE_WORKDIR";

#[derive(Parser)]
#[command(name = "beetsense", version, about = "Unsupervised field-level stress detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled dataset into the work directory.
    Synth(Overrides),
    /// Build the sub-patch store for the configured variant.
    Preprocess(Overrides),
    /// Train one autoencoder per seed.
    Train(Overrides),
    /// Write feature matrices (baseline or latent).
    Features(Overrides),
    /// Fit k-means on the features.
    Cluster(Overrides),
    /// Map clusters to classes and aggregate per field.
    Predict(Overrides),
    /// Score predictions against labels.
    Evaluate(Overrides),
    /// Precision, recall and F1 over the threshold grid.
    Sweep(Overrides),
    /// Run every configured method and print the comparison table.
    Compare(Overrides),
}

fn parse_json_token<T: DeserializeOwned>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// JSON run configuration; flags below override its keys.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    method: Option<Method>,
    #[arg(long)]
    temporal_encodings: Option<bool>,
    #[arg(long, value_parser = parse_json_token::<beetsense::temporal_encoding::EncodingMode>)]
    encoding_mode: Option<beetsense::temporal_encoding::EncodingMode>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    latent_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    mapping_strategy: Option<beetsense::cluster_agg::MappingStrategy>,
    #[arg(long)]
    scenes: Option<PathBuf>,
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Work directory; falls back to the config key, then $BEETSENSE_WORKDIR.
    #[arg(long)]
    workdir: Option<PathBuf>,
}

impl Overrides {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($f:ident),*) => {$(
                if let Some(v) = self.$f.clone() {
                    cfg.$f = v;
                }
            )*};
        }
        set!(variant, method, temporal_encodings, encoding_mode, alpha, bins, latent_dim);
        set!(epochs, batch_size, learning_rate, seeds, mapping_strategy);
        if self.scenes.is_some() {
            cfg.scenes = self.scenes.clone();
        }
        if self.labels.is_some() {
            cfg.labels = self.labels.clone();
        }
        if self.workdir.is_some() {
            cfg.workdir = self.workdir.clone();
        }
        if cfg.workdir.is_none() {
            cfg.workdir = std::env::var_os(WORKDIR_ENV).map(PathBuf::from);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(cmd: &Command) -> Result<String> {
    let (o, step): (&Overrides, fn(&RunConfig) -> Result<String>) = match cmd {
        Command::Synth(o) => (o, pipeline::cmd_synth),
        Command::Preprocess(o) => (o, pipeline::cmd_preprocess),
        Command::Train(o) => (o, pipeline::cmd_train),
        Command::Features(o) => (o, pipeline::cmd_features),
        Command::Cluster(o) => (o, pipeline::cmd_cluster),
        Command::Predict(o) => (o, pipeline::cmd_predict),
        Command::Evaluate(o) => (o, pipeline::cmd_evaluate),
        Command::Sweep(o) => (o, pipeline::cmd_sweep),
        Command::Compare(o) => (o, pipeline::cmd_compare),
    };
    step(&o.resolve()?)
}

fn error_line(e: &Error) -> String {
    serde_json::json!({ "error": e.kind(), "message": e.to_string() }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli.command) {
        Ok(out) => {
            println!("{out}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
