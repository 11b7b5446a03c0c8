use std::path::{Path, PathBuf};
use std::process::ExitCode;

use breathae_cli::commands;
use breathae_cli::experiments::Experiment;
use breathae_cli::{CliError, CliResult, RunConfig};
use clap::{Parser, Subcommand};

/// Generative and discriminative modeling of breathing signals.
#[derive(Debug, Parser)]
#[command(name = "breathae", version)]
struct Cli {
    /// key = value config file applied over the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Artifact directory; defaults to `$BREATHAE_OUT_ROOT/<command>`.
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    dataset: Option<String>,
    #[arg(long, global = true)]
    bundle: Option<String>,
    #[arg(long, global = true)]
    labels_fraction: Option<f64>,
    #[arg(long, global = true)]
    latent_dim: Option<usize>,
    #[arg(long, global = true)]
    classes: Option<usize>,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Default root for artifact directories.
    #[arg(long, env = "BREATHAE_OUT_ROOT", default_value = "runs", global = true, hide_env_values = true)]
    out_root: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic labeled dataset and a held-out test set.
    Synth,
    /// Compress marker CSV traces (t,x,y,z) into labeled vectors.
    Preprocess {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Apply stored slope thresholds instead of fitting new ones.
        #[arg(long)]
        thresholds: Option<PathBuf>,
    },
    /// Train a model: vae, aae, saae, ff, cnn, patbr or popbr.
    Train {
        #[arg(long)]
        model: Option<String>,
        /// Marker CSV traces for reconstruction networks.
        #[arg(long, value_delimiter = ',')]
        series: Vec<PathBuf>,
    },
    /// Decode prior samples of an autoencoder bundle.
    Generate {
        /// Class name or index for semi-supervised bundles.
        #[arg(long)]
        class: Option<String>,
        #[arg(short = 'n', long)]
        num: Option<usize>,
    },
    /// Predict baseline-shift classes for a dataset.
    Classify,
    /// Interpolate vectors and refine them with a reconstruction bundle.
    Reconstruct,
    /// Evaluate a bundle on a dataset.
    Eval {
        /// all, or a comma separated list of mf1,recon,cas,distinguish,latent,grid.
        #[arg(long)]
        protocol: Option<String>,
    },
    /// Run a full experiment: s1, s2 or recon.
    Repro { experiment: String },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::Preprocess { .. } => "preprocess",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::Classify => "classify",
            Command::Reconstruct => "reconstruct",
            Command::Eval { .. } => "eval",
            Command::Repro { .. } => "repro",
        }
    }
}

fn resolve(cli: &Cli) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Command::Repro { experiment } = &cli.command {
        cfg.apply_text(experiment.parse::<Experiment>()?.preset())?;
    }
    if let Some(p) = &cli.config {
        cfg.apply_file(p)?;
    }
    for kv in &cli.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| CliError::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    let mut flag = |k: &str, v: Option<String>| v.map_or(Ok(()), |v| cfg.set(k, &v));
    flag("seed", cli.seed.map(|v| v.to_string()))?;
    flag("dataset", cli.dataset.clone())?;
    flag("bundle", cli.bundle.clone())?;
    flag("labels_fraction", cli.labels_fraction.map(|v| v.to_string()))?;
    flag("latent_dim", cli.latent_dim.map(|v| v.to_string()))?;
    flag("classes", cli.classes.map(|v| v.to_string()))?;
    match &cli.command {
        Command::Preprocess { inputs, thresholds } => {
            let joined: Vec<String> = inputs.iter().map(|p| p.display().to_string()).collect();
            flag("series", Some(joined.join(",")))?;
            flag("thresholds", thresholds.as_ref().map(|p| p.display().to_string()))?;
        }
        Command::Train { model, series } => {
            flag("model", model.clone())?;
            if !series.is_empty() {
                let joined: Vec<String> = series.iter().map(|p| p.display().to_string()).collect();
                flag("series", Some(joined.join(",")))?;
            }
        }
        Command::Generate { class, num } => {
            flag("generate_class", class.clone())?;
            flag("num_generate", num.map(|v| v.to_string()))?;
        }
        Command::Eval { protocol } => flag("protocol", protocol.clone())?,
        _ => {}
    }
    cfg.resolve();
    Ok(cfg)
}

fn required(value: &str, what: &str) -> CliResult<PathBuf> {
    if value.is_empty() {
        Err(CliError::Config(format!("missing --{what}")))
    } else {
        Ok(PathBuf::from(value))
    }
}

fn run(cli: &Cli) -> CliResult<PathBuf> {
    let cfg = resolve(cli)?;
    let out = cli.out_dir.clone().unwrap_or_else(|| cli.out_root.join(cli.command.name()));
    let out: &Path = &out;
    match &cli.command {
        Command::Synth => commands::cmd_synth(&cfg, out),
        Command::Preprocess { .. } => {
            let th = (!cfg.thresholds.is_empty()).then(|| PathBuf::from(&cfg.thresholds));
            commands::cmd_preprocess(&cfg, &cfg.series_paths(), th.as_deref(), out)
        }
        Command::Train { .. } => {
            let ds = (!cfg.dataset.is_empty()).then(|| PathBuf::from(&cfg.dataset));
            commands::cmd_train(&cfg, ds.as_deref(), &cfg.series_paths(), out)
        }
        Command::Generate { .. } => commands::cmd_generate(&cfg, &required(&cfg.bundle, "bundle")?, out),
        Command::Classify => commands::cmd_classify(
            &cfg,
            &required(&cfg.bundle, "bundle")?,
            &required(&cfg.dataset, "dataset")?,
            out,
        ),
        Command::Reconstruct => commands::cmd_reconstruct(
            &cfg,
            &required(&cfg.bundle, "bundle")?,
            &required(&cfg.dataset, "dataset")?,
            out,
        ),
        Command::Eval { .. } => {
            commands::cmd_eval(&cfg, &required(&cfg.bundle, "bundle")?, &required(&cfg.dataset, "dataset")?, out)
        }
        Command::Repro { experiment } => commands::cmd_repro(experiment.parse()?, &cfg, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.error_line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
