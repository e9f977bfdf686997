mod commands;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::{Job, UsageError};

#[derive(Parser)]
#[command(name = "temsr", version, about = "Source-free domain adaptation for time series")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the source encoder and classifier on labeled source data.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Adapt a pretrained source model to the unlabeled target domain.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source_model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "full")]
        variant: String,
    },
    /// Run ablation variants over seeds and tabulate mean and std MF1.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sensitivity grid over one hyperparameter.
    Sweep {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        param: SweepParam,
        /// Decimals or fractions such as 6/8.
        #[arg(long, value_delimiter = ',', value_parser = parse_ratio)]
        values: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a property suite and print one JSON report per line.
    Verify {
        #[arg(long)]
        suite: Suite,
        /// Probe configuration (TOML) for the collapse and diversity suites.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// Also write the reports to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render tables and plots from a run directory's metrics.csv.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Re-execute the job recorded in a manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Defaults to the manifest's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    #[value(name = "lambda_seg")]
    LambdaSeg,
    #[value(name = "lambda_ardm")]
    LambdaArdm,
    #[value(name = "p_s")]
    ProportionSeg,
    #[value(name = "p_m")]
    MaskRatio,
    #[value(name = "anchor_ratio")]
    AnchorRatio,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Suite {
    Gradients,
    Oracles,
    Collapse,
    Diversity,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let s = s.trim();
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|_| format!("bad numerator in {s}"))?;
            let b: f64 = b.trim().parse().map_err(|_| format!("bad denominator in {s}"))?;
            a / b
        }
        None => s.parse().map_err(|_| format!("not a number: {s}"))?,
    };
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("not finite: {s}"))
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let job = match cli.command {
        Command::Pretrain { config, out } => Job::pretrain(config.as_deref())?.execute(&out).map(|_| ()),
        Command::Adapt {
            config,
            source_model,
            out,
            variant,
        } => Job::adapt(config.as_deref(), &source_model, &variant)?.execute(&out).map(|_| ()),
        Command::Ablate {
            config,
            variants,
            seeds,
            out,
        } => Job::ablate(config.as_deref(), &variants, &seeds)?.execute(&out).map(|_| ()),
        Command::Sweep {
            config,
            param,
            values,
            seeds,
            out,
        } => Job::sweep(config.as_deref(), param, &values, &seeds)?.execute(&out).map(|_| ()),
        Command::Rerun { manifest, out } => commands::rerun(&manifest, out.as_deref()),
        Command::Verify {
            suite,
            config,
            seeds,
            out,
        } => return commands::verify(suite, config.as_deref(), &seeds, out.as_deref()),
        Command::Report { run_dir } => commands::report(&run_dir).map(|_| ()),
    };
    job.map(|()| true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

