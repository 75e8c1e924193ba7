use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use transfer_core::data::{load_csv, make_shifted_gaussians, save_csv, ShiftSpec};
use transfer_core::eval::domain_invariance_probe;
use transfer_core::experiment::{run_to_dir, ExperimentConfig};
use transfer_core::network::ModelParams;
use transfer_core::Error;

#[derive(Parser)]
#[command(
    name = "transfer",
    version,
    about = "Domain confusion and soft-label transfer experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic shifted dataset and write it as CSV.
    GenData {
        /// JSON shift spec.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run an experiment described by a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Linear source-vs-target probe on a model's representation.
    Probe {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Training examples per domain.
        #[arg(long, default_value_t = 80)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Phase { source, .. } => exit_code(source),
        Error::Io { .. } | Error::Contract(_) => 1,
        _ => 2,
    }
}

fn read_spec(path: &PathBuf) -> transfer_core::Result<ShiftSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    let spec: ShiftSpec = serde_json::from_str(&text).map_err(|e| Error::Json {
        context: format!("{}", path.display()),
        source: e,
    })?;
    spec.validate()?;
    Ok(spec)
}

fn run(cli: Cli) -> transfer_core::Result<()> {
    match cli.command {
        Command::GenData { spec, out } => {
            let spec = read_spec(&spec)?;
            let bundle = make_shifted_gaussians(&spec)?;
            save_csv(&bundle, &out)?;
            println!(
                "source {} target {} categories {} width {}",
                bundle.source_labeled().len(),
                bundle.target_labeled().len() + bundle.target_unlabeled().len(),
                bundle.num_categories(),
                bundle.feature_width()
            );
        }
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let result = run_to_dir(&cfg)?;
            let adapted = &result.report.adapted;
            let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
            println!("mode {}", result.report.mode);
            println!(
                "multiclass_accuracy {}",
                fmt(adapted.target.as_ref().map(|r| r.multiclass_accuracy))
            );
            if let Some(h) = &adapted.heldout {
                println!("heldout_accuracy {:.4}", h.multiclass_accuracy);
            }
            println!("probe_accuracy {}", fmt(adapted.probe_accuracy));
        }
        Command::Probe {
            params,
            data,
            n,
            seed,
        } => {
            let model = ModelParams::load(&params)?;
            let bundle = load_csv(&data)?;
            let target: Vec<_> = bundle.target_examples().cloned().collect();
            let acc = domain_invariance_probe(&model, bundle.source_labeled(), &target, n, seed)?;
            println!("{acc}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
