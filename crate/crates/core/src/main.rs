//! Command-line front end. Exit codes: 0 success, 2 invalid config or
//! input, 3 training diverged, 4 every sweep cell failed.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use steinprune::experiment::{
    cmd_analyze, cmd_crlb, cmd_export_hist, cmd_prune, cmd_sweep, cmd_train, CommandError,
    CommandResult, ExperimentConfig, HistView, PruneMethod, PruneRequest, TrainOptions, EXIT_OK,
};
use steinprune::reliability::{EfficiencyInputs, NoiseCase, SweepKind};

#[derive(Parser)]
#[command(
    name = "steinprune",
    version,
    about = "Spike-and-slab network pruning with Stein variational inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a particle ensemble and write a checkpoint plus per-epoch records.
    Train(TrainArgs),
    /// Prune particle 0 of a checkpoint and report the kept-weight distribution.
    Prune(PruneArgs),
    /// Per-layer distribution reports of particle 0.
    Analyze(AnalyzeArgs),
    /// Aleatoric or epistemic uncertainty sweep.
    Sweep(SweepArgs),
    /// Estimation efficiency of the linear-Gaussian observation model.
    Crlb(CrlbArgs),
    /// Write one weight histogram as CSV.
    ExportHist(ExportHistArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Continue from a checkpoint written under the same config.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop after this many epochs; the checkpoint can be resumed.
    #[arg(long)]
    max_epochs: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(alias = "dllp_slab")]
    DllpSlab,
    Magnitude,
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value = "dllp-slab")]
    method: MethodArg,
    /// Minimum inclusion probability kept by the slab rule (default 0.5).
    #[arg(long)]
    gate_threshold: Option<f64>,
    /// Fraction of parameters magnitude pruning removes.
    #[arg(long)]
    sparsity: Option<f64>,
    /// Magnitude at or below which magnitude pruning removes a parameter.
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    /// Output directory; defaults to the checkpoint's directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Aleatoric,
    Epistemic,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_enum)]
    kind: KindArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum CaseArg {
    Clean,
    #[value(alias = "model_noise")]
    ModelNoise,
    #[value(alias = "data_noise")]
    DataNoise,
    Both,
}

#[derive(Args)]
struct CrlbArgs {
    #[arg(long, value_enum)]
    case: CaseArg,
    /// Observation-noise variance.
    #[arg(long)]
    eps2: f64,
    /// Model-parameter variance.
    #[arg(long, default_value_t = 0.0)]
    alpha2: f64,
    /// Data-noise variance.
    #[arg(long, default_value_t = 0.0)]
    beta2: f64,
    /// Print one JSON object instead of text.
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ViewArg {
    Kept,
    Effective,
}

#[derive(Args)]
struct ExportHistArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Layer index; the whole network when omitted.
    #[arg(long)]
    layer: Option<usize>,
    #[arg(long, default_value_t = 50)]
    bins: usize,
    #[arg(long, value_enum, default_value = "kept")]
    view: ViewArg,
    #[arg(long)]
    out: PathBuf,
}

fn print_json(value: &impl serde::Serialize) {
    println!(
        "{}",
        serde_json::to_string_pretty(value).expect("summaries serialize")
    );
}

fn run(cli: Cli) -> CommandResult<()> {
    match cli.command {
        Command::Train(a) => {
            let config = ExperimentConfig::load(&a.config)?;
            let options = TrainOptions {
                resume: a.resume,
                max_epochs: a.max_epochs,
            };
            print_json(&cmd_train(&config, &options)?);
        }
        Command::Prune(a) => {
            let method = match a.method {
                MethodArg::DllpSlab => PruneMethod::DllpSlab,
                MethodArg::Magnitude => PruneMethod::Magnitude,
            };
            let request = PruneRequest::new(method, a.gate_threshold, a.sparsity, a.threshold)?;
            if a.bins < 2 {
                return Err(CommandError::config("--bins", "at least 2 bins"));
            }
            print_json(&cmd_prune(
                &a.checkpoint,
                request,
                a.bins,
                a.out.as_deref(),
            )?);
        }
        Command::Analyze(a) => print_json(&cmd_analyze(&a.checkpoint, a.bins, a.out.as_deref())?),
        Command::Sweep(a) => {
            let config = ExperimentConfig::load(&a.config)?;
            let kind = match a.kind {
                KindArg::Aleatoric => SweepKind::Aleatoric,
                KindArg::Epistemic => SweepKind::Epistemic,
            };
            print_json(&cmd_sweep(&config, kind)?.0);
        }
        Command::Crlb(a) => {
            let case = match a.case {
                CaseArg::Clean => NoiseCase::Clean,
                CaseArg::ModelNoise => NoiseCase::ModelNoise,
                CaseArg::DataNoise => NoiseCase::DataNoise,
                CaseArg::Both => NoiseCase::Both,
            };
            let report = cmd_crlb(case, &EfficiencyInputs::new(a.eps2, a.alpha2, a.beta2))?;
            if a.json {
                println!(
                    "{}",
                    json!({
                        "case": report.case.label(),
                        "crlb": report.crlb,
                        "estimator_variance": report.estimator_variance,
                        "efficiency": report.efficiency,
                    })
                );
            } else {
                println!("case                {}", report.case.label());
                println!("crlb                {}", report.crlb);
                println!("estimator variance  {}", report.estimator_variance);
                println!("efficiency          {}", report.efficiency);
            }
        }
        Command::ExportHist(a) => {
            let view = match a.view {
                ViewArg::Kept => HistView::Kept,
                ViewArg::Effective => HistView::Effective,
            };
            let r = cmd_export_hist(&a.checkpoint, a.layer, a.bins, view, &a.out)?;
            print_json(&r.summary());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::from(EXIT_OK as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
