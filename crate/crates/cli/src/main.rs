use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sqdm_cli::{
    cmd_quantize_report, cmd_sensitivity, cmd_simulate, cmd_sweep, cmd_tracegen, CliError, CliResult, Experiment,
    GeneratorOverrides, OutputFile, OutputFormat, Overrides, SweepAxis,
};

const DEFAULT_NETWORK: &str = "edm1-cifar10-desk";
/// Sensitivity runs the network functionally, which needs a plain conv chain.
const DEFAULT_FUNCTIONAL_NETWORK: &str = "edm1-generic-small";

#[derive(Parser)]
#[command(
    name = "sqdm",
    version,
    about = "Quantization reports, sparsity traces and accelerator simulations"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: GlobalArgs,
}

#[derive(Args)]
struct GlobalArgs {
    /// Experiment manifest (TOML); flags override its values.
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Network: bundled name or path to a network TOML.
    #[arg(long, global = true)]
    config: Option<String>,
    /// Accelerator config TOML.
    #[arg(long, global = true)]
    arch: Option<PathBuf>,
    /// Binary trace file; a trace is generated when absent.
    #[arg(long, global = true)]
    trace: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    format: Option<OutputFormat>,
    /// `mixed` or a number format applied to every block.
    #[arg(long, global = true)]
    precision: Option<String>,
    #[arg(long, global = true)]
    threshold: Option<f64>,
    /// Steps between channel re-classifications.
    #[arg(long, global = true)]
    period: Option<usize>,
    #[arg(long, global = true)]
    channels: Option<usize>,
    #[arg(long, global = true)]
    timesteps: Option<usize>,
    #[arg(long, global = true)]
    height: Option<usize>,
    #[arg(long, global = true)]
    width: Option<usize>,
    #[arg(long, global = true)]
    mean_sparsity: Option<f64>,
    #[arg(long, global = true)]
    persistence: Option<f64>,
    /// Store per-channel fractions only, without activations.
    #[arg(long, global = true)]
    summary_only: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Per-format SQNR, code utilization and savings versus FP16.
    QuantizeReport,
    /// Per-block SQNR with one block at 4 bits.
    Sensitivity,
    /// Generate a synthetic sparsity trace.
    Tracegen,
    /// Simulate the accelerator on a trace.
    Simulate,
    /// Simulate once per value of a threshold or period axis.
    Sweep {
        #[arg(long, value_enum)]
        axis: SweepAxis,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
}

impl GlobalArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            manifest: self.manifest.clone(),
            network: self.config.clone(),
            arch: self.arch.clone(),
            trace: self.trace.clone(),
            precision: self.precision.clone(),
            threshold: self.threshold,
            period: self.period,
            seed: self.seed,
            out: self.out.clone(),
            format: self.format,
            generator: GeneratorOverrides {
                channels: self.channels,
                timesteps: self.timesteps,
                height: self.height,
                width: self.width,
                mean_sparsity: self.mean_sparsity,
                persistence: self.persistence,
                summary_only: self.summary_only.then_some(true),
                ..Default::default()
            },
        }
    }
}

fn write_outputs(exp: &Experiment, files: &[OutputFile]) -> CliResult<()> {
    fs::create_dir_all(&exp.out).map_err(|e| CliError::Io(format!("{}: {e}", exp.out.display())))?;
    for f in files {
        let path = exp.out.join(&f.name);
        fs::write(&path, &f.contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        println!("wrote {}", path.display());
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    let ov = cli.global.overrides();
    let default_net = match cli.command {
        Command::Sensitivity => DEFAULT_FUNCTIONAL_NETWORK,
        _ => DEFAULT_NETWORK,
    };
    let exp = Experiment::resolve(&ov, default_net)?;
    let files = match &cli.command {
        Command::QuantizeReport => cmd_quantize_report(&exp)?,
        Command::Sensitivity => cmd_sensitivity(&exp)?,
        Command::Tracegen => cmd_tracegen(&exp)?,
        Command::Simulate => cmd_simulate(&exp)?,
        Command::Sweep { axis, values } => cmd_sweep(&exp, *axis, values)?,
    };
    write_outputs(&exp, &files)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() {
                sqdm_cli::EXIT_CONFIG
            } else {
                sqdm_cli::EXIT_OK
            };
            let _ = e.print();
            return ExitCode::from(code as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("sqdm: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
