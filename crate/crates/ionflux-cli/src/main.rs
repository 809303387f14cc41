use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ionflux_cli::commands;
use ionflux_cli::log;
use ionflux_core::model::ConstraintMode;

#[derive(Parser)]
#[command(
    name = "ionflux",
    about = "Multi-ion membrane transport: neural ODE pipeline and pore-model benchmark",
    version
)]
struct Cli {
    /// Emit machine-readable JSON log lines on stderr.
    #[arg(long, global = true)]
    json_logs: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// Benchmark configuration file (JSON); defaults are built in.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn parse_constraint(s: &str) -> Result<ConstraintMode, String> {
    ConstraintMode::parse(s).ok_or_else(|| format!("unknown constraint '{s}' (hard|soft|none)"))
}

#[derive(Subcommand)]
enum Command {
    /// Generate the simulated and pseudo-experimental datasets.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Pre-train the ODE network on simulated data.
    Pretrain {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "hard", value_parser = parse_constraint)]
        constraint: ConstraintMode,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Fine-tune from a checkpoint on measured (or pseudo-experimental) data.
    Finetune {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt_in: Option<PathBuf>,
        #[arg(long)]
        ckpt_out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_constraint)]
        constraint: Option<ConstraintMode>,
        #[arg(long)]
        lambda: Option<f64>,
        /// Allow fine-tuning from random initialization (the NPT ablation path).
        #[arg(long)]
        allow_npt: bool,
    },
    /// Score a checkpoint and the classical pore model on a test set.
    Evaluate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the {PT,NPT} x {HIB,SIB} grid plus attention rows for every family.
    Ablate {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        pretrain_data: PathBuf,
        #[arg(long)]
        finetune_data: PathBuf,
        #[arg(long)]
        test_data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export rollout-averaged attention matrices (CSV + heatmap SVG).
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// The full default pipeline in one invocation.
    Repro {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { config, out, seed } => {
            commands::cmd_simulate(config.config.as_deref(), &out, seed)?;
        }
        Command::Pretrain {
            config,
            data,
            ckpt_out,
            epochs,
            seed,
            constraint,
            lambda,
        } => {
            commands::cmd_pretrain(
                config.config.as_deref(),
                &data,
                &ckpt_out,
                epochs,
                seed,
                constraint,
                lambda,
            )?;
        }
        Command::Finetune {
            config,
            data,
            ckpt_in,
            ckpt_out,
            epochs,
            seed,
            constraint,
            lambda,
            allow_npt,
        } => {
            commands::cmd_finetune(
                config.config.as_deref(),
                &data,
                ckpt_in.as_deref(),
                &ckpt_out,
                epochs,
                seed,
                constraint,
                lambda,
                allow_npt,
            )?;
        }
        Command::Evaluate {
            config,
            ckpt,
            data,
            out,
        } => {
            commands::cmd_evaluate(config.config.as_deref(), &ckpt, &data, &out)?;
        }
        Command::Ablate {
            config,
            pretrain_data,
            finetune_data,
            test_data,
            out,
        } => {
            let result = commands::cmd_ablate(
                config.config.as_deref(),
                &pretrain_data,
                &finetune_data,
                &test_data,
                &out,
            )?;
            print!("{}", commands::ablation_readout(&result));
        }
        Command::ExportAttention { ckpt, data, out } => {
            commands::cmd_export_attention(&ckpt, &data, &out)?;
        }
        Command::Repro { config, out, seed } => {
            let summary = commands::cmd_repro(config.config.as_deref(), &out, seed)?;
            println!(
                "pretrain loss: {:.6} -> {:.6}",
                summary.pretrain_initial_loss, summary.pretrain_final_loss
            );
            println!(
                "test MSE: odenet {:.6}, dspmde {:.6}",
                summary.model_mse, summary.pde_mse
            );
            print!("{}", commands::ablation_readout(&summary.ablation));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    log::init(cli.json_logs);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::warn(&format!("error: {e:#}"));
            ExitCode::FAILURE
        }
    }
}
