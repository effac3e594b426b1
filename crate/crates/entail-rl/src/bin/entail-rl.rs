//! Command-line entry point: gen-data, pretrain, rl-train, eval, sweep.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use entail_rl::harness::{
    cmd_eval, cmd_gen_data, cmd_pretrain, cmd_rl_train, cmd_sweep, load_config, ExperimentPreset,
    FullConfig,
};
use entail_rl::Error;

#[derive(Parser)]
#[command(name = "entail-rl", version, about = "Entailment-rewarded summarization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration file (TOML).
    #[arg(long, value_name = "PATH")]
    config: PathBuf,
    /// Output directory for artifacts.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
    /// Override every training seed in the config.
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Parallel workers (rollouts / sweep cells).
    #[arg(long, value_name = "N")]
    jobs: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus splits and vocabulary manifest.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Supervised pretraining (SL, Filtered, or CTRL arm).
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// SL | Filtered | CTRL | RLEF_L | RLEF_H (RLEF arms pretrain SL).
        #[arg(long, default_value = "SL")]
        preset: String,
    },
    /// RL fine-tuning from a pretrained anchor checkpoint.
    RlTrain {
        #[command(flatten)]
        common: Common,
        /// RLEF_L | RLEF_H.
        #[arg(long, default_value = "RLEF_L")]
        preset: String,
        /// Anchor checkpoint path.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Optional preset (CTRL prepends the entailed control token).
        #[arg(long)]
        preset: Option<String>,
        /// Checkpoint path.
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
    },
    /// Run the (alpha, temperature, hidden, seed) grid.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
}

fn load(common: &Common) -> Result<FullConfig, Error> {
    let mut cfg = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.override_seed(seed);
    }
    if let Some(jobs) = common.jobs {
        cfg.train.jobs = jobs.max(1);
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load(&common)?;
            cmd_gen_data(&cfg, &common.out)?;
            println!("corpus written to {}", common.out.display());
        }
        Command::Pretrain { common, preset } => {
            let cfg = load(&common)?;
            let preset: ExperimentPreset = preset.parse()?;
            let ckpt = cmd_pretrain(&cfg, preset, &common.out)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::RlTrain {
            common,
            preset,
            checkpoint,
        } => {
            let cfg = load(&common)?;
            let preset: ExperimentPreset = preset.parse()?;
            let ckpt = cmd_rl_train(&cfg, preset, &checkpoint, &common.out)?;
            println!("checkpoint written to {}", ckpt.display());
        }
        Command::Eval {
            common,
            preset,
            checkpoint,
        } => {
            let cfg = load(&common)?;
            let preset = preset.map(|p| p.parse()).transpose()?;
            let report = cmd_eval(&cfg, preset, &checkpoint, &common.out)?;
            println!(
                "entailment_rate={} rouge1={} rouge2={} rougeL={} coverage={} density={} \
                 mean_length={} n_examples={}",
                report.entailment_rate,
                report.rouge1,
                report.rouge2,
                report.rouge_l,
                report.coverage,
                report.density,
                report.mean_length,
                report.n_examples
            );
        }
        Command::Sweep { common } => {
            let jobs = common.jobs.unwrap_or(1);
            let cfg = load(&common)?;
            let (rows, n_failed) = cmd_sweep(&cfg, jobs, &common.out)?;
            println!(
                "sweep finished: {} cells ok, {} failed; results in {}",
                rows.len(),
                n_failed,
                common.out.display()
            );
            if n_failed > 0 {
                return Err(Error::Contract(format!("{n_failed} sweep cells failed")));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Io(_) => 3,
                Error::Divergence(_) => 4,
                _ => 1,
            })
        }
    }
}
