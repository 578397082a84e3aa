use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dlr_core::commands::{self, EvalArgs, GenDataArgs, InspectArgs, TrainArgs};
use dlr_core::synth::{Family, DEFAULT_GRID};

#[derive(Parser)]
#[command(name = "dlr", about = "Latent visual reasoning on synthetic grid scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a task split.
    GenData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        count: usize,
        /// Comma-separated: attribute, relational, global.
        #[arg(long, value_delimiter = ',', default_value = "attribute,relational,global")]
        families: Vec<Family>,
        #[arg(long, default_value_t = DEFAULT_GRID)]
        grid: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=3))]
        stage: u8,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_pretrain: bool,
        #[arg(long)]
        no_focus_reward: bool,
        #[arg(long)]
        freeze_latent_policy: bool,
    },
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump attention heatmaps and the decoded trajectory for one task.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        task_id: String,
        #[arg(long)]
        dump: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::GenData { seed, count, families, grid, out } => {
            let m = commands::gen_data(&GenDataArgs { seed, count, families, grid, out: out.clone() })?;
            println!("wrote {} tasks to {}", m.count, out.display());
        }
        Cmd::Train { stage, config, data, out, skip_pretrain, no_focus_reward, freeze_latent_policy } => {
            let args = TrainArgs {
                stage,
                config,
                data,
                out,
                skip_pretrain,
                no_focus_reward,
                freeze_latent_policy,
                echo: true,
            };
            let r = commands::train(&args)?;
            println!("{}", serde_json::to_string_pretty(&r.report)?);
            println!("checkpoint: {}", r.checkpoint.display());
        }
        Cmd::Eval { ckpt, data, out } => {
            let r = commands::eval(&EvalArgs { ckpt, data, out })?;
            println!("{}", serde_json::to_string_pretty(&r)?);
        }
        Cmd::Inspect { ckpt, task_id, dump } => {
            let r = commands::inspect(&InspectArgs { ckpt, task_id, dump })?;
            for f in &r.files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
