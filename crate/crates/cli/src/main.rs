use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;

#[derive(Parser)]
#[command(name = "trafficmoe", version, about = "Encrypted traffic classification with sparse mixture-of-experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Split a pcap into flows, anonymize and tokenize them.
    Ingest {
        #[arg(long)]
        pcap: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Generate a labeled synthetic dataset.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write this many unlabeled flows to `<stem>.corpus.jsonl`.
        #[arg(long)]
        corpus: Option<usize>,
    },
    /// Masked-token pretraining.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised fine-tuning, optionally from a pretrained checkpoint.
    Finetune {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        /// Held-out dataset scored after every epoch.
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write classification metrics as JSON.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Class-wise mean expert probabilities per branch as CSV.
    InspectRouting {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-token entropies, gates and feature energies as CSV.
    InspectUf {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every layer and the micro model.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Ingest { pcap, out, config } => commands::ingest(pcap, out, config.as_deref()),
        Command::Synth { spec, out, corpus } => commands::synth(spec, out, *corpus),
        Command::Pretrain { data, config, out } => commands::pretrain(data, config.as_deref(), out),
        Command::Finetune { data, config, init, valid, out } => {
            commands::finetune(data, config.as_deref(), init.as_deref(), valid.as_deref(), out)
        }
        Command::Evaluate { data, ckpt, out } => commands::evaluate(data, ckpt, out),
        Command::InspectRouting { data, ckpt, out } => commands::inspect_routing(data, ckpt, out),
        Command::InspectUf { data, ckpt, out } => commands::inspect_uf(data, ckpt, out),
        Command::Gradcheck { seed } => commands::gradcheck(*seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
