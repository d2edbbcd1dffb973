use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use duplex_cli::commands;
use duplex_cli::config::RunConfig;
use duplex_cli::exit_code;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Command {
    Simulate,
    Pretrain,
    Enhance,
    Adapt,
    Bench,
}

#[derive(Debug, Parser)]
#[command(name = "duplex", about = "Dual-process streaming speech enhancement")]
struct Cli {
    #[arg(value_enum)]
    command: Command,
    /// Run manifest (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let mut cfg = match RunConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = &cli.out;
    let result = match cli.command {
        Command::Simulate => commands::simulate(&cfg, out).map(|r| {
            println!("rendered {} samples x {} channels at {} Hz", r.samples, r.channels, r.sample_rate);
        }),
        Command::Pretrain => commands::pretrain(&cfg, out).map(|r| {
            println!("trained on {} examples; final loss {:.5}; held-out mse {:?}", r.train_samples, r.final_loss, r.holdout_mse);
            println!("checkpoint {}", r.checkpoint.display());
        }),
        Command::Enhance => commands::enhance(&cfg, out).map(|r| {
            println!("{} -> {} samples over {} blocks; SI-SDRi {:?} dB", r.input_samples, r.output_samples, r.blocks, r.si_sdr_improvement);
        }),
        Command::Adapt => commands::adapt(&cfg, out).map(|r| {
            println!("back end: {}/{} blocks accepted", r.accepted_blocks, r.backend_blocks);
            for arm in &r.arms {
                let curve: Vec<String> = arm.curve.iter().map(|v| format!("{v:.2}")).collect();
                println!("{:>10}: final {:.2} dB, generation {}, curve [{}]", arm.name, arm.final_mean, arm.generation, curve.join(", "));
            }
        }),
        Command::Bench => commands::bench(&cfg, out).map(|r| {
            println!("hardware: {}", r.hardware);
            println!("block {:.2} s, shift {:.2} s", r.block_s, r.shift_s);
            for m in &r.methods {
                println!(
                    "{:>12}: SI-SDRi {:?} dB, compute {:.3} s/block, RTF {:.3}, latency {:.3} s{}",
                    m.method,
                    m.si_sdr_improvement,
                    m.mean_compute_s,
                    m.rtf,
                    m.latency_s,
                    m.error.as_deref().map(|e| format!(" (failed: {e})")).unwrap_or_default()
                );
            }
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
