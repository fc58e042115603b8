use std::path::PathBuf;
use std::process::ExitCode;

use annoloop_cli::commands::{cmd_ablate, cmd_generate, cmd_tune, cmd_validate, AblationAxis};
use annoloop_cli::config::{BackendChoice, Overrides, DEFAULT_VOCABULARY_SIZE};
use annoloop_cli::exit_code;
use annoloop_core::dataset::{synthetic_cells, write_records, OperatorVocabulary};
use anyhow::Result;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "annoloop",
    version,
    about = "Tune a one-shot template by generate-recover feedback and annotate records with it"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML).
    config: PathBuf,
    /// Seed for the data split and support sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Tuning iterations; 0 keeps the initial template
    #[arg(long)]
    max_iterations: Option<usize>,
    /// Backend kind: http, mock or replay
    #[arg(long, value_parser = clap::value_parser!(BackendChoice))]
    backend: Option<BackendChoice>,
    /// Sampling temperature for tuning and generation.
    #[arg(long)]
    temperature: Option<f64>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            max_iterations: self.max_iterations,
            backend: self.backend,
            temperature: self.temperature,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Check a configuration and the files it references.
    Validate { config: PathBuf },
    /// Tune the one-shot template.
    Tune(Common),
    /// Annotate the generation set and report recovery scores.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Also run without the template and report the difference.
        #[arg(long)]
        zero_shot: bool,
    },
    /// Re-run tuning across a grid from the `[ablation]` table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        axis: AblationAxis,
    },
    /// Write a synthetic cell-graph corpus.
    Synth {
        #[arg(long, default_value_t = 200)]
        count: usize,
        #[arg(long, default_value_t = 4)]
        nodes: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated operator names (default op_a..op_e).
        #[arg(long, value_delimiter = ',')]
        operators: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Validate { config } => {
            cmd_validate(&config)?;
            println!("{}: ok", config.display());
        }
        Command::Tune(common) => {
            let out = cmd_tune(&common.config, &common.overrides())?;
            let r = &out.result;
            println!(
                "iterations {}  best support {:.4}  best validation {:.4}  last update {}",
                r.iterations_run,
                r.best_support_score,
                r.best_validation_score,
                r.last_update_iteration.map_or("none".to_string(), |i| i.to_string())
            );
            println!("backend calls {} ({} uncached)", r.backend_calls, out.upstream_calls);
        }
        Command::Generate { common, zero_shot } => {
            let out = cmd_generate(&common.config, &common.overrides(), zero_shot)?;
            for (metric, stat) in &out.report.overall.metrics {
                let mean = stat.mean.map_or("-".to_string(), |m| format!("{m:.4}"));
                let se = stat.std_error.map_or("-".to_string(), |s| format!("{s:.4}"));
                println!("{metric:<12} {mean} ± {se}  (n={})", stat.n);
            }
            if let Some(delta) = &out.delta {
                for (metric, d) in delta {
                    println!("one-shot - zero-shot {metric:<12} {d:+.4}");
                }
            }
            println!("uncached backend calls {}", out.upstream_calls);
        }
        Command::Ablate { common, axis } => {
            let rows = cmd_ablate(&common.config, &common.overrides(), axis)?;
            for r in rows {
                println!(
                    "{}={}  validation {:.4}  last update {}",
                    r.axis,
                    r.value,
                    r.best_validation_score,
                    r.last_update_iteration.map_or("none".to_string(), |i| i.to_string())
                );
            }
        }
        Command::Synth {
            count,
            nodes,
            seed,
            operators,
            out,
        } => {
            let vocab = if operators.is_empty() {
                OperatorVocabulary::default_of_size(DEFAULT_VOCABULARY_SIZE)
            } else {
                OperatorVocabulary::new(operators)?
            };
            write_records(&out, &synthetic_cells(count, nodes, &vocab, seed))?;
            println!("wrote {count} records to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
