use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mogen_cli::commands::{self, ClientChoice};
use mogen_cli::exit_code_for;

#[derive(Parser)]
#[command(
    name = "mogen",
    about = "Fine-grained text-to-motion diffusion: synthetic data, training, \
             sampling, composition, editing, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset into a directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use the desk-scale preset when no config file is given.
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: PathBuf,
        /// Override the dataset size.
        #[arg(long)]
        size: Option<usize>,
    },
    /// Train a model into a run directory.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: PathBuf,
        /// Override the training step count.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from the run directory's checkpoint.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        quiet: bool,
    },
    /// Sample a motion for a script using a trained run.
    Sample {
        /// Run directory holding a checkpoint.
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        script: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the generated frame count.
        #[arg(long)]
        frames: Option<usize>,
    },
    /// Zero-shot temporal composition over a multi-stage script.
    Compose {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        script: PathBuf,
        /// Per-stage anchor time offsets in seconds, comma separated.
        #[arg(long)]
        offsets: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Scripted editing session: commands from a file or stdin.
    Edit {
        #[arg(long)]
        run: PathBuf,
        /// Start from an existing script file.
        #[arg(long)]
        script: Option<PathBuf>,
        /// Or create the initial script from a sentence via the client.
        #[arg(long)]
        create: Option<String>,
        /// Command list, one per line; stdin when omitted.
        #[arg(long)]
        commands: Option<PathBuf>,
        /// LLM client: "mock" (default, offline) or "http".
        #[arg(long, default_value = "mock")]
        client: String,
        /// Chat-completion endpoint for the http client.
        #[arg(long)]
        endpoint: Option<String>,
        /// Model name for the http client.
        #[arg(long)]
        model_name: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a trained run: FID, R-Precision, Diversity, Multimodality,
    /// MM-Dist with confidence intervals.
    Eval {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        quiet: bool,
    },
    /// Train and evaluate toggle combinations of the attention mechanism.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        desk: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        /// Single row like "spatial=off,temporal=on,moe=off"; all five
        /// canonical rows when omitted.
        #[arg(long)]
        toggle: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
}

fn run(cli: Cli) -> mogen_core::error::Result<()> {
    match cli.command {
        Command::GenData {
            config,
            desk,
            out,
            size,
        } => commands::cmd_gen_data(config.as_deref(), desk, &out, size),
        Command::Train {
            config,
            desk,
            out,
            steps,
            resume,
            quiet,
        } => commands::cmd_train(config.as_deref(), desk, &out, steps, resume, quiet),
        Command::Sample {
            run,
            script,
            out,
            seed,
            frames,
        } => {
            let out = commands::default_out(&run, "samples", out);
            commands::cmd_sample(&run, &script, &out, seed, frames)
        }
        Command::Compose {
            run,
            script,
            offsets,
            out,
            seed,
        } => {
            let out = commands::default_out(&run, "compositions", out);
            commands::cmd_compose(&run, &script, offsets.as_deref(), &out, seed)
        }
        Command::Edit {
            run,
            script,
            create,
            commands: cmd_file,
            client,
            endpoint,
            model_name,
            out,
            seed,
        } => {
            let choice = match client.as_str() {
                "mock" => ClientChoice::Mock,
                "http" => ClientChoice::Http {
                    endpoint: endpoint.ok_or_else(|| {
                        mogen_core::error::CoreError::contract("http client needs --endpoint")
                    })?,
                    model: model_name.unwrap_or_else(|| "gpt-4".to_string()),
                },
                other => {
                    return Err(mogen_core::error::CoreError::contract(format!(
                        "unknown client `{other}` (expected mock or http)"
                    )))
                }
            };
            let out = commands::default_out(&run, "edits", out);
            commands::cmd_edit(
                &run,
                script.as_deref(),
                create.as_deref(),
                cmd_file.as_deref(),
                choice,
                &out,
                seed,
            )
        }
        Command::Eval {
            run,
            out,
            samples,
            seed,
            quiet,
        } => commands::cmd_eval(&run, out.as_deref(), samples, seed, quiet),
        Command::Ablate {
            config,
            desk,
            out,
            steps,
            toggle,
            quiet,
        } => commands::cmd_ablate(config.as_deref(), desk, &out, steps, toggle.as_deref(), quiet),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not usage errors.
            let benign = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            eprint!("{e}");
            return if benign {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(1)
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e) as u8)
        }
    }
}
