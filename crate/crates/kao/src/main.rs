use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use kao::commands;
use kao::{CliError, RunConfig};

/// Kernel-adaptive diffusion inpainting on synthetic satellite-like scenes.
///
/// Every command reads a flat `key = value` config (defaults for missing
/// keys) and writes `resolved-<command>.cfg` into the output directory first.
/// Exit codes: 0 success, 2 config error, 3 data error, 4 numeric divergence.
#[derive(Parser)]
#[command(name = "kao", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the `paths.out` key.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate training scenes and evaluation pairs under `paths.data`.
    GenData(Common),
    /// Train the denoiser; writes the checkpoint and `loss.tsv`.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from the checkpoint at `paths.checkpoint`.
        #[arg(long)]
        resume: bool,
    },
    /// Inpaint one image; the mask is white where pixels are known.
    Inpaint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        mask: PathBuf,
    },
    /// Run the four ablation rows over the evaluation pairs; writes `eval.tsv`.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; defaults to `paths.data`.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Compose side-by-side figures from evaluation outputs.
    Figures {
        #[command(flatten)]
        common: Common,
        /// Evaluation output directory; defaults to `<paths.out>/eval`.
        #[arg(long)]
        eval_dir: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.set("seed", &seed.to_string())?;
    }
    if let Some(out) = &common.out {
        cfg.set("paths.out", &out.to_string_lossy())?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(common) => {
            let s = commands::gen_data(&load(&common)?)?;
            println!("wrote {} training scenes to {}", s.train_count, s.train_dir.display());
            println!("wrote {} evaluation pairs to {}", s.eval_count, s.eval_dir.display());
        }
        Command::Train { common, resume } => {
            let cfg = load(&common)?;
            let s = commands::train(&cfg, resume, |iter, loss| {
                if (iter + 1) % 100 == 0 {
                    eprintln!("iter {}\tloss {loss:.4}", iter + 1);
                }
            })?;
            println!("trained iterations {}..{}", s.start_iter, s.iters);
            println!("checkpoint {}", s.checkpoint.display());
            println!("loss table {}", s.loss_table.display());
        }
        Command::Inpaint { common, image, mask } => {
            let s = commands::inpaint(&load(&common)?, &image, &mask)?;
            println!("output\t{}", s.output.display());
            println!("forward_passes\t{}", s.forward_passes);
            println!("wall_time_s\t{:.3}", s.seconds);
            if s.clamped > 0 {
                println!("clamped_values\t{}", s.clamped);
            }
        }
        Command::Eval { common, data } => {
            let cfg = load(&common)?;
            let data = data.unwrap_or_else(|| cfg.path("paths.data"));
            let rows = commands::eval(&cfg, &data)?;
            print!("{}", commands::format_eval_table(&rows));
        }
        Command::Figures { common, eval_dir } => {
            let cfg = load(&common)?;
            let dir = eval_dir.unwrap_or_else(|| cfg.path("paths.out").join("eval"));
            let written = commands::figures(&cfg, &dir)?;
            println!("wrote {} figures", written.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("kao: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
