//! `echotomo`: the reflection-tomography pipeline, one subcommand per
//! stage. Errors print a single machine-parsable line on stderr and exit
//! nonzero.

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use echotomo_cli::stages;
use echotomo_core::config::RunConfig;
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn tag(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Parser)]
#[command(
    name = "echotomo",
    about = "Reflection-mode ultrasound tomography pipeline",
    long_about = "Runs the synthetic-concrete tomography pipeline stage by stage.\n\
        Artifacts are tensor-container files; each embeds the resolved\n\
        configuration, its hash, the acquisition-geometry hash, and a content\n\
        hash of the stage inputs, so reruns with unchanged inputs are\n\
        byte-identical.\n\n\
        CSV outputs:\n\
          curves.csv       columns: epoch,train_loss,val_loss\n\
          report_*.csv     columns: method,index,nrmse,ssim,fit_a,fit_b,degenerate\n\
        Lines starting with '#' carry provenance metadata."
)]
struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `out_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the master seed (also applied to phantom and training seeds).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for simulation.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Dataset split to operate on where applicable.
    #[arg(long, global = true, value_enum)]
    split: Option<Split>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate ground-truth phantom speed maps (all splits).
    Phantoms,
    /// Simulate acquisitions and remove the direct arrival (resumable;
    /// --split restricts the range, --jobs parallelizes).
    Simulate,
    /// Back-project every acquisition through the adjoint system matrix.
    Backproject,
    /// SAFT delay-and-sum reconstructions (--split, default test).
    Saft,
    /// L-MBIR iterative reconstructions (--split, default test).
    Lmbir,
    /// Train the U-Net on the train split, validating on val.
    Train,
    /// Run the trained network over a split (default test).
    Predict,
    /// Score SAFT, L-MBIR, and DDL against ground truth (default test).
    Eval,
    /// Render container image tensors to 8-bit grayscale PNGs.
    Render {
        /// Container file to render.
        #[arg(long)]
        input: PathBuf,
        /// Explicit window as `lo hi` (default: [3000,6000] for speed
        /// images, symmetric +-3 robust std otherwise).
        #[arg(long, num_args = 2, value_names = ["LO", "HI"])]
        window: Option<Vec<f64>>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let path = cli
        .config
        .as_ref()
        .context("--config is required for this subcommand")?;
    let mut cfg = RunConfig::load(path)
        .with_context(|| format!("loading config {}", path.display()))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.phantom.seed = seed;
        cfg.train.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(&cfg.out_dir))
}

fn run(cli: Cli) -> Result<()> {
    let split = cli.split.map(Split::tag);
    let eval_split = split.unwrap_or("test");
    match &cli.cmd {
        Cmd::Phantoms => {
            let cfg = load_config(&cli)?;
            stages::stage_phantoms(&cfg, &out_dir(&cli, &cfg))?;
        }
        Cmd::Simulate => {
            let cfg = load_config(&cli)?;
            stages::stage_simulate(&cfg, &out_dir(&cli, &cfg), split, cli.jobs)?;
        }
        Cmd::Backproject => {
            let cfg = load_config(&cli)?;
            stages::stage_backproject(&cfg, &out_dir(&cli, &cfg))?;
        }
        Cmd::Saft => {
            let cfg = load_config(&cli)?;
            stages::stage_saft(&cfg, &out_dir(&cli, &cfg), eval_split)?;
        }
        Cmd::Lmbir => {
            let cfg = load_config(&cli)?;
            stages::stage_lmbir(&cfg, &out_dir(&cli, &cfg), eval_split)?;
        }
        Cmd::Train => {
            let cfg = load_config(&cli)?;
            stages::stage_train(&cfg, &out_dir(&cli, &cfg))?;
        }
        Cmd::Predict => {
            let cfg = load_config(&cli)?;
            stages::stage_predict(&cfg, &out_dir(&cli, &cfg), eval_split)?;
        }
        Cmd::Eval => {
            let cfg = load_config(&cli)?;
            stages::stage_eval(&cfg, &out_dir(&cli, &cfg), eval_split)?;
        }
        Cmd::Render { input, window } => {
            let win = match window.as_deref() {
                Some([lo, hi]) => Some((*lo, *hi)),
                Some(_) => anyhow::bail!("--window takes exactly two values"),
                None => None,
            };
            let out = cli
                .out
                .clone()
                .context("--out is required for render")?;
            stages::stage_render(input, &out, win)?;
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
