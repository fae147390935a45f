use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lanedet::cli::{cmd_eval, cmd_infer, cmd_profile, cmd_sweep, cmd_train, SweepAxis};
use lanedet::train::RunConfig;

#[derive(Parser)]
#[command(name = "lanedet", version, about = "Sparse-anchor lane detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Score threshold for kept lanes.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; --checkpoint resumes from a saved run.
    Train(Common),
    /// Evaluate a checkpoint on the configured dataset.
    Eval(Common),
    /// Draw predicted lanes on images and write a label file.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
    /// Count multiply-accumulates per attention variant.
    Profile(Common),
    /// Train and evaluate across one configuration axis.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// rotation_ratio, num_anchors or stages
        #[arg(long)]
        axis: SweepAxis,
    },
}

fn resolve(c: &Common) -> lanedet::Result<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &c.out {
        cfg.out_dir = out.clone();
    }
    if let Some(t) = c.threshold {
        cfg.model.score_threshold = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn need_checkpoint(c: &Common) -> lanedet::Result<&PathBuf> {
    c.checkpoint
        .as_ref()
        .ok_or_else(|| lanedet::Error::InvalidArgument("--checkpoint is required".into()))
}

fn run(cli: Cli) -> lanedet::Result<()> {
    match cli.command {
        Command::Train(c) => {
            let cfg = resolve(&c)?;
            let out = cmd_train(&cfg, c.checkpoint.as_deref())?;
            println!("trained to iteration {} in {:.1}s", out.iteration, out.seconds);
            if let Some(last) = out.log.last() {
                println!("final loss {:.5}", last.loss.total);
            }
            if let Some(r) = &out.report {
                print!("{}", r.to_text());
            }
            println!("checkpoint {}", out.checkpoint.display());
        }
        Command::Eval(c) => {
            let cfg = resolve(&c)?;
            let report = cmd_eval(&cfg, need_checkpoint(&c)?)?;
            print!("{}", report.to_text());
        }
        Command::Infer { common, images } => {
            let cfg = resolve(&common)?;
            let results = cmd_infer(need_checkpoint(&common)?, &images, &cfg.out_dir, common.threshold)?;
            for r in results {
                println!("{}: {} lanes -> {}", r.image.display(), r.record.lanes.len(), r.overlay.display());
            }
        }
        Command::Profile(c) => {
            let cfg = resolve(&c)?;
            for r in cmd_profile(&cfg)? {
                print!("{}", r.to_text());
            }
        }
        Command::Sweep { common, axis } => {
            let cfg = resolve(&common)?;
            let rows = cmd_sweep(&cfg, axis)?;
            print!("{}", lanedet::cli::format_sweep(axis, &rows));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
