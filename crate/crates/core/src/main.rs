use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bevfuse::cli::{self, Overrides};
use bevfuse::fusion::FuserKind;
use bevfuse::io::atomic_write;
use bevfuse::suite::Component;
use bevfuse::Result;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "bevfuse", version, about = "Camera/LiDAR BEV fusion on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides both the scene and the training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_fuser)]
    fuser: Option<FuserKind>,
    #[arg(long, value_enum)]
    cit: Option<Switch>,
}

impl Common {
    fn resolve(&self) -> Result<bevfuse::config::RunConfig> {
        let ov = Overrides {
            seed: self.seed,
            fuser: self.fuser,
            cit: self.cit.map(|s| matches!(s, Switch::On)),
        };
        cli::resolve_config(self.config.as_deref(), &ov)
    }
}

fn parse_fuser(s: &str) -> std::result::Result<FuserKind, String> {
    s.parse().map_err(|e: bevfuse::Error| e.to_string())
}

fn parse_component(s: &str) -> std::result::Result<Component, String> {
    s.parse().map_err(|e: bevfuse::Error| e.to_string())
}

#[derive(Subcommand)]
enum Cmd {
    /// Train from fresh init and write a checkpoint plus the loss curve.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Threshold-swept IoU of a checkpoint on held-out scenes.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient; fails above 1e-4.
    Gradcheck {
        #[arg(long, default_value = "all", value_parser = parse_component)]
        component: Component,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component and fuser ablation tables over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds, replacing `ablation.seeds`.
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attention-block masses and cross-modal cosine before/after the CIT.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory for correlation.csv and alignment.csv; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write training scenes in the binary scene format.
    Export {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 16)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => atomic_write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Train { common, out } => {
            let cfg = common.resolve()?;
            let s = cli::cmd_train(&cfg, &out)?;
            println!("checkpoint {} final_loss {:.6e}", s.checkpoint.display(), s.final_loss);
        }
        Cmd::Eval { common, checkpoint, out } => {
            let cfg = common.resolve()?;
            emit(&cli::cmd_eval(&cfg, &checkpoint)?, out.as_deref())?;
        }
        Cmd::Gradcheck { component, seed, out } => {
            let (csv, ok) = cli::cmd_gradcheck(component, seed)?;
            emit(&csv, out.as_deref())?;
            if !ok {
                eprintln!("gradient check failed: relative error above {}", cli::GRADCHECK_TOL);
            }
            return Ok(ok);
        }
        Cmd::Ablate { common, seeds, out } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = seeds {
                cfg.ablation_seeds = s;
                cfg.validate()?;
            }
            let r = cli::cmd_ablate(&cfg, &out)?;
            print!("{}", r.component_table().to_csv(&r.seeds));
            print!("{}", r.fuser_table().to_csv(&r.seeds));
        }
        Cmd::Diagnose { common, checkpoint, out } => {
            let cfg = common.resolve()?;
            let (corr, align) = cli::cmd_diagnose(&cfg, &checkpoint)?;
            match out {
                Some(dir) => {
                    atomic_write(&dir.join("correlation.csv"), corr.as_bytes())?;
                    atomic_write(&dir.join("alignment.csv"), align.as_bytes())?;
                }
                None => print!("{corr}{align}"),
            }
        }
        Cmd::Export { common, count, out } => {
            let cfg = common.resolve()?;
            cli::cmd_export(&cfg, count, &out)?;
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Some(n) = std::env::var("BEVFUSE_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
