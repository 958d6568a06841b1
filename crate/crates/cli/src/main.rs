use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twinspect::harness::{self, parse_methods, replay, run_stage, RunConfig, Stage, Variant};
use twinspect::{Error, Result};

#[derive(Parser)]
#[command(name = "twinspect", version, about = "Real-to-twin anomaly detection pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (JSON); defaults are used for missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for dataset generation and training.
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
    /// Override a config leaf by dotted path, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic paired dataset.
    Gen(Common),
    /// Plan viewpoints around the configured mesh.
    Plan(Common),
    /// Recover object poses from real-image silhouettes.
    Pose(Common),
    /// Train the calibration model on the normal training pairs.
    Train(Common),
    /// Score the test split and compute detection and localization metrics.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Comma-separated subset of avatar,rgb,grad,ssim.
        #[arg(long)]
        methods: Option<String>,
    },
    /// Train and evaluate the ablation variants over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Run a single variant: full, no_p_real, no_p_render or no_local.
        #[arg(long)]
        variant: Option<String>,
    },
    /// Write result tables and score-map panels.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        methods: Option<String>,
    },
    /// Re-run a recorded stage from its manifest and compare output hashes.
    Verify {
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[arg(long)]
        stage: String,
        /// Where the replay writes; a temporary directory by default.
        #[arg(long)]
        scratch: Option<PathBuf>,
    },
    /// Print the resolved configuration.
    Config(Common),
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let base = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut cfg = base.with_overrides(&common.overrides)?;
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stage(stage: Stage, common: &Common, tweak: impl FnOnce(&mut RunConfig) -> Result<()>) -> Result<()> {
    let mut cfg = resolve(common)?;
    tweak(&mut cfg)?;
    cfg.validate()?;
    let manifest = run_stage(stage, &cfg, &common.out)?;
    println!(
        "{}: {} outputs, content hash {}",
        stage.name(),
        manifest.outputs.len(),
        manifest.content_hash
    );
    Ok(())
}

fn set_methods(cfg: &mut RunConfig, methods: &Option<String>) -> Result<()> {
    if let Some(csv) = methods {
        let parsed = parse_methods(csv)?;
        cfg.eval.methods = parsed.iter().map(|m| m.name().to_string()).collect();
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    harness::configure_threads()?;
    match &cli.command {
        Command::Gen(c) => stage(Stage::Gen, c, |_| Ok(())),
        Command::Plan(c) => stage(Stage::Plan, c, |_| Ok(())),
        Command::Pose(c) => stage(Stage::Pose, c, |_| Ok(())),
        Command::Train(c) => stage(Stage::Train, c, |_| Ok(())),
        Command::Eval { common, methods } => stage(Stage::Eval, common, |cfg| set_methods(cfg, methods)),
        Command::Report { common, methods } => stage(Stage::Report, common, |cfg| set_methods(cfg, methods)),
        Command::Ablate { common, variant } => stage(Stage::Ablate, common, |cfg| {
            if let Some(v) = variant {
                let v: Variant = v.parse()?;
                cfg.ablate.variants = vec![v.name().to_string()];
            }
            Ok(())
        }),
        Command::Verify { out, stage, scratch } => {
            let stage: Stage = stage.parse()?;
            let tmp;
            let dir = match scratch {
                Some(d) => d.clone(),
                None => {
                    tmp = std::env::temp_dir().join(format!("twinspect-verify-{}", std::process::id()));
                    tmp.clone()
                }
            };
            let diff = replay(out, stage, &dir);
            if scratch.is_none() {
                let _ = std::fs::remove_dir_all(&dir);
            }
            let diff = diff?;
            if diff.is_empty() {
                println!("{}: outputs reproduced byte for byte", stage.name());
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{} outputs differ from the manifest: {}",
                    diff.len(),
                    diff.join(", ")
                )))
            }
        }
        Command::Config(c) => {
            println!("{}", resolve(c)?.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{msg}");
            match e {
                Error::Config { .. } | Error::UnknownMethod(_) | Error::UnknownVariant(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
