//! Command-line front end: run any prefix of the experiment pipeline
//! (generate → correct → train → explain → evaluate → report), re-score
//! stored artifacts, or render heatmap slices.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime error.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;
use xaival::error::Error;
use xaival::harness::{
    evaluate_stored, load_config, render_slice_overlay, report, run_stage, ExperimentConfig,
    Phase,
};
use xaival::volcore::{read_volume, RegionMask};

#[derive(Parser)]
#[command(name = "xaival", version, about = "Ground-truth validation of attribution methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output root; artifacts land in <out>/<run_id>/.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Replace the configured seed replicates with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured stage.
    #[arg(long)]
    stage: Option<String>,
    /// Restrict to a single method.
    #[arg(long)]
    method: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic cohort only.
    Generate(RunArgs),
    /// Generate, then fit and apply the phenotype correction.
    Correct(RunArgs),
    /// Run through network training and checkpointing.
    Train(RunArgs),
    /// Run through heatmap generation.
    Explain(RunArgs),
    /// Re-score stored heatmaps in an existing run directory.
    Evaluate(RunArgs),
    /// Rebuild tables and renders from an existing run's scores.
    Report(RunArgs),
    /// Run the full pipeline and write a run manifest.
    Pipeline(RunArgs),
    /// Render one axial slice of a stored volume with a mask outline.
    Render {
        /// Volume container to render.
        #[arg(long)]
        volume: PathBuf,
        /// Mask volume (nonzero = member) whose outline to overlay.
        #[arg(long)]
        mask: PathBuf,
        /// Axial slice index; defaults to the centre slice.
        #[arg(long)]
        z: Option<usize>,
        /// Output PGM path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn apply_overrides(mut cfg: ExperimentConfig, args: &RunArgs) -> xaival::Result<ExperimentConfig> {
    if let Some(seed) = args.seed {
        cfg.seeds.replicates = vec![seed];
    }
    if let Some(stage) = &args.stage {
        cfg.stage.name = stage.clone();
    }
    if let Some(method) = &args.method {
        cfg.methods.names = vec![method.clone()];
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> xaival::Result<()> {
    match cli.command {
        Command::Generate(a) => phase_cmd(&a, Phase::Generate),
        Command::Correct(a) => phase_cmd(&a, Phase::Correct),
        Command::Train(a) => phase_cmd(&a, Phase::Train),
        Command::Explain(a) => phase_cmd(&a, Phase::Explain),
        Command::Pipeline(a) => phase_cmd(&a, Phase::Report),
        Command::Evaluate(a) => {
            let cfg = apply_overrides(load_config(&a.config)?, &a)?;
            let run_dir = a.out.join(&cfg.run_id);
            let scores = evaluate_stored(&run_dir, &cfg)?;
            println!("re-evaluated {} score rows in {}", scores.len(), run_dir.display());
            Ok(())
        }
        Command::Report(a) => {
            let cfg = apply_overrides(load_config(&a.config)?, &a)?;
            let run_dir = a.out.join(&cfg.run_id);
            report(&run_dir, &cfg)?;
            println!("report written to {}", run_dir.join("report").display());
            Ok(())
        }
        Command::Render { volume, mask, z, out } => {
            let v = read_volume(&volume)?;
            let mv = read_volume(&mask)?;
            let mut m = RegionMask::empty(mv.dims, mv.spacing_mm);
            for (slot, &x) in m.membership.iter_mut().zip(&mv.data) {
                *slot = x > 0.5;
            }
            let z = z.unwrap_or(v.dims.2 / 2);
            render_slice_overlay(&out, &v, &m, z)?;
            println!("rendered {}", out.display());
            Ok(())
        }
    }
}

fn phase_cmd(args: &RunArgs, phase: Phase) -> xaival::Result<()> {
    let cfg = apply_overrides(load_config(&args.config)?, args)?;
    let summary = run_stage(&cfg, &args.out, phase)?;
    println!("run directory: {}", summary.run_dir.display());
    if !summary.scores.is_empty() {
        for a in &summary.aggregates {
            println!(
                "{} / {}: mean rma {} (n = {}, degenerate {})",
                a.task,
                a.method,
                a.mean_rma.map_or("-".into(), |v| format!("{v:.4}")),
                a.n,
                a.n_degenerate
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ (Error::Config(_) | Error::InvalidSpec(_))) => {
            eprintln!("configuration error: {e}");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
