use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use sfdepth::synth::Preset;
use sfdepth::Result;
use sfdepth_cli::commands::{self, EvalKind};
use sfdepth_cli::config::PipelineConfig;
use sfdepth_cli::pipeline;

#[derive(Parser)]
#[command(name = "sfdepth", version, about = "Flow-supervised depth by per-instance optimization")]
struct Cli {
    /// TOML configuration; missing keys take the defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seeds every random generator, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Worker threads for the pipeline; 0 uses every core.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Depth,
    Flow,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic corpus.
    Synth {
        /// texture-rich, low-texture-40, low-texture-70, pure-rotation or mixed.
        preset: Preset,
        n: usize,
    },
    /// Match seeds between two images.
    Match { img_a: PathBuf, img_b: PathBuf },
    /// Propagate seeds into a dense flow field.
    Flow {
        img_a: PathBuf,
        img_b: PathBuf,
        seeds: PathBuf,
    },
    /// Classify every pair of a flow manifest as rotation or translation.
    Filter { manifest: PathBuf },
    /// Rigid flow of a known depth map under the EPnP pose of the seeds.
    Oracle {
        img_a: PathBuf,
        img_b: PathBuf,
        depth: PathBuf,
        seeds: PathBuf,
        /// Defaults to intrinsics.txt beside the depth file.
        #[arg(long)]
        intrinsics: Option<PathBuf>,
    },
    /// Reconstruct the target depth and pose of a sample directory.
    Recon {
        dir: PathBuf,
        /// Supervision flow; computed per the config when absent.
        #[arg(long)]
        flow: Option<PathBuf>,
    },
    /// Compare a prediction with ground truth.
    Eval {
        pred: PathBuf,
        gt: PathBuf,
        #[arg(long, value_enum)]
        kind: Kind,
        /// Image whose nonzero pixels are evaluated.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Skip median scaling of depth predictions.
        #[arg(long)]
        no_median_scale: bool,
    },
    /// match → flow → filter → recon → eval over a corpus directory.
    Pipeline { dataset: PathBuf },
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg = match &cli.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let seed = cli.seed.unwrap_or(cfg.seed);
    cfg = cfg.with_seed(seed);
    if let Some(j) = cli.jobs {
        cfg.jobs = j;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::Synth { preset, n } => {
            let rows = commands::cmd_synth(*preset, *n, cfg.seed, out)?;
            println!("samples={}", rows.len());
        }
        Command::Match { img_a, img_b } => {
            let seeds = commands::cmd_match(img_a, img_b, &cfg, out)?;
            println!("seeds={}", seeds.len());
        }
        Command::Flow { img_a, img_b, seeds } => {
            let sol = commands::cmd_flow(img_a, img_b, seeds, &cfg, out)?;
            println!("loss={}", sol.best_loss);
        }
        Command::Filter { manifest } => {
            let report = commands::cmd_filter(manifest, &cfg, out)?;
            print!("{}", report.to_csv()?);
        }
        Command::Oracle {
            img_a,
            img_b,
            depth,
            seeds,
            intrinsics,
        } => {
            commands::cmd_oracle(img_a, img_b, depth, seeds, intrinsics.as_deref(), &cfg, out)?;
        }
        Command::Recon { dir, flow } => {
            let sol = commands::cmd_recon(dir, flow.as_deref(), &cfg, out)?;
            println!("loss={} collapsed={}", sol.best_loss, sol.collapsed);
        }
        Command::Eval {
            pred,
            gt,
            kind,
            mask,
            no_median_scale,
        } => {
            let kind = match kind {
                Kind::Depth => EvalKind::Depth,
                Kind::Flow => EvalKind::Flow,
            };
            let result = commands::cmd_eval(pred, gt, kind, mask.as_deref(), !no_median_scale, out)?;
            print!("{}", result.to_csv());
        }
        Command::Pipeline { dataset } => {
            let report = pipeline::run(dataset, &cfg, out)?;
            println!(
                "discarded={} reconstructed={}",
                report.discarded.len(),
                report.reconstructed.len()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", commands::error_line(&e));
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
