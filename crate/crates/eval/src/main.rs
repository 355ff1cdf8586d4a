use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use groundtrack_eval::runner::{default_threads, Ablation};
use groundtrack_eval::{load_config, run_single_image_suite, run_suite, SuiteOptions};

/// Batch evaluation of the ground-target localization pipeline on the
/// synthetic scene suite.
#[derive(Parser, Debug)]
#[command(name = "eval", version, about)]
struct Cli {
    /// JSON run configuration.
    #[arg(long)]
    config: PathBuf,

    /// Disable the ground segmentation mask.
    #[arg(long)]
    no_mask: bool,

    /// Disable temporal plane fusion.
    #[arg(long)]
    no_temporal_fusion: bool,

    /// Disable trajectory-guided peak selection (plain argmax).
    #[arg(long)]
    no_guided: bool,

    /// Disable the object-height plane lift.
    #[arg(long)]
    no_lift: bool,

    /// Number of seeds to run (overrides the config).
    #[arg(long)]
    seeds: Option<u64>,

    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,

    /// Only scenes whose name contains this string.
    #[arg(long)]
    scene: Option<String>,

    /// Bypass tracking and use the reference bounding boxes.
    #[arg(long)]
    gt_bbox: bool,

    /// Run the single-image depth comparison instead of the suite.
    #[arg(long)]
    single_image: bool,

    /// Also write each run's first relative depth map as a .grid file.
    #[arg(long)]
    dump_grids: bool,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut config = load_config(&cli.config)?;
    if let Some(seeds) = cli.seeds {
        config.seeds = seeds;
    }
    if let Some(out) = cli.out {
        config.out_dir = out;
    }
    let threads = default_threads();

    if cli.single_image {
        run_single_image_suite(&config, threads)?;
        return Ok(());
    }

    let any_off = cli.no_mask || cli.no_temporal_fusion || cli.no_guided || cli.no_lift;
    let mut opts = SuiteOptions::new(config);
    opts.ablation = any_off.then_some(Ablation {
        mask: !cli.no_mask,
        temporal_fusion: !cli.no_temporal_fusion,
        guided: !cli.no_guided,
        lift: !cli.no_lift,
    });
    opts.scene_filter = cli.scene;
    opts.gt_bbox = cli.gt_bbox;
    opts.threads = threads;
    opts.dump_grids = cli.dump_grids;
    run_suite(&opts)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(err)) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
        Err(_) => {
            // The panic hook already printed the message.
            ExitCode::FAILURE
        }
    }
}
