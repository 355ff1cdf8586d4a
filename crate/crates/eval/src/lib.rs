//! Evaluation harness for the groundtrack pipeline: runs the synthetic
//! scene suite across seeds and ablations and writes reproducible CSVs.

pub mod fmt;
pub mod runner;
pub mod single;

use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use groundtrack::pipeline::ScaleMethod;
use groundtrack::sim::{make_ablation_suite, make_warp_scenes, SceneSpec};

use runner::{dump_grids, run_jobs, write_outputs, Ablation, RunOutput, RunSpec};
use single::{execute_single, write_single_csv, SingleImageOutput, SingleImageSpec};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// First seed; runs use base_seed..base_seed+seeds.
    pub base_seed: u64,
    pub seeds: u64,
    /// Frames excluded from error statistics while tracks mature.
    pub warmup_frames: usize,
    pub out_dir: PathBuf,
    /// Optional override of every scene's frame count (quick runs).
    pub frames: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            base_seed: 1,
            seeds: 5,
            warmup_frames: 60,
            out_dir: PathBuf::from("eval-out"),
            frames: None,
        }
    }
}

pub fn load_config(path: &Path) -> anyhow::Result<EvalConfig> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
}

#[derive(Debug, Clone)]
pub struct SuiteOptions {
    pub config: EvalConfig,
    /// A single ablation to run; `None` runs the mask x fusion grid.
    pub ablation: Option<Ablation>,
    /// Only scenes whose name contains this string.
    pub scene_filter: Option<String>,
    pub gt_bbox: bool,
    pub threads: usize,
    pub dump_grids: bool,
}

impl SuiteOptions {
    pub fn new(config: EvalConfig) -> Self {
        Self {
            config,
            ablation: None,
            scene_filter: None,
            gt_bbox: false,
            threads: runner::default_threads(),
            dump_grids: false,
        }
    }
}

fn scene_templates(cfg: &EvalConfig, filter: &Option<String>) -> Vec<SceneSpec> {
    let mut scenes = make_ablation_suite(cfg.base_seed);
    if let Some(f) = filter {
        scenes.retain(|s| s.name.contains(f.as_str()));
    }
    if let Some(n) = cfg.frames {
        for s in &mut scenes {
            s.frames = n;
        }
    }
    scenes
}

/// The job list a suite run executes, in output order.
pub fn suite_jobs(opts: &SuiteOptions) -> Vec<RunSpec> {
    let scenes = scene_templates(&opts.config, &opts.scene_filter);
    let ablations: Vec<Ablation> = match opts.ablation {
        Some(a) => vec![a],
        None => [(true, true), (false, true), (true, false), (false, false)]
            .into_iter()
            .map(|(mask, fusion)| Ablation {
                mask,
                temporal_fusion: fusion,
                guided: true,
                lift: true,
            })
            .collect(),
    };
    let mut jobs = Vec::new();
    for scene in &scenes {
        for ablation in &ablations {
            for i in 0..opts.config.seeds {
                jobs.push(RunSpec {
                    gt_bbox: opts.gt_bbox,
                    warmup: opts.config.warmup_frames,
                    ..RunSpec::new(scene.clone(), opts.config.base_seed + i, *ablation)
                });
            }
        }
    }
    jobs
}

/// Runs the scene suite and writes `summary.csv` plus per-run frame CSVs
/// into the configured output directory. Wall-clock goes to the console
/// only, never into the files.
pub fn run_suite(opts: &SuiteOptions) -> anyhow::Result<Vec<RunOutput>> {
    let jobs = suite_jobs(opts);
    anyhow::ensure!(!jobs.is_empty(), "no scenes match the filter");
    let start = Instant::now();
    let runs = run_jobs(&jobs, opts.threads);
    let written = write_outputs(&opts.config.out_dir, &runs)?;
    if opts.dump_grids {
        dump_grids(&opts.config.out_dir.join("grids"), &runs)?;
    }
    for run in &runs {
        let s = &run.summary;
        println!(
            "{:<40} fixes {:>3}/{:<3} rmse_3d {:>9} m  rmse_depth {:>9} m",
            run.spec.name(),
            s.fixes,
            s.frames - s.warmup,
            fmt::sig6(s.rmse_3d),
            fmt::sig6(s.rmse_depth),
        );
    }
    println!(
        "{} runs, {} files, {:.1} s wall",
        runs.len(),
        written.len(),
        start.elapsed().as_secs_f64()
    );
    Ok(runs)
}

/// Scenes for the single-image comparison: a heavily corrupted flat scene
/// plus the two warped-strip scenes.
pub fn single_image_scenes(cfg: &EvalConfig) -> Vec<SceneSpec> {
    let mut desert = make_ablation_suite(cfg.base_seed).remove(0);
    desert.name = "desert-corrupt".into();
    desert.depth.bbox_corruption_m = 1.0;
    let [on_path, off_path] = make_warp_scenes(cfg.base_seed);
    let mut scenes = vec![desert, on_path, off_path];
    if let Some(n) = cfg.frames {
        for s in &mut scenes {
            s.frames = n;
        }
    }
    scenes
}

/// Runs the single-image comparison over both affine methods and writes
/// `single_image.csv`.
pub fn run_single_image_suite(
    config: &EvalConfig,
    threads: usize,
) -> anyhow::Result<Vec<SingleImageOutput>> {
    let scenes = single_image_scenes(config);
    let mut specs = Vec::new();
    for scene in &scenes {
        for method in [ScaleMethod::Ransac, ScaleMethod::LeastSquares] {
            for i in 0..config.seeds {
                specs.push(SingleImageSpec {
                    scene: scene.clone(),
                    seed: config.base_seed + i,
                    method,
                    warmup: config.warmup_frames,
                });
            }
        }
    }
    // Same pooling strategy as the main runner.
    let slots: Vec<std::sync::Mutex<Option<SingleImageOutput>>> =
        specs.iter().map(|_| std::sync::Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let workers = threads.clamp(1, specs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= specs.len() {
                    break;
                }
                *slots[i].lock().expect("slot poisoned") = Some(execute_single(&specs[i]));
            });
        }
    });
    let rows: Vec<SingleImageOutput> = slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot poisoned").expect("job ran"))
        .collect();
    write_single_csv(&config.out_dir.join("single_image.csv"), &rows)?;
    for row in &rows {
        println!(
            "{:<18} s{} {:>7}: direct {:>9} m  raycast {:>9} m",
            row.scene,
            row.seed,
            row.method,
            fmt::sig6(row.direct_rmse),
            fmt::sig6(row.raycast_rmse)
        );
    }
    Ok(rows)
}
