//! Batch execution of pipeline runs over scenes, seeds and ablations,
//! with fixed-format CSV outputs that reproduce byte for byte.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use groundtrack::localizer::FixSource;
use groundtrack::pipeline::{FrameResult, Pipeline, PipelineConfig, ScaleMethod};
use groundtrack::sim::{Scene, SceneSpec};

use crate::fmt::{flag, opt, sig6};

/// Which pipeline stages run; everything else stays at defaults.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub mask: bool,
    pub temporal_fusion: bool,
    pub guided: bool,
    pub lift: bool,
}

impl Ablation {
    pub fn full() -> Self {
        Self { mask: true, temporal_fusion: true, guided: true, lift: true }
    }

    /// Compact run tag, e.g. `m1f0g1l1`.
    pub fn tag(&self) -> String {
        format!(
            "m{}f{}g{}l{}",
            flag(self.mask),
            flag(self.temporal_fusion),
            flag(self.guided),
            flag(self.lift)
        )
    }
}

/// One job: a scene template run at a seed under an ablation.
#[derive(Debug, Clone)]
pub struct RunSpec {
    pub scene: SceneSpec,
    pub seed: u64,
    pub ablation: Ablation,
    /// Bypass tracking and feed reference boxes (localization accuracy
    /// in isolation).
    pub gt_bbox: bool,
    /// Frames excluded from the error statistics while tracks mature.
    pub warmup: usize,
    pub scale_method: ScaleMethod,
}

impl RunSpec {
    pub fn new(scene: SceneSpec, seed: u64, ablation: Ablation) -> Self {
        Self {
            scene,
            seed,
            ablation,
            gt_bbox: false,
            warmup: 60,
            scale_method: ScaleMethod::Ransac,
        }
    }

    pub fn name(&self) -> String {
        format!(
            "{}_s{}_{}{}",
            self.scene.name,
            self.seed,
            self.ablation.tag(),
            if self.gt_bbox { "_gt" } else { "" }
        )
    }

    pub fn pipeline_config(&self) -> PipelineConfig {
        PipelineConfig {
            mask_on: self.ablation.mask,
            temporal_fusion_on: self.ablation.temporal_fusion,
            guided_selection_on: self.ablation.guided,
            lift_on: self.ablation.lift,
            use_gt_bbox: self.gt_bbox,
            seed: self.seed,
            scale_method: self.scale_method,
            ..PipelineConfig::default()
        }
    }
}

/// Per-frame record: pipeline output joined with ground truth.
#[derive(Debug, Clone)]
pub struct FrameRecord {
    pub result: FrameResult,
    pub truth: groundtrack::geometry::Vec3,
    pub truth_pixel: Option<groundtrack::geometry::Vec2>,
    /// Euclidean position error of the fix, m.
    pub err_3d: Option<f64>,
    /// Error of the camera-frame depth of the fix, m.
    pub err_depth: Option<f64>,
    /// Euclidean error of the trajectory filter's updated state, m.
    pub err_kf: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub frames: usize,
    pub warmup: usize,
    pub fixes: usize,
    pub fix_rate: f64,
    pub rmse_3d: f64,
    pub rmse_depth: f64,
    pub rmse_kf: f64,
    pub mean_3d: f64,
    pub max_3d: f64,
    pub final_3d: f64,
    pub lost_frames: usize,
    pub seg_failures: usize,
    pub scale_failures: usize,
    pub reacquisitions: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub spec: RunSpec,
    pub frames: Vec<FrameRecord>,
    pub summary: Summary,
}

pub fn rmse_of(errs: &[f64]) -> f64 {
    if errs.is_empty() {
        return f64::NAN;
    }
    (errs.iter().map(|e| e * e).sum::<f64>() / errs.len() as f64).sqrt()
}

/// Runs one job from start to finish.
pub fn execute(spec: &RunSpec) -> RunOutput {
    let mut scene_spec = spec.scene.clone();
    scene_spec.seed = spec.seed;
    let scene = Scene::new(scene_spec);
    let mut pipeline = Pipeline::new(spec.pipeline_config(), scene.intr, scene.map_intr);

    let mut frames = Vec::with_capacity(scene.frames());
    for k in 0..scene.frames() {
        let bundle = scene.render_frame(k);
        let result = pipeline.process_frame(&bundle, &scene);
        let truth = scene.target_center(k);
        let pose = scene.true_pose(k);
        let (err_3d, err_depth) = match &result.fix {
            Some(fix) => (
                Some((fix.position - truth).norm()),
                Some((pose.to_camera(fix.position).z - pose.to_camera(truth).z).abs()),
            ),
            None => (None, None),
        };
        let err_kf = result.filter_position.map(|p| (p - truth).norm());
        frames.push(FrameRecord {
            result,
            truth,
            truth_pixel: scene.target_pixel(k),
            err_3d,
            err_depth,
            err_kf,
        });
    }
    let summary = summarize(&frames, spec.warmup);
    RunOutput { spec: spec.clone(), frames, summary }
}

fn summarize(frames: &[FrameRecord], warmup: usize) -> Summary {
    let scored = &frames[warmup.min(frames.len())..];
    let errs3: Vec<f64> = scored.iter().filter_map(|f| f.err_3d).collect();
    let errsd: Vec<f64> = scored.iter().filter_map(|f| f.err_depth).collect();
    let errsk: Vec<f64> = scored.iter().filter_map(|f| f.err_kf).collect();
    Summary {
        frames: frames.len(),
        warmup,
        fixes: errs3.len(),
        fix_rate: if scored.is_empty() { 0.0 } else { errs3.len() as f64 / scored.len() as f64 },
        rmse_3d: rmse_of(&errs3),
        rmse_depth: rmse_of(&errsd),
        rmse_kf: rmse_of(&errsk),
        mean_3d: if errs3.is_empty() {
            f64::NAN
        } else {
            errs3.iter().sum::<f64>() / errs3.len() as f64
        },
        max_3d: errs3.iter().copied().fold(f64::NAN, f64::max),
        final_3d: scored.iter().rev().find_map(|f| f.err_3d).unwrap_or(f64::NAN),
        lost_frames: scored.iter().filter(|f| f.result.tracking_lost).count(),
        seg_failures: scored.iter().filter(|f| f.result.segmentation_failed).count(),
        scale_failures: scored.iter().filter(|f| f.result.scale_failed).count(),
        reacquisitions: scored.iter().filter(|f| f.result.reacquired).count(),
    }
}

/// Number of worker threads: the `GROUNDTRACK_THREADS` variable if set,
/// otherwise the machine's parallelism.
pub fn default_threads() -> usize {
    std::env::var("GROUNDTRACK_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1))
}

/// Executes jobs on a small worker pool. Results keep the job order, so
/// the outputs are independent of scheduling.
pub fn run_jobs(jobs: &[RunSpec], threads: usize) -> Vec<RunOutput> {
    let slots: Vec<Mutex<Option<RunOutput>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let workers = threads.clamp(1, jobs.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let out = execute(&jobs[i]);
                *slots[i].lock().expect("slot poisoned") = Some(out);
            });
        }
    });
    slots
        .into_iter()
        .map(|s| s.into_inner().expect("slot poisoned").expect("job ran"))
        .collect()
}

pub const SUMMARY_HEADER: &str = "scene,seed,mask,temporal_fusion,guided,lift,gt_bbox,frames,\
warmup,fixes,fix_rate,rmse_3d,rmse_depth,rmse_kf,mean_3d,max_3d,final_3d,lost_frames,\
seg_failures,scale_failures,reacquisitions";

pub fn summary_row(run: &RunOutput) -> String {
    let s = &run.summary;
    let a = &run.spec.ablation;
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        run.spec.scene.name,
        run.spec.seed,
        flag(a.mask),
        flag(a.temporal_fusion),
        flag(a.guided),
        flag(a.lift),
        flag(run.spec.gt_bbox),
        s.frames,
        s.warmup,
        s.fixes,
        sig6(s.fix_rate),
        sig6(s.rmse_3d),
        sig6(s.rmse_depth),
        sig6(s.rmse_kf),
        sig6(s.mean_3d),
        sig6(s.max_3d),
        sig6(s.final_3d),
        s.lost_frames,
        s.seg_failures,
        s.scale_failures,
        s.reacquisitions
    )
}

pub const FRAMES_HEADER: &str = "frame,time,truth_x,truth_y,truth_z,truth_px,truth_py,sel_px,\
sel_py,pred_px,pred_py,fix_x,fix_y,fix_z,err_3d,err_depth,err_kf,range,depth_sigma,fused,\
cov_trace,seg_failed,scale_failed,fallback,lost,reacquired";

pub fn frame_row(f: &FrameRecord) -> String {
    let r = &f.result;
    let fix = r.fix.as_ref();
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.frame,
        sig6(r.time),
        sig6(f.truth.x),
        sig6(f.truth.y),
        sig6(f.truth.z),
        opt(f.truth_pixel.map(|p| p.x)),
        opt(f.truth_pixel.map(|p| p.y)),
        opt(r.selected_pixel.map(|p| p.x)),
        opt(r.selected_pixel.map(|p| p.y)),
        opt(r.predicted_pixel.map(|p| p.x)),
        opt(r.predicted_pixel.map(|p| p.y)),
        opt(fix.map(|x| x.position.x)),
        opt(fix.map(|x| x.position.y)),
        opt(fix.map(|x| x.position.z)),
        opt(f.err_3d),
        opt(f.err_depth),
        opt(f.err_kf),
        opt(fix.map(|x| x.range)),
        opt(fix.map(|x| x.depth_sigma)),
        fix.map(|x| if x.source == FixSource::FusedFallback { "1" } else { "0" })
            .unwrap_or(""),
        opt(r.covariance_trace),
        flag(r.segmentation_failed),
        flag(r.scale_failed),
        flag(r.fallback_used),
        flag(r.tracking_lost),
        flag(r.reacquired)
    )
}

/// Writes `summary.csv` plus one `frames_<run>.csv` per run into `dir`.
pub fn write_outputs(dir: &Path, runs: &[RunOutput]) -> std::io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let summary_path = dir.join("summary.csv");
    let mut s = String::from(SUMMARY_HEADER);
    s.push('\n');
    for run in runs {
        s.push_str(&summary_row(run));
        s.push('\n');
    }
    fs::write(&summary_path, s)?;
    written.push(summary_path);
    for run in runs {
        let path = dir.join(format!("frames_{}.csv", run.spec.name()));
        let mut f = fs::File::create(&path)?;
        writeln!(f, "{FRAMES_HEADER}")?;
        for frame in &run.frames {
            writeln!(f, "{}", frame_row(frame))?;
        }
        written.push(path);
    }
    Ok(written)
}

/// Writes the first frame's relative depth map of each run in the 32-bit
/// grid format (debugging aid).
pub fn dump_grids(dir: &Path, runs: &[RunOutput]) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    for run in runs {
        let mut scene_spec = run.spec.scene.clone();
        scene_spec.seed = run.spec.seed;
        let scene = Scene::new(scene_spec);
        let rel = scene.render_frame(0).rel_depth;
        rel.to_f32()
            .write(&dir.join(format!("{}_rel0.grid", run.spec.name())))
            .map_err(std::io::Error::other)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use groundtrack::sim::make_ablation_suite;

    #[test]
    fn job_order_is_preserved_across_thread_counts() {
        let mut spec = make_ablation_suite(3).remove(0);
        spec.frames = 40;
        let jobs: Vec<RunSpec> = (1..=3)
            .map(|s| RunSpec { warmup: 10, ..RunSpec::new(spec.clone(), s, Ablation::full()) })
            .collect();
        let one = run_jobs(&jobs, 1);
        let many = run_jobs(&jobs, 3);
        for (a, b) in one.iter().zip(&many) {
            assert_eq!(a.spec.seed, b.spec.seed);
            assert_eq!(summary_row(a), summary_row(b));
        }
    }

    #[test]
    fn csv_rows_match_header_width() {
        let mut spec = make_ablation_suite(4).remove(0);
        spec.frames = 30;
        let run = execute(&RunSpec { warmup: 5, ..RunSpec::new(spec, 1, Ablation::full()) });
        let cols = SUMMARY_HEADER.split(',').count();
        assert_eq!(summary_row(&run).split(',').count(), cols);
        let fcols = FRAMES_HEADER.split(',').count();
        for f in &run.frames {
            assert_eq!(frame_row(f).split(',').count(), fcols);
        }
    }
}
