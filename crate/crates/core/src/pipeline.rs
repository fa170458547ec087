//! File-level orchestration for the command-line tool. Each stage consumes
//! the previous stage's on-disk artifacts and writes its own, so any stage
//! can be rerun or inspected in isolation: synth -> vo -> label -> train ->
//! eval/compare.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use crate::config::RunConfig;
use crate::eval::{
    coverage, format_comparison, render_overlay, repeatability_from_keypoints, trajectory_error,
    ComparisonRow, TrajectoryError,
};
use crate::features::{ClassicalExtractor, FeatureExtractor, NmsParams};
use crate::geometry::{
    read_trajectory, sample_homography, warp_image, write_trajectory, GeometryError,
    HomographyConfig, PoseSE3, StereoRig, TrajectoryEntry,
};
use crate::image::{GrayImage, ImageError, RegionMask};
use crate::matcher_vo::{
    read_tracks, run_vo, write_tracks, write_vo_summary, VOResult, VoError, VoParams,
};
use crate::model::{
    load_checkpoint, save_checkpoint, train_step, write_training_log, LabeledFrame, LossReport,
    ModelError, ModelParams, NetworkExtractor, TrainError, TrainSample,
};
use crate::supervision::{
    build_frame_targets, read_label_grid, score_tracks, write_label_grid, write_verdicts,
    GoodFeatureVerdict, LabelGrid, SupervisionError, Verdict,
};
use crate::synthscene::{render_sequence, sway_trajectory, SceneError, StereoFrame};

use nalgebra::{Quaternion, Rotation3, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Scene(#[from] SceneError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Vo(#[from] VoError),
    #[error(transparent)]
    Supervision(#[from] SupervisionError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{0}")]
    Invalid(String),
}

/// Refuses to clobber existing files: an existing non-empty target needs
/// `force`. Creates the directory (and parents) when missing.
pub fn prepare_out_dir(dir: &Path, force: bool) -> Result<(), PipelineError> {
    if dir.exists() {
        if !dir.is_dir() {
            return Err(PipelineError::Invalid(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        if fs::read_dir(dir)?.next().is_some() && !force {
            return Err(PipelineError::Invalid(format!(
                "{} is not empty (use --force to write anyway)",
                dir.display()
            )));
        }
    } else {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn frame_file(dir: &Path, prefix: &str, i: usize) -> PathBuf {
    dir.join(format!("{prefix}_{i:03}.pgm"))
}

fn label_file(dir: &Path, prefix: &str, i: usize) -> PathBuf {
    dir.join(format!("{prefix}_{i:03}.csv"))
}

fn entries(poses: &[PoseSE3]) -> Vec<TrajectoryEntry> {
    poses
        .iter()
        .enumerate()
        .map(|(i, p)| TrajectoryEntry { timestamp: i as f64, pose: *p })
        .collect()
}

/// Renders the configured scene and lays the dataset out on disk: stereo
/// PGM pairs, dynamic-region masks, millimeter depth maps, the ground-truth
/// trajectory, and a `dataset.txt` manifest with the rig parameters.
pub fn run_synth(cfg: &RunConfig, seed: u64, out: &Path) -> Result<usize, PipelineError> {
    let spec = cfg.scene_spec(seed);
    let rig = cfg.rig();
    let traj = sway_trajectory(cfg.frames, cfg.traj_step);
    let ds = render_sequence(&spec, &traj, &rig)?;

    let frames_dir = out.join("frames");
    let masks_dir = out.join("masks");
    let depth_dir = out.join("depth");
    fs::create_dir_all(&frames_dir)?;
    fs::create_dir_all(&masks_dir)?;
    fs::create_dir_all(&depth_dir)?;
    for (i, f) in ds.frames.iter().enumerate() {
        f.left.write_pgm(&frame_file(&frames_dir, "left", i))?;
        f.right.write_pgm(&frame_file(&frames_dir, "right", i))?;
        ds.gt_region_mask[i].write_pgm(&frame_file(&masks_dir, "dynamic", i))?;
        ds.gt_depth[i].write_pgm_millimeters(&frame_file(&depth_dir, "depth", i))?;
    }
    write_trajectory(&out.join("gt_trajectory.csv"), &entries(&ds.gt_poses))?;

    let mut f = BufWriter::new(fs::File::create(out.join("dataset.txt"))?);
    writeln!(f, "width = {}", spec.width)?;
    writeln!(f, "height = {}", spec.height)?;
    writeln!(f, "frames = {}", ds.frames.len())?;
    writeln!(f, "seed = {seed}")?;
    writeln!(f, "fx = {}", rig.intrinsics.fx)?;
    writeln!(f, "fy = {}", rig.intrinsics.fy)?;
    writeln!(f, "cx = {}", rig.intrinsics.cx)?;
    writeln!(f, "cy = {}", rig.intrinsics.cy)?;
    writeln!(f, "baseline = {}", rig.baseline)?;
    Ok(ds.frames.len())
}

/// A dataset read back from a synth output directory, or rendered straight
/// into memory for held-out evaluation.
pub struct LoadedDataset {
    pub frames: Vec<StereoFrame>,
    pub gt_poses: Vec<PoseSE3>,
    pub dynamic_masks: Vec<RegionMask>,
    pub rig: StereoRig,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
}

/// Renders the configured scene without touching disk. Used for held-out
/// comparison scenes, where only the evaluation artifacts are worth keeping.
pub fn render_dataset(cfg: &RunConfig, seed: u64) -> Result<LoadedDataset, PipelineError> {
    let spec = cfg.scene_spec(seed);
    let rig = cfg.rig();
    let traj = sway_trajectory(cfg.frames, cfg.traj_step);
    let ds = render_sequence(&spec, &traj, &rig)?;
    Ok(LoadedDataset {
        frames: ds.frames,
        gt_poses: ds.gt_poses,
        dynamic_masks: ds.gt_region_mask,
        rig,
        seed,
        width: cfg.width,
        height: cfg.height,
    })
}

pub fn load_dataset(dir: &Path) -> Result<LoadedDataset, PipelineError> {
    let manifest = fs::read_to_string(dir.join("dataset.txt")).map_err(|e| {
        PipelineError::Invalid(format!("{} is not a dataset directory: {e}", dir.display()))
    })?;
    let mut width = None;
    let mut height = None;
    let mut frames = None;
    let mut seed = None;
    let mut fx = None;
    let mut fy = None;
    let mut cx = None;
    let mut cy = None;
    let mut baseline = None;
    for line in manifest.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| PipelineError::Invalid(format!("bad manifest line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let bad = || PipelineError::Invalid(format!("bad manifest value for {k}: {v:?}"));
        match k {
            "width" => width = Some(v.parse::<usize>().map_err(|_| bad())?),
            "height" => height = Some(v.parse::<usize>().map_err(|_| bad())?),
            "frames" => frames = Some(v.parse::<usize>().map_err(|_| bad())?),
            "seed" => seed = Some(v.parse::<u64>().map_err(|_| bad())?),
            "fx" => fx = Some(v.parse::<f64>().map_err(|_| bad())?),
            "fy" => fy = Some(v.parse::<f64>().map_err(|_| bad())?),
            "cx" => cx = Some(v.parse::<f64>().map_err(|_| bad())?),
            "cy" => cy = Some(v.parse::<f64>().map_err(|_| bad())?),
            "baseline" => baseline = Some(v.parse::<f64>().map_err(|_| bad())?),
            other => return Err(PipelineError::Invalid(format!("unknown manifest key {other:?}"))),
        }
    }
    let missing = |k: &str| PipelineError::Invalid(format!("manifest missing {k}"));
    let width = width.ok_or_else(|| missing("width"))?;
    let height = height.ok_or_else(|| missing("height"))?;
    let n = frames.ok_or_else(|| missing("frames"))?;
    let rig = StereoRig {
        intrinsics: crate::geometry::CameraIntrinsics {
            fx: fx.ok_or_else(|| missing("fx"))?,
            fy: fy.ok_or_else(|| missing("fy"))?,
            cx: cx.ok_or_else(|| missing("cx"))?,
            cy: cy.ok_or_else(|| missing("cy"))?,
            width,
            height,
        },
        baseline: baseline.ok_or_else(|| missing("baseline"))?,
    };

    let frames_dir = dir.join("frames");
    let masks_dir = dir.join("masks");
    let mut frames = Vec::with_capacity(n);
    let mut dynamic_masks = Vec::with_capacity(n);
    for i in 0..n {
        let left = GrayImage::read_pgm(&frame_file(&frames_dir, "left", i))?;
        let right = GrayImage::read_pgm(&frame_file(&frames_dir, "right", i))?;
        if left.width() != width || left.height() != height {
            return Err(PipelineError::Invalid(format!(
                "frame {i} is {}x{}, manifest says {width}x{height}",
                left.width(),
                left.height()
            )));
        }
        frames.push(StereoFrame { left, right });
        dynamic_masks.push(RegionMask::read_pgm(&frame_file(&masks_dir, "dynamic", i))?);
    }
    let gt_poses: Vec<PoseSE3> = read_trajectory(&dir.join("gt_trajectory.csv"))?
        .into_iter()
        .map(|e| e.pose)
        .collect();
    if gt_poses.len() != n {
        return Err(PipelineError::Invalid(format!(
            "trajectory has {} poses for {n} frames",
            gt_poses.len()
        )));
    }
    Ok(LoadedDataset {
        frames,
        gt_poses,
        dynamic_masks,
        rig,
        seed: seed.ok_or_else(|| missing("seed"))?,
        width,
        height,
    })
}

pub const REL_POSE_HEADER: &str = "pair,failed,inliers,tx,ty,tz,qx,qy,qz,qw";

/// Per consecutive pair: the estimated relative pose (coordinates of frame t
/// mapped into frame t+1), whether estimation fell back to identity, and the
/// inlier count behind it.
pub fn write_relative_poses(path: &Path, vo: &VOResult) -> Result<(), PipelineError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{REL_POSE_HEADER}")?;
    for (i, p) in vo.relative_poses.iter().enumerate() {
        let q = UnitQuaternion::from_rotation_matrix(&p.rotation);
        let t = p.translation;
        writeln!(
            f,
            "{i},{},{},{:.9},{:.9},{:.9},{:.12},{:.12},{:.12},{:.12}",
            u8::from(vo.failures[i]),
            vo.inlier_counts[i],
            t.x,
            t.y,
            t.z,
            q.i,
            q.j,
            q.k,
            q.w
        )?;
    }
    Ok(())
}

pub fn read_relative_poses(
    path: &Path,
) -> Result<(Vec<PoseSE3>, Vec<bool>, Vec<usize>), PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == REL_POSE_HEADER => {}
        other => {
            return Err(PipelineError::Invalid(format!(
                "expected header {REL_POSE_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut poses = Vec::new();
    let mut failures = Vec::new();
    let mut inliers = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 10 {
            return Err(PipelineError::Invalid(format!(
                "relative pose row {}: expected 10 fields, got {}",
                i + 2,
                fields.len()
            )));
        }
        let pair: usize = fields[0]
            .parse()
            .map_err(|_| PipelineError::Invalid(format!("bad pair index {:?}", fields[0])))?;
        if pair != i {
            return Err(PipelineError::Invalid(format!("pair {pair} out of order")));
        }
        let failed = match fields[1] {
            "0" => false,
            "1" => true,
            other => {
                return Err(PipelineError::Invalid(format!("bad failed flag {other:?}")))
            }
        };
        let inl: usize = fields[2]
            .parse()
            .map_err(|_| PipelineError::Invalid(format!("bad inlier count {:?}", fields[2])))?;
        let mut v = [0.0f64; 7];
        for (j, field) in fields[3..].iter().enumerate() {
            v[j] = field
                .parse()
                .map_err(|_| PipelineError::Invalid(format!("bad number {field:?}")))?;
        }
        let q = UnitQuaternion::from_quaternion(Quaternion::new(v[6], v[3], v[4], v[5]));
        poses.push(PoseSE3::new(Rotation3::from(q), Vector3::new(v[0], v[1], v[2])));
        failures.push(failed);
        inliers.push(inl);
    }
    Ok((poses, failures, inliers))
}

/// Runs stereo odometry over the dataset and writes tracks, relative poses,
/// the integrated trajectory, and a short summary.
pub fn run_vo_stage(
    ds: &LoadedDataset,
    extractor: &dyn FeatureExtractor,
    vo_params: &VoParams,
    out: &Path,
) -> Result<VOResult, PipelineError> {
    fs::create_dir_all(out)?;
    let vo = run_vo(&ds.frames, extractor, &ds.rig, vo_params)?;
    write_tracks(&out.join("tracks.csv"), &vo.tracks)?;
    write_relative_poses(&out.join("relative_poses.csv"), &vo)?;
    let est = vo.absolute_trajectory(&PoseSE3::identity());
    write_trajectory(&out.join("trajectory.csv"), &entries(&est))?;
    write_vo_summary(
        &out.join("vo_summary.txt"),
        ds.frames.len(),
        vo.failure_count(),
        vo.mean_inliers(),
    )?;
    Ok(vo)
}

/// Rebuilds an odometry result from a vo stage directory. Descriptors are
/// not persisted, so the result supports labeling but not re-matching.
pub fn read_vo_outputs(dir: &Path) -> Result<VOResult, PipelineError> {
    let tracks = read_tracks(&dir.join("tracks.csv"))?;
    let (relative_poses, failures, inlier_counts) =
        read_relative_poses(&dir.join("relative_poses.csv"))?;
    Ok(VOResult { relative_poses, tracks, inlier_counts, failures })
}

pub const IGNORE_HEADER: &str = "cell_row,cell_col";

pub fn write_ignore_cells(path: &Path, ignore: &Array2<bool>) -> Result<(), PipelineError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{IGNORE_HEADER}")?;
    for ((r, c), &v) in ignore.indexed_iter() {
        if v {
            writeln!(f, "{r},{c}")?;
        }
    }
    Ok(())
}

pub fn read_ignore_cells(path: &Path, hc: usize, wc: usize) -> Result<Array2<bool>, PipelineError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == IGNORE_HEADER => {}
        other => {
            return Err(PipelineError::Invalid(format!(
                "expected header {IGNORE_HEADER:?}, got {other:?}"
            )))
        }
    }
    let mut out = Array2::from_elem((hc, wc), false);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (r, c) = line
            .split_once(',')
            .ok_or_else(|| PipelineError::Invalid(format!("bad ignore row {line:?}")))?;
        let r: usize =
            r.trim().parse().map_err(|_| PipelineError::Invalid(format!("bad row {r:?}")))?;
        let c: usize =
            c.trim().parse().map_err(|_| PipelineError::Invalid(format!("bad col {c:?}")))?;
        if r >= hc || c >= wc {
            return Err(PipelineError::Invalid(format!("ignore cell ({r},{c}) out of range")));
        }
        out[(r, c)] = true;
    }
    Ok(out)
}

pub struct LabelSet {
    pub labels: Vec<LabelGrid>,
    pub ignore: Vec<Array2<bool>>,
    pub verdicts: Vec<GoodFeatureVerdict>,
}

impl LabelSet {
    pub fn good_count(&self) -> usize {
        self.verdicts.iter().filter(|v| v.verdict == Verdict::Good).count()
    }
}

/// Scores tracks geometrically and rasterizes survivors into per-frame
/// label grids plus per-frame undecided-cell masks.
pub fn run_label_stage(
    ds: &LoadedDataset,
    vo: &VOResult,
    sup: &crate::supervision::SupervisionConfig,
    out: &Path,
) -> Result<LabelSet, PipelineError> {
    fs::create_dir_all(out)?;
    let verdicts = score_tracks(vo, &ds.rig, sup);
    write_verdicts(&out.join("verdicts.csv"), &verdicts)?;
    let mut labels = Vec::with_capacity(ds.frames.len());
    let mut ignore = Vec::with_capacity(ds.frames.len());
    for f in 0..ds.frames.len() {
        let (grid, ign) = build_frame_targets(&vo.tracks, &verdicts, f, ds.width, ds.height);
        write_label_grid(&label_file(out, "labels", f), &grid)?;
        write_ignore_cells(&label_file(out, "ignore", f), &ign)?;
        labels.push(grid);
        ignore.push(ign);
    }
    Ok(LabelSet { labels, ignore, verdicts })
}

pub fn load_labels(
    dir: &Path,
    frames: usize,
    width: usize,
    height: usize,
) -> Result<(Vec<LabelGrid>, Vec<Array2<bool>>), PipelineError> {
    let mut labels = Vec::with_capacity(frames);
    let mut ignore = Vec::with_capacity(frames);
    for f in 0..frames {
        labels.push(read_label_grid(&label_file(dir, "labels", f), width, height)?);
        ignore.push(read_ignore_cells(&label_file(dir, "ignore", f), height / 8, width / 8)?);
    }
    Ok((labels, ignore))
}

pub struct TrainOutcome {
    pub params: ModelParams,
    pub reports: Vec<LossReport>,
    /// (good track count, odometry failures) per relabeling round beyond
    /// the first.
    pub relabel_rounds: Vec<(usize, usize)>,
    pub rejected_steps: usize,
}

/// Trains a fresh network on the labels from disk. With `rounds > 1` the
/// trained network itself re-labels the dataset between rounds (classic
/// self-supervision loop); a relabeling round that produces no good tracks
/// aborts with an error rather than training on nothing.
pub fn run_train_stage(
    ds: &LoadedDataset,
    labels: &[LabelGrid],
    ignore: &[Array2<bool>],
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
) -> Result<TrainOutcome, PipelineError> {
    if labels.len() != ds.frames.len() || ignore.len() != ds.frames.len() {
        return Err(PipelineError::Invalid(format!(
            "{} label grids for {} frames",
            labels.len(),
            ds.frames.len()
        )));
    }
    fs::create_dir_all(out)?;
    let tcfg = cfg.train_config(seed);
    tcfg.validate().map_err(TrainError::BadConfig)?;
    let mut params = ModelParams::init(cfg.descriptor_dim, seed);
    let mut velocity = params.zeros_like();
    let mut reports = Vec::new();
    let mut rejected_steps = 0usize;
    let mut relabel_rounds = Vec::new();

    let pool: Vec<LabeledFrame> = ds
        .frames
        .iter()
        .zip(labels.iter().zip(ignore))
        .map(|(f, (grid, ign))| LabeledFrame {
            img: f.left.clone(),
            labels: grid.clone(),
            ignore: ign.clone(),
        })
        .collect();
    let hcfg = HomographyConfig::new(ds.width, ds.height);
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let run_round = |pool: &[LabeledFrame],
                         params: &mut ModelParams,
                         velocity: &mut crate::model::ModelGrads,
                         rng: &mut ChaCha8Rng,
                         reports: &mut Vec<LossReport>,
                         rejected: &mut usize|
     -> Result<(), PipelineError> {
        for _ in 0..tcfg.steps {
            let mut batch = Vec::with_capacity(tcfg.batch_size);
            for _ in 0..tcfg.batch_size {
                let idx = rng.gen_range(0..pool.len());
                let h = sample_homography(&hcfg, rng.gen());
                batch.push(TrainSample {
                    img: &pool[idx].img,
                    labels: &pool[idx].labels,
                    ignore: &pool[idx].ignore,
                    homography: h,
                });
            }
            let (report, was_rejected) = train_step(params, velocity, &batch, &tcfg)?;
            if was_rejected {
                *rejected += 1;
            }
            reports.push(report);
        }
        Ok(())
    };

    run_round(&pool, &mut params, &mut velocity, &mut rng, &mut reports, &mut rejected_steps)?;
    for _ in 1..cfg.rounds {
        let labeler = NetworkExtractor { params: params.clone(), nms: cfg.nms() };
        let vo = run_vo(&ds.frames, &labeler, &ds.rig, &cfg.vo_params(seed))?;
        let verdicts = score_tracks(&vo, &ds.rig, &cfg.supervision());
        let good = verdicts.iter().filter(|v| v.verdict == Verdict::Good).count();
        relabel_rounds.push((good, vo.failure_count()));
        if good == 0 {
            return Err(TrainError::NoGoodTracks.into());
        }
        let pool: Vec<LabeledFrame> = (0..ds.frames.len())
            .map(|f| {
                let (grid, ign) =
                    build_frame_targets(&vo.tracks, &verdicts, f, ds.width, ds.height);
                LabeledFrame { img: ds.frames[f].left.clone(), labels: grid, ignore: ign }
            })
            .collect();
        run_round(&pool, &mut params, &mut velocity, &mut rng, &mut reports, &mut rejected_steps)?;
    }

    save_checkpoint(&out.join("model.bin"), &params)?;
    write_training_log(&out.join("training_log.csv"), &reports)?;
    Ok(TrainOutcome { params, reports, relabel_rounds, rejected_steps })
}

pub fn load_model(path: &Path) -> Result<ModelParams, PipelineError> {
    Ok(load_checkpoint(path)?)
}

/// Aggregate quality statistics for one extractor on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub mean_keypoints: f64,
    pub mean_entropy: f64,
    pub dynamic_fraction: f64,
    pub repeatability: Option<f64>,
    pub trajectory: TrajectoryError,
}

/// Runs odometry plus per-frame coverage and warp repeatability for one
/// extractor. Repeatability warps the first frame with a seeded random
/// homography and scores detections across the pair.
pub fn evaluate_extractor(
    ds: &LoadedDataset,
    extractor: &dyn FeatureExtractor,
    vo_params: &VoParams,
    rho: f64,
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    let vo = run_vo(&ds.frames, extractor, &ds.rig, vo_params)?;
    let est = vo.absolute_trajectory(&PoseSE3::identity());
    let trajectory = trajectory_error(&est, &ds.gt_poses, &vo.failures);

    let mut total_kps = 0usize;
    let mut dyn_hits = 0.0;
    let mut entropy_sum = 0.0;
    for (f, frame) in ds.frames.iter().enumerate() {
        let kps = extractor.extract(&frame.left);
        let cov = coverage(&kps, ds.width, ds.height, Some(&ds.dynamic_masks[f]));
        total_kps += cov.keypoint_count;
        dyn_hits += cov.dynamic_fraction * cov.keypoint_count as f64;
        entropy_sum += cov.occupancy_entropy;
    }
    let n = ds.frames.len() as f64;
    let mean_keypoints = total_kps as f64 / n;
    let mean_entropy = entropy_sum / n;
    let dynamic_fraction = if total_kps == 0 { 0.0 } else { dyn_hits / total_kps as f64 };

    let hcfg = HomographyConfig::new(ds.width, ds.height);
    let h = sample_homography(&hcfg, seed ^ 0xE7A1);
    let (warped, _mask) = warp_image(&ds.frames[0].left, &h);
    let kps_a = extractor.extract(&ds.frames[0].left);
    let kps_b = extractor.extract(&warped);
    let repeatability =
        repeatability_from_keypoints(&kps_a, &kps_b, &h, ds.width, ds.height, rho);

    Ok(EvalReport { mean_keypoints, mean_entropy, dynamic_fraction, repeatability, trajectory })
}

/// Evaluates one extractor, writing `eval.txt` and a keypoint overlay of
/// the first frame.
pub fn run_eval_stage(
    ds: &LoadedDataset,
    extractor: &dyn FeatureExtractor,
    cfg: &RunConfig,
    seed: u64,
    out: &Path,
) -> Result<EvalReport, PipelineError> {
    fs::create_dir_all(out)?;
    let report = evaluate_extractor(ds, extractor, &cfg.vo_params(seed), cfg.repeat_rho, seed)?;
    let kps = extractor.extract(&ds.frames[0].left);
    render_overlay(&ds.frames[0].left, &kps).write_pgm(&out.join("overlay_000.pgm"))?;

    let mut f = BufWriter::new(fs::File::create(out.join("eval.txt"))?);
    writeln!(f, "mean_keypoints = {:.3}", report.mean_keypoints)?;
    writeln!(f, "occupancy_entropy = {:.6}", report.mean_entropy)?;
    writeln!(f, "dynamic_fraction = {:.6}", report.dynamic_fraction)?;
    match report.repeatability {
        Some(r) => writeln!(f, "repeatability = {r:.6}")?,
        None => writeln!(f, "repeatability = n/a")?,
    }
    writeln!(f, "ate_rmse = {:.6}", report.trajectory.ate_rmse)?;
    writeln!(f, "rpe_trans = {:.6}", report.trajectory.rpe_trans)?;
    writeln!(f, "rpe_rot_deg = {:.6}", report.trajectory.rpe_rot_deg)?;
    writeln!(f, "vo_failures = {}", report.trajectory.failure_count)?;
    Ok(report)
}

fn row_from_report(method: &str, r: &EvalReport) -> ComparisonRow {
    ComparisonRow {
        method: method.to_string(),
        mean_keypoints: r.mean_keypoints,
        occupancy_entropy: r.mean_entropy,
        dynamic_fraction: r.dynamic_fraction,
        repeatability: r.repeatability,
        ate_rmse: r.trajectory.ate_rmse,
        vo_failures: r.trajectory.failure_count,
    }
}

/// Scores the hand-written detector, an untrained network, and (when given)
/// a trained network side by side, writing `compare.txt`.
pub fn run_compare_stage(
    ds: &LoadedDataset,
    cfg: &RunConfig,
    seed: u64,
    trained: Option<&ModelParams>,
    out: &Path,
) -> Result<Vec<ComparisonRow>, PipelineError> {
    fs::create_dir_all(out)?;
    let vo_params = cfg.vo_params(seed);
    let mut rows = Vec::new();

    let classical = ClassicalExtractor { nms: cfg.nms(), ..Default::default() };
    let r = evaluate_extractor(ds, &classical, &vo_params, cfg.repeat_rho, seed)?;
    rows.push(row_from_report("classical", &r));

    let untrained =
        NetworkExtractor { params: ModelParams::init(cfg.descriptor_dim, seed), nms: cfg.nms() };
    let r = evaluate_extractor(ds, &untrained, &vo_params, cfg.repeat_rho, seed)?;
    rows.push(row_from_report("net-untrained", &r));

    if let Some(params) = trained {
        let net = NetworkExtractor { params: params.clone(), nms: cfg.nms() };
        let r = evaluate_extractor(ds, &net, &vo_params, cfg.repeat_rho, seed)?;
        rows.push(row_from_report("net-trained", &r));
    }

    fs::write(out.join("compare.txt"), format_comparison(&rows))?;
    Ok(rows)
}

/// Keypoints of the classical detector on every frame; used by tests and
/// the overlay path.
pub fn classical_keypoints(ds: &LoadedDataset, nms: &NmsParams) -> Vec<Vec<crate::features::Keypoint>> {
    let ex = ClassicalExtractor { nms: *nms, ..Default::default() };
    ds.frames.iter().map(|f| ex.extract(&f.left)).collect()
}
