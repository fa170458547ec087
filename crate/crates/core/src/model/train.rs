//! SGD-with-momentum training on pseudo-labeled frames, plus the closed
//! loop: run odometry with some extractor, keep tracks that survive the
//! geometric checks, turn them into cell labels, and fit the network to
//! them alongside a random homographic warp of each image.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::loss::{total_loss_backward, HingeParams, LossInputs, LossReport, LossWeights};
use super::{apply_update, backward, forward_full, ModelError, ModelGrads, ModelParams};
use crate::features::FeatureExtractor;
use crate::geometry::{sample_homography, Homography, HomographyConfig, StereoRig};
use crate::image::GrayImage;
use crate::matcher_vo::{run_vo, VoError, VoParams};
use crate::supervision::{
    build_correspondence_matrix, build_frame_targets, make_warped_pair, score_tracks, LabelGrid,
    SupervisionConfig, Verdict,
};
use crate::synthscene::StereoFrame;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    BadConfig(String),
    #[error("dataset has {0} frames, odometry needs at least 2")]
    TooFewFrames(usize),
    #[error("no track passed the geometric checks; nothing to supervise on")]
    NoGoodTracks,
    #[error("empty training pool")]
    EmptyPool,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vo(#[from] VoError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("training log malformed: {0}")]
    BadLog(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub step_size: f64,
    /// Momentum coefficient, in [0, 1).
    pub momentum: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub hinge: HingeParams,
    /// Gate for cell correspondences between an image and its warp, pixels.
    pub eps_cell: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            step_size: 1e-3,
            momentum: 0.9,
            steps: 100,
            batch_size: 2,
            seed: 7,
            weights: LossWeights::default(),
            hinge: HingeParams::default(),
            eps_cell: 8.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.step_size >= 0.0) || !self.step_size.is_finite() {
            return Err("step size must be finite and nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must be in [0, 1)".into());
        }
        if self.batch_size == 0 {
            return Err("batch size must be at least 1".into());
        }
        if !(self.eps_cell > 0.0) {
            return Err("eps_cell must be positive".into());
        }
        self.weights.validate()
    }
}

/// One pseudo-labeled image ready to be drawn into batches.
#[derive(Debug, Clone)]
pub struct LabeledFrame {
    pub img: GrayImage,
    pub labels: LabelGrid,
    /// Cells owned by still-undecided tracks, excluded from detector
    /// supervision on the unwarped image.
    pub ignore: Array2<bool>,
}

/// One batch entry: a labeled image and the warp to pair it with.
pub struct TrainSample<'a> {
    pub img: &'a GrayImage,
    pub labels: &'a LabelGrid,
    pub ignore: &'a Array2<bool>,
    pub homography: Homography,
}

fn should_reject(report: &LossReport, grads: &ModelGrads) -> bool {
    let vals = [report.l_i, report.l_i_warped, report.l_pk, report.l_d, report.total];
    !vals.iter().all(|v| v.is_finite()) || !grads.is_finite()
}

/// One SGD step over a batch. Gradients from every sample (image and its
/// warp) accumulate in fixed order and are averaged over the batch; a
/// non-finite loss or gradient rejects the step, leaving the parameters and
/// velocity untouched, and reports it in the returned flag.
pub fn train_step(
    params: &mut ModelParams,
    velocity: &mut ModelGrads,
    batch: &[TrainSample],
    cfg: &TrainConfig,
) -> Result<(LossReport, bool), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyPool);
    }
    let mut grads = params.zeros_like();
    let mut sum = LossReport { l_i: 0.0, l_i_warped: 0.0, l_pk: 0.0, l_d: 0.0, total: 0.0 };
    for s in batch {
        let (w, h) = (s.img.width(), s.img.height());
        let (warped_img, warped_labels, warp_valid) =
            make_warped_pair(s.img, s.labels, &s.homography);
        let corr = build_correspondence_matrix(&s.homography, w, h, cfg.eps_cell);
        let (x, d, cache) = forward_full(params, s.img)?;
        let (xw, dw, cache_w) = forward_full(params, &warped_img)?;
        let valid = s.ignore.mapv(|b| !b);
        let inputs = LossInputs {
            x: &x,
            y: s.labels,
            valid: &valid,
            x_warped: &xw,
            y_warped: &warped_labels,
            valid_warped: &warp_valid,
            d: &d,
            d_warped: &dw,
            s: &corr,
        };
        let (report, _flags, gx, gxw, gd, gdw) =
            total_loss_backward(&inputs, &cfg.weights, &cfg.hinge);
        backward(params, &cache, &gx, &gd, &mut grads);
        backward(params, &cache_w, &gxw, &gdw, &mut grads);
        sum.l_i += report.l_i;
        sum.l_i_warped += report.l_i_warped;
        sum.l_pk += report.l_pk;
        sum.l_d += report.l_d;
        sum.total += report.total;
    }
    let n = batch.len() as f64;
    let mean = LossReport {
        l_i: sum.l_i / n,
        l_i_warped: sum.l_i_warped / n,
        l_pk: sum.l_pk / n,
        l_d: sum.l_d / n,
        total: sum.total / n,
    };
    for l in grads.layers_mut() {
        l.weight.mapv_inplace(|v| v / n);
        l.bias.mapv_inplace(|v| v / n);
    }
    if should_reject(&mean, &grads) {
        return Ok((mean, true));
    }
    apply_update(params, velocity, &grads, cfg.step_size, cfg.momentum);
    Ok((mean, false))
}

/// Owns the optimizer state and the batch-sampling RNG, so runs with the
/// same seed and pool reproduce bit-identical parameters.
pub struct Trainer {
    pub params: ModelParams,
    pub velocity: ModelGrads,
    pub cfg: TrainConfig,
    pub reports: Vec<LossReport>,
    pub rejected_steps: usize,
    rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(params: ModelParams, cfg: TrainConfig) -> Result<Trainer, TrainError> {
        cfg.validate().map_err(TrainError::BadConfig)?;
        let velocity = params.zeros_like();
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer { params, velocity, cfg, reports: Vec::new(), rejected_steps: 0, rng })
    }

    /// Draws a batch (frame indices and per-sample warps) and takes one step.
    pub fn step(&mut self, pool: &[LabeledFrame]) -> Result<LossReport, TrainError> {
        if pool.is_empty() {
            return Err(TrainError::EmptyPool);
        }
        let hcfg = HomographyConfig::new(pool[0].img.width(), pool[0].img.height());
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = self.rng.gen_range(0..pool.len());
            let h = sample_homography(&hcfg, self.rng.gen());
            batch.push(TrainSample {
                img: &pool[idx].img,
                labels: &pool[idx].labels,
                ignore: &pool[idx].ignore,
                homography: h,
            });
        }
        let (report, rejected) =
            train_step(&mut self.params, &mut self.velocity, &batch, &self.cfg)?;
        if rejected {
            self.rejected_steps += 1;
        }
        self.reports.push(report);
        Ok(report)
    }

    pub fn run(&mut self, pool: &[LabeledFrame]) -> Result<(), TrainError> {
        for _ in 0..self.cfg.steps {
            self.step(pool)?;
        }
        Ok(())
    }
}

pub const TRAIN_LOG_HEADER: &str = "step,l_i,l_i_warped,l_pk,l_d,total";

pub fn write_training_log(path: &Path, reports: &[LossReport]) -> Result<(), TrainError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{TRAIN_LOG_HEADER}")?;
    for (i, r) in reports.iter().enumerate() {
        writeln!(
            f,
            "{i},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.l_i, r.l_i_warped, r.l_pk, r.l_d, r.total
        )?;
    }
    Ok(())
}

pub fn read_training_log(path: &Path) -> Result<Vec<LossReport>, TrainError> {
    let f = BufReader::new(fs::File::open(path)?);
    let mut lines = f.lines();
    match lines.next() {
        Some(Ok(h)) if h == TRAIN_LOG_HEADER => {}
        _ => return Err(TrainError::BadLog("missing header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(TrainError::BadLog(format!("line {}: {} fields", i + 2, fields.len())));
        }
        let step: usize =
            fields[0].parse().map_err(|_| TrainError::BadLog(format!("bad step {:?}", fields[0])))?;
        if step != i {
            return Err(TrainError::BadLog(format!("step {step} out of order")));
        }
        let mut vals = [0.0f64; 5];
        for (v, field) in vals.iter_mut().zip(&fields[1..]) {
            *v = field
                .parse()
                .map_err(|_| TrainError::BadLog(format!("bad value {field:?}")))?;
        }
        out.push(LossReport {
            l_i: vals[0],
            l_i_warped: vals[1],
            l_pk: vals[2],
            l_d: vals[3],
            total: vals[4],
        });
    }
    Ok(out)
}

/// What one labeling-plus-training round did.
#[derive(Debug, Clone)]
pub struct RoundReport {
    pub total_tracks: usize,
    pub good_tracks: usize,
    pub vo_failures: usize,
    pub rejected_steps: usize,
    pub reports: Vec<LossReport>,
}

impl RoundReport {
    pub fn mean_total(&self) -> f64 {
        if self.reports.is_empty() {
            return 0.0;
        }
        self.reports.iter().map(|r| r.total).sum::<f64>() / self.reports.len() as f64
    }
}

/// One full self-supervision round: run stereo odometry with `labeler`,
/// score the resulting tracks geometrically, rasterize the survivors into
/// per-frame cell labels, and fit `params` to them. Errors out if odometry
/// is impossible or no track passes the checks (callers can then fall back
/// to a different labeler instead of training on nothing).
#[allow(clippy::too_many_arguments)]
pub fn self_supervised_round(
    frames: &[StereoFrame],
    rig: &StereoRig,
    labeler: &dyn FeatureExtractor,
    params: &mut ModelParams,
    velocity: &mut ModelGrads,
    cfg: &TrainConfig,
    sup: &SupervisionConfig,
    vo_params: &VoParams,
) -> Result<RoundReport, TrainError> {
    cfg.validate().map_err(TrainError::BadConfig)?;
    if frames.len() < 2 {
        return Err(TrainError::TooFewFrames(frames.len()));
    }
    let vo = run_vo(frames, labeler, rig, vo_params)?;
    let verdicts = score_tracks(&vo, rig, sup);
    let good_tracks = verdicts.iter().filter(|v| v.verdict == Verdict::Good).count();
    if good_tracks == 0 {
        return Err(TrainError::NoGoodTracks);
    }
    let (w, h) = (frames[0].left.width(), frames[0].left.height());
    let pool: Vec<LabeledFrame> = (0..frames.len())
        .map(|f| {
            let (labels, ignore) = build_frame_targets(&vo.tracks, &verdicts, f, w, h);
            LabeledFrame { img: frames[f].left.clone(), labels, ignore }
        })
        .collect();

    let hcfg = HomographyConfig::new(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut reports = Vec::with_capacity(cfg.steps);
    let mut rejected_steps = 0;
    for _ in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..pool.len());
            let hw = sample_homography(&hcfg, rng.gen());
            batch.push(TrainSample {
                img: &pool[idx].img,
                labels: &pool[idx].labels,
                ignore: &pool[idx].ignore,
                homography: hw,
            });
        }
        let (report, rejected) = train_step(params, velocity, &batch, cfg)?;
        if rejected {
            rejected_steps += 1;
        }
        reports.push(report);
    }
    Ok(RoundReport {
        total_tracks: vo.tracks.len(),
        good_tracks,
        vo_failures: vo.failure_count(),
        rejected_steps,
        reports,
    })
}
