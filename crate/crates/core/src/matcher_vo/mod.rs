//! Descriptor matching (stereo and temporal) and a minimal stereo
//! visual-odometry loop: extract, match, triangulate, P3P-RANSAC, refine.
//! Produces relative poses plus feature tracks for the labeling stage.

mod pnp;
mod vo;

pub use pnp::{estimate_relative_pose, rigid_align, solve_p3p, PnpError, RansacConfig};
pub use vo::{
    observations_from_extractor, oracle_observations, run_vo, vo_from_observations,
    FrameObservations, ObservedKeypoint, TemporalMatching, VoParams,
};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use nalgebra::Vector2;
use thiserror::Error;

use crate::features::Keypoint;
use crate::geometry::{PoseSE3, StereoRig};

#[derive(Debug, Error)]
pub enum VoError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("tracks file malformed: {0}")]
    BadTracksFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Accepted descriptor correspondence between two keypoint sets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub idx_a: usize,
    pub idx_b: usize,
    /// Descriptor dot product, in [-1, 1] for unit descriptors.
    pub similarity: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchParams {
    /// Lowe ratio on Euclidean descriptor distance.
    pub ratio: f64,
    pub mutual: bool,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams { ratio: 0.8, mutual: true }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Best and second-best candidate (by squared distance) among allowed
/// indices; ties keep the lower index.
fn best_two(
    query: &[f64],
    pool: &[Vec<f64>],
    allowed: impl Iterator<Item = usize>,
) -> (Option<(usize, f64)>, Option<f64>) {
    let mut best: Option<(usize, f64)> = None;
    let mut second: Option<f64> = None;
    for j in allowed {
        let d = sq_dist(query, &pool[j]);
        match best {
            None => best = Some((j, d)),
            Some((_, bd)) if d < bd => {
                second = Some(bd);
                best = Some((j, d));
            }
            Some(_) => match second {
                None => second = Some(d),
                Some(sd) if d < sd => second = Some(d),
                Some(_) => {}
            },
        }
    }
    (best, second)
}

/// Mutual nearest-neighbor matching with a Lowe ratio test, applied in both
/// directions when `mutual` is set so the result is symmetric under swapping
/// the inputs. Queries with fewer than two candidates skip the ratio test.
/// Output sorted by idx_a.
pub fn match_descriptor_sets(
    a: &[Vec<f64>],
    b: &[Vec<f64>],
    params: &MatchParams,
) -> Vec<Match> {
    if a.is_empty() || b.is_empty() {
        return Vec::new();
    }
    let ratio_ok = |best: f64, second: Option<f64>| -> bool {
        match second {
            Some(s) => best.sqrt() < params.ratio * s.sqrt(),
            None => true,
        }
    };
    let mut out = Vec::new();
    for (i, qa) in a.iter().enumerate() {
        let (Some((j, d_ab)), second_ab) = best_two(qa, b, 0..b.len()) else { continue };
        if !ratio_ok(d_ab, second_ab) {
            continue;
        }
        if params.mutual {
            let (Some((back, d_ba)), second_ba) = best_two(&b[j], a, 0..a.len()) else { continue };
            if back != i || !ratio_ok(d_ba, second_ba) {
                continue;
            }
            debug_assert!((d_ab - d_ba).abs() < 1e-12);
        }
        out.push(Match { idx_a: i, idx_b: j, similarity: dot(qa, &b[j]) });
    }
    out
}

/// Keypoint-level wrapper over descriptor matching.
pub fn match_descriptors(a: &[Keypoint], b: &[Keypoint], params: &MatchParams) -> Vec<Match> {
    let da: Vec<Vec<f64>> = a.iter().map(|k| k.descriptor.clone()).collect();
    let db: Vec<Vec<f64>> = b.iter().map(|k| k.descriptor.clone()).collect();
    match_descriptor_sets(&da, &db, params)
}

/// Stereo correspondence with triangulated depth; depth is None for far
/// points whose disparity fell below `min_disparity`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StereoMatch {
    pub m: Match,
    pub depth: Option<f64>,
}

/// Descriptor matching restricted to the rectified-epipolar gate: candidates
/// must sit within `band` rows and at positive disparity. Mutual and ratio
/// rules as in descriptor matching, evaluated inside the gated candidate
/// sets.
pub fn stereo_match(
    left: &[Keypoint],
    right: &[Keypoint],
    rig: &StereoRig,
    band: f64,
    min_disparity: f64,
    params: &MatchParams,
) -> Vec<StereoMatch> {
    if left.is_empty() || right.is_empty() {
        return Vec::new();
    }
    let gate = |l: &Keypoint, r: &Keypoint| -> bool {
        (l.y as f64 - r.y as f64).abs() <= band && (l.x as f64 - r.x as f64) > 0.0
    };
    let dl: Vec<Vec<f64>> = left.iter().map(|k| k.descriptor.clone()).collect();
    let dr: Vec<Vec<f64>> = right.iter().map(|k| k.descriptor.clone()).collect();
    let ratio_ok = |best: f64, second: Option<f64>| -> bool {
        match second {
            Some(s) => best.sqrt() < params.ratio * s.sqrt(),
            None => true,
        }
    };
    let mut out = Vec::new();
    for (i, l) in left.iter().enumerate() {
        let allowed = (0..right.len()).filter(|&j| gate(l, &right[j]));
        let (Some((j, d_lr)), second_lr) = best_two(&dl[i], &dr, allowed) else { continue };
        if !ratio_ok(d_lr, second_lr) {
            continue;
        }
        if params.mutual {
            let allowed_back = (0..left.len()).filter(|&ii| gate(&left[ii], &right[j]));
            let (Some((back, d_rl)), second_rl) = best_two(&dr[j], &dl, allowed_back) else {
                continue;
            };
            if back != i || !ratio_ok(d_rl, second_rl) {
                continue;
            }
            let _ = d_rl;
        }
        let lp = Vector2::new(l.x as f64, l.y as f64);
        let rp = Vector2::new(right[j].x as f64, right[j].y as f64);
        let depth = rig
            .triangulate_rectified(&lp, &rp, min_disparity, band)
            .ok()
            .map(|(_, depth)| depth);
        out.push(StereoMatch { m: Match { idx_a: i, idx_b: j, similarity: dot(&dl[i], &dr[j]) }, depth });
    }
    out
}

/// One observation of a track: pixel positions are stored as reals so oracle
/// tracks can carry exact subpixel projections; detector tracks hold
/// integer-valued coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackObservation {
    pub frame: usize,
    pub left: Vector2<f64>,
    pub right: Option<Vector2<f64>>,
    pub depth: Option<f64>,
    pub descriptor: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Track {
    pub id: u64,
    pub observations: Vec<TrackObservation>,
}

impl Track {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    fn push(&mut self, obs: TrackObservation) {
        debug_assert!(
            self.observations.last().map_or(true, |last| last.frame < obs.frame),
            "track frames must strictly increase"
        );
        self.observations.push(obs);
    }
}

/// Output of the odometry loop over n frames: n-1 relative poses (frame t
/// coordinates into frame t+1), the track table, per-pair inlier counts, and
/// which pairs fell back to identity.
#[derive(Debug, Clone)]
pub struct VOResult {
    pub relative_poses: Vec<PoseSE3>,
    pub tracks: Vec<Track>,
    pub inlier_counts: Vec<usize>,
    pub failures: Vec<bool>,
}

impl VOResult {
    /// Camera-to-world poses accumulated from the relative chain, with frame
    /// 0 at `initial`.
    pub fn absolute_trajectory(&self, initial: &PoseSE3) -> Vec<PoseSE3> {
        let mut out = Vec::with_capacity(self.relative_poses.len() + 1);
        out.push(*initial);
        for rel in &self.relative_poses {
            let prev = *out.last().unwrap();
            out.push(prev.compose(&rel.inverse()));
        }
        out
    }

    pub fn failure_count(&self) -> usize {
        self.failures.iter().filter(|&&f| f).count()
    }

    pub fn mean_inliers(&self) -> f64 {
        if self.inlier_counts.is_empty() {
            return 0.0;
        }
        self.inlier_counts.iter().sum::<usize>() as f64 / self.inlier_counts.len() as f64
    }
}

pub const TRACKS_HEADER: &str = "track_id,frame,x,y,right_x,depth";

/// Track table as CSV; right_x and depth are blank when unknown. Descriptors
/// are not persisted (the keypoint dump holds them).
pub fn write_tracks(path: &Path, tracks: &[Track]) -> Result<(), VoError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{TRACKS_HEADER}")?;
    for t in tracks {
        for o in &t.observations {
            let right_x = o.right.map(|r| format!("{:.6}", r.x)).unwrap_or_default();
            let depth = o.depth.map(|d| format!("{d:.6}")).unwrap_or_default();
            writeln!(f, "{},{},{:.6},{:.6},{},{}", t.id, o.frame, o.left.x, o.left.y, right_x, depth)?;
        }
    }
    Ok(())
}

/// Reads a track table. Right pixels are reconstructed on the keypoint's row
/// (the writer only stores right_x; rows were epipolar-gated at match time).
/// Descriptors come back empty.
pub fn read_tracks(path: &Path) -> Result<Vec<Track>, VoError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == TRACKS_HEADER => {}
        other => return Err(VoError::BadTracksFile(format!("bad header {other:?}"))),
    }
    let mut tracks: Vec<Track> = Vec::new();
    let mut index: std::collections::BTreeMap<u64, usize> = std::collections::BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(VoError::BadTracksFile(format!(
                "row {}: expected 6 fields, got {}",
                lineno + 2,
                fields.len()
            )));
        }
        let bad = |what: &str| VoError::BadTracksFile(format!("row {}: bad {what}", lineno + 2));
        let id: u64 = fields[0].trim().parse().map_err(|_| bad("track_id"))?;
        let frame: usize = fields[1].trim().parse().map_err(|_| bad("frame"))?;
        let x: f64 = fields[2].trim().parse().map_err(|_| bad("x"))?;
        let y: f64 = fields[3].trim().parse().map_err(|_| bad("y"))?;
        let right = if fields[4].trim().is_empty() {
            None
        } else {
            let rx: f64 = fields[4].trim().parse().map_err(|_| bad("right_x"))?;
            Some(Vector2::new(rx, y))
        };
        let depth = if fields[5].trim().is_empty() {
            None
        } else {
            Some(fields[5].trim().parse().map_err(|_| bad("depth"))?)
        };
        let slot = *index.entry(id).or_insert_with(|| {
            tracks.push(Track { id, observations: Vec::new() });
            tracks.len() - 1
        });
        tracks[slot].push(TrackObservation {
            frame,
            left: Vector2::new(x, y),
            right,
            depth,
            descriptor: Vec::new(),
        });
    }
    Ok(tracks)
}

/// Run summary, flat key=value.
pub fn write_vo_summary(path: &Path, frames: usize, failures: usize, mean_inliers: f64) -> Result<(), VoError> {
    let text = format!("frames = {frames}\nfailures = {failures}\nmean_inliers = {mean_inliers:.3}\n");
    fs::write(path, text)?;
    Ok(())
}
