//! Turns odometry geometry into training targets: good/bad track verdicts
//! from reprojection residuals, per-frame pseudo-label grids, warped
//! image/label pairs, and the cell correspondence matrix driving the
//! descriptor loss.

use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use nalgebra::Vector2;
use ndarray::Array2;
use thiserror::Error;

use crate::features::CELL;
use crate::geometry::{
    apply_homography, reprojection_residual, warp_image, Homography, PoseSE3, StereoRig,
};
use crate::image::GrayImage;
use crate::matcher_vo::{Track, VOResult};

pub const DUSTBIN_LABEL: u8 = 64;

#[derive(Debug, Error)]
pub enum SupervisionError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("file malformed: {0}")]
    BadFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SupervisionConfig {
    /// Mean temporal reprojection residual allowed for a good track, px.
    pub tau_px: f64,
    /// Minimum track length (frames) for a good verdict.
    pub l_min: usize,
    /// Right-image reprojection tolerance, px.
    pub stereo_tau: f64,
    /// Cell-center correspondence tolerance, px.
    pub eps_cell: f64,
}

impl Default for SupervisionConfig {
    fn default() -> Self {
        SupervisionConfig { tau_px: 1.0, l_min: 3, stereo_tau: 1.0, eps_cell: 8.0 }
    }
}

impl SupervisionConfig {
    pub fn validate(&self) -> Result<(), SupervisionError> {
        if !(self.tau_px > 0.0) || !(self.stereo_tau > 0.0) || !(self.eps_cell > 0.0) {
            return Err(SupervisionError::InvalidConfig(
                "thresholds must be positive".into(),
            ));
        }
        if self.l_min == 0 {
            return Err(SupervisionError::InvalidConfig("l_min must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Good,
    Bad,
    Undecided,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Good => "good",
            Verdict::Bad => "bad",
            Verdict::Undecided => "undecided",
        })
    }
}

impl FromStr for Verdict {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "good" => Ok(Verdict::Good),
            "bad" => Ok(Verdict::Bad),
            "undecided" => Ok(Verdict::Undecided),
            other => Err(format!("unknown verdict {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoodFeatureVerdict {
    pub track_id: u64,
    pub verdict: Verdict,
    /// Mean temporal reprojection residual; None when no observation pair
    /// had usable depth.
    pub mean_residual: Option<f64>,
    pub track_length: usize,
    pub stereo_consistent: bool,
}

/// Composition of the estimated relative poses mapping frame `a` coordinates
/// into frame `b` (a < b).
fn pose_between(relative: &[PoseSE3], a: usize, b: usize) -> Option<PoseSE3> {
    if a >= b || b > relative.len() {
        return None;
    }
    let mut pose = PoseSE3::identity();
    for rel in &relative[a..b] {
        pose = rel.compose(&pose);
    }
    Some(pose)
}

/// Judges each track against the estimated motion. Temporal cue: for every
/// consecutive observation pair whose first observation has depth, the
/// reprojection residual under the composed VO pose; mean over pairs. Stereo
/// cue: the triangulated point must reproject into the right camera within
/// stereo_tau for every stereo observation. Good requires length, residual,
/// and stereo to all pass; bad requires positive evidence of a violation, so
/// tracks lacking depth are undecided rather than bad.
pub fn score_tracks(
    vo: &VOResult,
    rig: &StereoRig,
    cfg: &SupervisionConfig,
) -> Vec<GoodFeatureVerdict> {
    let intr = &rig.intrinsics;
    vo.tracks
        .iter()
        .map(|track| {
            let mut residual_sum = 0.0;
            let mut residual_n = 0usize;
            let mut stereo_consistent = true;
            for o in &track.observations {
                let (Some(right), Some(depth)) = (o.right, o.depth) else { continue };
                let consistent = intr
                    .unproject(&o.left, depth)
                    .ok()
                    .and_then(|p| rig.project_right(&p).ok())
                    .map_or(false, |proj| (proj - right).norm() <= cfg.stereo_tau);
                if !consistent {
                    stereo_consistent = false;
                }
            }
            for w in track.observations.windows(2) {
                let Some(depth) = w[0].depth else { continue };
                let Some(pose) = pose_between(&vo.relative_poses, w[0].frame, w[1].frame) else {
                    continue;
                };
                let r = intr
                    .unproject(&w[0].left, depth)
                    .ok()
                    .and_then(|p| reprojection_residual(intr, &pose, &p, &w[1].left).ok())
                    .map_or(f64::INFINITY, |r| r.norm());
                residual_sum += r;
                residual_n += 1;
            }
            let mean_residual =
                if residual_n > 0 { Some(residual_sum / residual_n as f64) } else { None };
            let residual_ok = mean_residual.map_or(false, |m| m <= cfg.tau_px);
            let verdict = if track.len() >= cfg.l_min && residual_ok && stereo_consistent {
                Verdict::Good
            } else if mean_residual.map_or(false, |m| m > cfg.tau_px) || !stereo_consistent {
                Verdict::Bad
            } else {
                Verdict::Undecided
            };
            GoodFeatureVerdict {
                track_id: track.id,
                verdict,
                mean_residual,
                track_length: track.len(),
                stereo_consistent,
            }
        })
        .collect()
}

/// Per-cell detector targets at 1/8 resolution: 0..=63 encode the keypoint's
/// offset inside the 8x8 cell (row-major), 64 is the dustbin.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelGrid {
    pub labels: Array2<u8>,
}

impl LabelGrid {
    /// All-dustbin grid for an image of the given size (multiples of 8).
    pub fn empty(width: usize, height: usize) -> LabelGrid {
        assert!(width % CELL == 0 && height % CELL == 0, "image size must be a multiple of 8");
        LabelGrid { labels: Array2::from_elem((height / CELL, width / CELL), DUSTBIN_LABEL) }
    }

    pub fn hc(&self) -> usize {
        self.labels.nrows()
    }

    pub fn wc(&self) -> usize {
        self.labels.ncols()
    }

    /// Pixels encoded by the non-dustbin cells, raster order.
    pub fn decode(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for ((r, c), &v) in self.labels.indexed_iter() {
            if v < DUSTBIN_LABEL {
                let dy = (v / CELL as u8) as usize;
                let dx = (v % CELL as u8) as usize;
                out.push((c * CELL + dx, r * CELL + dy));
            }
        }
        out
    }
}

/// A keypoint admitted into the label grid, with the residual used to break
/// cell collisions (must be finite).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabeledPixel {
    pub x: usize,
    pub y: usize,
    pub residual: f64,
}

/// Encodes keypoints into cells; a cell keeps the keypoint with the smallest
/// residual, ties broken by raster pixel order (y, then x), so the result
/// does not depend on input order.
pub fn build_label_grid(keypoints: &[LabeledPixel], width: usize, height: usize) -> LabelGrid {
    let mut grid = LabelGrid::empty(width, height);
    let mut winner: Array2<Option<LabeledPixel>> =
        Array2::from_elem((height / CELL, width / CELL), None);
    for kp in keypoints {
        debug_assert!(kp.x < width && kp.y < height, "keypoint outside image");
        if kp.x >= width || kp.y >= height {
            continue;
        }
        let cell = (kp.y / CELL, kp.x / CELL);
        let keep = match winner[cell] {
            None => true,
            Some(prev) => match kp.residual.total_cmp(&prev.residual) {
                std::cmp::Ordering::Less => true,
                std::cmp::Ordering::Greater => false,
                std::cmp::Ordering::Equal => (kp.y, kp.x) < (prev.y, prev.x),
            },
        };
        if keep {
            winner[cell] = Some(*kp);
        }
    }
    for ((r, c), w) in winner.indexed_iter() {
        if let Some(kp) = w {
            grid.labels[(r, c)] = ((kp.y % CELL) * CELL + kp.x % CELL) as u8;
        }
    }
    grid
}

/// Keypoints of good tracks observed at `frame`, rounded to pixels, carrying
/// the track's mean residual for collision resolution.
pub fn good_keypoints_for_frame(
    tracks: &[Track],
    verdicts: &[GoodFeatureVerdict],
    frame: usize,
    width: usize,
    height: usize,
) -> Vec<LabeledPixel> {
    let mut out = Vec::new();
    for (t, v) in tracks.iter().zip(verdicts) {
        debug_assert_eq!(t.id, v.track_id);
        if v.verdict != Verdict::Good {
            continue;
        }
        for o in t.observations.iter().filter(|o| o.frame == frame) {
            let x = o.left.x.round();
            let y = o.left.y.round();
            if x < 0.0 || y < 0.0 || x as usize >= width || y as usize >= height {
                continue;
            }
            out.push(LabeledPixel {
                x: x as usize,
                y: y as usize,
                residual: v.mean_residual.unwrap_or(f64::MAX),
            });
        }
    }
    out
}

/// Label grid for one frame plus the ignore mask: cells holding only
/// undecided-track keypoints are excluded from detector supervision instead
/// of being forced to the dustbin.
pub fn build_frame_targets(
    tracks: &[Track],
    verdicts: &[GoodFeatureVerdict],
    frame: usize,
    width: usize,
    height: usize,
) -> (LabelGrid, Array2<bool>) {
    let good = good_keypoints_for_frame(tracks, verdicts, frame, width, height);
    let grid = build_label_grid(&good, width, height);
    let mut ignore = Array2::from_elem((height / CELL, width / CELL), false);
    for (t, v) in tracks.iter().zip(verdicts) {
        if v.verdict != Verdict::Undecided {
            continue;
        }
        for o in t.observations.iter().filter(|o| o.frame == frame) {
            let x = o.left.x.round();
            let y = o.left.y.round();
            if x < 0.0 || y < 0.0 || x as usize >= width || y as usize >= height {
                continue;
            }
            let cell = (y as usize / CELL, x as usize / CELL);
            if grid.labels[cell] == DUSTBIN_LABEL {
                ignore[cell] = true;
            }
        }
    }
    (grid, ignore)
}

/// Warps the image and transports its labels: each labeled keypoint maps
/// through the homography, rounds to the nearest pixel, and re-encodes if it
/// lands inside the image on warp-valid pixels (collisions keep the smallest
/// mapped raster position). The cell mask marks cells whose 64 pixels are
/// all warp-valid.
pub fn make_warped_pair(
    img: &GrayImage,
    grid: &LabelGrid,
    h: &Homography,
) -> (GrayImage, LabelGrid, Array2<bool>) {
    let (warped, mask) = warp_image(img, h);
    let (w, ht) = (img.width(), img.height());
    let mut winner: Array2<Option<(usize, usize)>> = Array2::from_elem((ht / CELL, w / CELL), None);
    for (x, y) in grid.decode() {
        let q = apply_homography(h, &Vector2::new(x as f64, y as f64));
        let qx = q.x.round();
        let qy = q.y.round();
        if qx < 0.0 || qy < 0.0 || qx as usize >= w || qy as usize >= ht {
            continue;
        }
        let (qx, qy) = (qx as usize, qy as usize);
        if !mask.get(qx, qy) {
            continue;
        }
        let cell = (qy / CELL, qx / CELL);
        let keep = match winner[cell] {
            None => true,
            Some((py, px)) => (qy, qx) < (py, px),
        };
        if keep {
            winner[cell] = Some((qy, qx));
        }
    }
    let mut out = LabelGrid::empty(w, ht);
    for ((r, c), win) in winner.indexed_iter() {
        if let Some((qy, qx)) = win {
            out.labels[(r, c)] = ((qy % CELL) * CELL + qx % CELL) as u8;
        }
    }
    let mut valid = Array2::from_elem((ht / CELL, w / CELL), true);
    for ((r, c), v) in valid.indexed_iter_mut() {
        'cell: for dy in 0..CELL {
            for dx in 0..CELL {
                if !mask.get(c * CELL + dx, r * CELL + dy) {
                    *v = false;
                    break 'cell;
                }
            }
        }
    }
    (warped, out, valid)
}

/// Binary cell correspondence under a homography: source cell c pairs with
/// the cell whose center is nearest to the mapped center of c, provided the
/// mapped center stays inside the image and within eps_cell of that center.
/// Row sums are <= 1 by the nearest-cell rule.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMatrix {
    /// (Hc*Wc, Hc*Wc), source cells in raster order on rows.
    pub s: Array2<u8>,
    /// Source cell's mapped center landed inside the image.
    pub valid: Vec<bool>,
}

impl CorrespondenceMatrix {
    /// Index of the cell this source cell pairs with, if any.
    pub fn target_of(&self, c: usize) -> Option<usize> {
        self.s.row(c).iter().position(|&v| v != 0)
    }
}

fn cell_center(r: usize, c: usize) -> Vector2<f64> {
    Vector2::new(c as f64 * CELL as f64 + 3.5, r as f64 * CELL as f64 + 3.5)
}

/// Nearest cell index along one axis for a mapped coordinate, ties to the
/// smaller index; matches an exhaustive argmin in raster order.
fn nearest_axis(q: f64, n: usize) -> usize {
    let f = ((q - 3.5) / CELL as f64).floor();
    let lo = f.clamp(0.0, (n - 1) as f64) as usize;
    let hi = (lo + 1).min(n - 1);
    let (dlo, dhi) = (
        (q - (lo as f64 * CELL as f64 + 3.5)).abs(),
        (q - (hi as f64 * CELL as f64 + 3.5)).abs(),
    );
    if dhi < dlo {
        hi
    } else {
        lo
    }
}

pub fn build_correspondence_matrix(
    h: &Homography,
    width: usize,
    height: usize,
    eps_cell: f64,
) -> CorrespondenceMatrix {
    let (wc, hc) = (width / CELL, height / CELL);
    let n = wc * hc;
    let mut s = Array2::zeros((n, n));
    let mut valid = vec![false; n];
    for r in 0..hc {
        for c in 0..wc {
            let idx = r * wc + c;
            let q = apply_homography(h, &cell_center(r, c));
            if q.x < 0.0 || q.y < 0.0 || q.x > (width - 1) as f64 || q.y > (height - 1) as f64 {
                continue;
            }
            valid[idx] = true;
            let tr = nearest_axis(q.y, hc);
            let tc = nearest_axis(q.x, wc);
            if (q - cell_center(tr, tc)).norm() <= eps_cell {
                s[(idx, tr * wc + tc)] = 1;
            }
        }
    }
    CorrespondenceMatrix { s, valid }
}

pub const LABELS_HEADER: &str = "cell_row,cell_col,label";
pub const VERDICTS_HEADER: &str = "track_id,verdict,mean_residual,length";

/// Non-dustbin cells only.
pub fn write_label_grid(path: &Path, grid: &LabelGrid) -> Result<(), SupervisionError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{LABELS_HEADER}")?;
    for ((r, c), &v) in grid.labels.indexed_iter() {
        if v != DUSTBIN_LABEL {
            writeln!(f, "{r},{c},{v}")?;
        }
    }
    Ok(())
}

pub fn read_label_grid(path: &Path, width: usize, height: usize) -> Result<LabelGrid, SupervisionError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == LABELS_HEADER => {}
        other => return Err(SupervisionError::BadFile(format!("bad labels header {other:?}"))),
    }
    let mut grid = LabelGrid::empty(width, height);
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(SupervisionError::BadFile(format!("bad labels row {line:?}")));
        }
        let parse = |s: &str| -> Result<usize, SupervisionError> {
            s.trim().parse().map_err(|_| SupervisionError::BadFile(format!("bad labels row {line:?}")))
        };
        let (r, c, v) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
        if r >= grid.hc() || c >= grid.wc() || v >= DUSTBIN_LABEL as usize {
            return Err(SupervisionError::BadFile(format!("labels row out of range {line:?}")));
        }
        grid.labels[(r, c)] = v as u8;
    }
    Ok(grid)
}

pub fn write_verdicts(path: &Path, verdicts: &[GoodFeatureVerdict]) -> Result<(), SupervisionError> {
    let mut f = BufWriter::new(fs::File::create(path)?);
    writeln!(f, "{VERDICTS_HEADER}")?;
    for v in verdicts {
        let mean = v.mean_residual.map(|m| format!("{m:.6}")).unwrap_or_default();
        writeln!(f, "{},{},{},{}", v.track_id, v.verdict, mean, v.track_length)?;
    }
    Ok(())
}

/// The file does not persist the stereo flag; read-back reconstructs it as
/// true (good verdicts require it, and absent evidence stays unflagged).
pub fn read_verdicts(path: &Path) -> Result<Vec<GoodFeatureVerdict>, SupervisionError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == VERDICTS_HEADER => {}
        other => return Err(SupervisionError::BadFile(format!("bad verdicts header {other:?}"))),
    }
    let mut out = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(SupervisionError::BadFile(format!("bad verdicts row {line:?}")));
        }
        let bad = || SupervisionError::BadFile(format!("bad verdicts row {line:?}"));
        out.push(GoodFeatureVerdict {
            track_id: fields[0].trim().parse().map_err(|_| bad())?,
            verdict: fields[1].trim().parse().map_err(|_| bad())?,
            mean_residual: if fields[2].trim().is_empty() {
                None
            } else {
                Some(fields[2].trim().parse().map_err(|_| bad())?)
            },
            track_length: fields[3].trim().parse().map_err(|_| bad())?,
            stereo_consistent: true,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ClassicalExtractor;
    use crate::geometry::HomographyConfig;
    use crate::matcher_vo::{
        oracle_observations, run_vo, vo_from_observations, TemporalMatching, TrackObservation,
        VoParams,
    };
    use crate::synthscene::{example_rig, render_sequence, sway_trajectory, SceneSpec};
    use nalgebra::Vector3;
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_rig() -> StereoRig {
        example_rig(128, 96)
    }

    fn manual_track(id: u64, obs: Vec<TrackObservation>) -> Track {
        Track { id, observations: obs }
    }

    #[test]
    fn noiseless_track_is_good_with_zero_residual() {
        let rig = test_rig();
        let intr = rig.intrinsics;
        let world = Vector3::new(0.2, -0.1, 5.0);
        let step = PoseSE3::new(nalgebra::Rotation3::identity(), Vector3::new(0.0, 0.0, -0.1));
        // camera moves +0.1 in z each frame, so the point in camera coords
        // shifts by -0.1; relative pose (t -> t+1) is that shift
        let mut obs = Vec::new();
        for f in 0..4 {
            let p = world - Vector3::new(0.0, 0.0, 0.1) * f as f64;
            let left = intr.project(&p).unwrap();
            let right = rig.project_right(&p).unwrap();
            obs.push(TrackObservation {
                frame: f,
                left,
                right: Some(right),
                depth: Some(p.z),
                descriptor: Vec::new(),
            });
        }
        let vo = VOResult {
            relative_poses: vec![step; 3],
            tracks: vec![manual_track(0, obs)],
            inlier_counts: vec![1; 3],
            failures: vec![false; 3],
        };
        let verdicts = score_tracks(&vo, &rig, &SupervisionConfig::default());
        assert_eq!(verdicts.len(), 1);
        assert_eq!(verdicts[0].verdict, Verdict::Good);
        assert!(verdicts[0].mean_residual.unwrap() < 1e-9);
        assert!(verdicts[0].stereo_consistent);
        assert_eq!(verdicts[0].track_length, 4);
    }

    #[test]
    fn length_one_track_is_undecided() {
        let rig = test_rig();
        let track = manual_track(
            7,
            vec![TrackObservation {
                frame: 0,
                left: Vector2::new(40.0, 40.0),
                // disparity fx*b/z = 100*0.12/3 = 4 px, stereo-consistent
                right: Some(Vector2::new(36.0, 40.0)),
                depth: Some(3.0),
                descriptor: Vec::new(),
            }],
        );
        let vo = VOResult {
            relative_poses: vec![PoseSE3::identity()],
            tracks: vec![track],
            inlier_counts: vec![0],
            failures: vec![false],
        };
        let verdicts = score_tracks(&vo, &rig, &SupervisionConfig::default());
        assert_eq!(verdicts[0].verdict, Verdict::Undecided);
        assert_eq!(verdicts[0].mean_residual, None);
    }

    #[test]
    fn depthless_track_never_bad() {
        let rig = test_rig();
        let obs: Vec<TrackObservation> = (0..5)
            .map(|f| TrackObservation {
                frame: f,
                left: Vector2::new(30.0 + 10.0 * f as f64, 40.0),
                right: None,
                depth: None,
                descriptor: Vec::new(),
            })
            .collect();
        let vo = VOResult {
            relative_poses: vec![PoseSE3::identity(); 4],
            tracks: vec![manual_track(0, obs)],
            inlier_counts: vec![0; 4],
            failures: vec![false; 4],
        };
        let verdicts = score_tracks(&vo, &rig, &SupervisionConfig::default());
        assert_eq!(verdicts[0].verdict, Verdict::Undecided);
    }

    #[test]
    fn oracle_tracks_recall_is_one() {
        let spec = SceneSpec::example(7, 128, 96);
        let rig = test_rig();
        let traj = sway_trajectory(6, 0.05);
        let ds = render_sequence(&spec, &traj, &rig).unwrap();
        let obs = oracle_observations(&ds, &rig);
        let vo = vo_from_observations(
            &obs,
            &rig.intrinsics,
            &VoParams::default(),
            &TemporalMatching::OracleId,
        )
        .unwrap();
        let cfg = SupervisionConfig::default();
        let verdicts = score_tracks(&vo, &rig, &cfg);
        let mut long_tracks = 0;
        for (t, v) in vo.tracks.iter().zip(&verdicts) {
            assert_ne!(v.verdict, Verdict::Bad, "track {} went bad", t.id);
            if t.len() >= cfg.l_min {
                long_tracks += 1;
                assert_eq!(v.verdict, Verdict::Good, "track {} not good", t.id);
            }
        }
        assert!(long_tracks >= 50, "only {long_tracks} long tracks");
    }

    #[test]
    fn dynamic_region_tracks_rarely_good() {
        let spec = SceneSpec::example(3, 128, 96);
        let rig = test_rig();
        let traj = sway_trajectory(6, 0.05);
        let ds = render_sequence(&spec, &traj, &rig).unwrap();
        let res =
            run_vo(&ds.frames, &ClassicalExtractor::default(), &rig, &VoParams::default()).unwrap();
        let verdicts = score_tracks(&res, &rig, &SupervisionConfig::default());
        let is_dynamic = |t: &Track| {
            let dyn_obs = t
                .observations
                .iter()
                .filter(|o| {
                    ds.gt_region_mask[o.frame]
                        .get(o.left.x.round() as usize, o.left.y.round() as usize)
                })
                .count();
            2 * dyn_obs > t.observations.len()
        };
        let mut dyn_total = 0usize;
        let mut dyn_not_good = 0usize;
        let mut good_total = 0usize;
        let mut good_static = 0usize;
        for (t, v) in res.tracks.iter().zip(&verdicts) {
            if is_dynamic(t) {
                dyn_total += 1;
                if v.verdict != Verdict::Good {
                    dyn_not_good += 1;
                }
            }
            if v.verdict == Verdict::Good {
                good_total += 1;
                if !is_dynamic(t) {
                    good_static += 1;
                }
            }
        }
        assert!(dyn_total >= 10, "only {dyn_total} dynamic tracks");
        assert!(good_total >= 30, "only {good_total} good tracks");
        assert!(
            dyn_not_good as f64 >= 0.95 * dyn_total as f64,
            "{dyn_not_good}/{dyn_total} dynamic tracks flagged"
        );
        assert!(
            good_static as f64 >= 0.95 * good_total as f64,
            "{good_static}/{good_total} good tracks are static"
        );
    }

    #[test]
    fn tightening_tau_never_turns_bad_good() {
        let rig = test_rig();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let intr = rig.intrinsics;
        // synthetic tracks with assorted noise levels under identity motion
        let mut tracks = Vec::new();
        for id in 0..40u64 {
            let n = rng.gen_range(1..6);
            let base = Vector2::new(rng.gen_range(20.0..100.0), rng.gen_range(20.0..70.0));
            let noise = rng.gen_range(0.0..3.0);
            let obs: Vec<TrackObservation> = (0..n)
                .map(|f| TrackObservation {
                    frame: f,
                    left: base
                        + Vector2::new(
                            rng.gen_range(-noise..noise + 1e-9),
                            rng.gen_range(-noise..noise + 1e-9),
                        ),
                    right: Some(base - Vector2::new(4.0, 0.0)),
                    depth: Some(intr.fx * 0.12 / 4.0),
                    descriptor: Vec::new(),
                })
                .collect();
            tracks.push(manual_track(id, obs));
        }
        let vo = VOResult {
            relative_poses: vec![PoseSE3::identity(); 5],
            tracks,
            inlier_counts: vec![0; 5],
            failures: vec![false; 5],
        };
        let loose = SupervisionConfig { tau_px: 1.5, ..Default::default() };
        let tight = SupervisionConfig { tau_px: 0.5, ..Default::default() };
        let vl = score_tracks(&vo, &rig, &loose);
        let vt = score_tracks(&vo, &rig, &tight);
        for (a, b) in vl.iter().zip(&vt) {
            if b.verdict == Verdict::Good {
                assert_eq!(a.verdict, Verdict::Good, "track {} appeared under tight tau", a.track_id);
            }
        }
    }

    #[test]
    fn label_grid_empty_and_offset_example() {
        let grid = build_label_grid(&[], 32, 24);
        assert!(grid.labels.iter().all(|&v| v == DUSTBIN_LABEL));
        let grid =
            build_label_grid(&[LabeledPixel { x: 9, y: 17, residual: 0.1 }], 32, 24);
        assert_eq!(grid.labels[(2, 1)], 9);
        assert_eq!(grid.decode(), vec![(9, 17)]);
    }

    #[test]
    fn label_grid_collision_keeps_smaller_residual() {
        let a = LabeledPixel { x: 2, y: 3, residual: 0.8 };
        let b = LabeledPixel { x: 5, y: 6, residual: 0.2 };
        let grid = build_label_grid(&[a, b], 16, 16);
        assert_eq!(grid.labels[(0, 0)], (6 % 8) * 8 + 5);
        let grid = build_label_grid(&[b, a], 16, 16);
        assert_eq!(grid.labels[(0, 0)], (6 % 8) * 8 + 5);
    }

    #[test]
    fn label_grid_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..30 {
            let mut kps: Vec<LabeledPixel> = (0..40)
                .map(|_| LabeledPixel {
                    x: rng.gen_range(0..64),
                    y: rng.gen_range(0..48),
                    residual: (rng.gen_range(0..5) as f64) * 0.25,
                })
                .collect();
            let a = build_label_grid(&kps, 64, 48);
            kps.shuffle(&mut rng);
            let b = build_label_grid(&kps, 64, 48);
            assert_eq!(a, b);
        }
    }

    fn checker_image(w: usize, h: usize) -> GrayImage {
        let mut img = GrayImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                img.set(x, y, (((x / 4 + y / 4) % 2) * 200 + 20) as u8);
            }
        }
        img
    }

    #[test]
    fn warped_pair_identity() {
        let img = checker_image(64, 48);
        let grid = build_label_grid(
            &[
                LabeledPixel { x: 9, y: 17, residual: 0.0 },
                LabeledPixel { x: 40, y: 30, residual: 0.0 },
            ],
            64,
            48,
        );
        let h = Homography::translation(0.0, 0.0);
        let (warped, grid2, valid) = make_warped_pair(&img, &grid, &h);
        assert_eq!(warped.as_bytes(), img.as_bytes());
        assert_eq!(grid2, grid);
        assert!(valid.iter().all(|&v| v));
    }

    #[test]
    fn warped_pair_cell_aligned_shift() {
        let img = checker_image(64, 48);
        let grid = build_label_grid(
            &[
                LabeledPixel { x: 9, y: 17, residual: 0.0 },
                LabeledPixel { x: 20, y: 21, residual: 0.0 },
            ],
            64,
            48,
        );
        let h = Homography::translation(8.0, 0.0);
        let (_, grid2, valid) = make_warped_pair(&img, &grid, &h);
        assert_eq!(grid2.labels[(2, 2)], grid.labels[(2, 1)]);
        assert_eq!(grid2.labels[(2, 3)], grid.labels[(2, 2)]);
        for r in 0..valid.nrows() {
            assert!(!valid[(r, 0)], "leftmost cell column cannot be valid");
            for c in 1..valid.ncols() {
                assert!(valid[(r, c)]);
            }
        }
    }

    #[test]
    fn warped_labels_round_trip_within_rounding() {
        let mut rng = ChaCha8Rng::seed_from_u64(91);
        let img = checker_image(96, 64);
        let cfg = HomographyConfig::new(96, 64);
        for seed in 0..20u64 {
            let kps: Vec<LabeledPixel> = (0..25)
                .map(|_| LabeledPixel {
                    x: rng.gen_range(0..96),
                    y: rng.gen_range(0..64),
                    residual: 0.0,
                })
                .collect();
            let grid = build_label_grid(&kps, 96, 64);
            let h = crate::geometry::sample_homography(&cfg, seed);
            let hinv = h.inverse().unwrap();
            let (_, grid2, _) = make_warped_pair(&img, &grid, &h);
            for (x, y) in grid2.decode() {
                let back = apply_homography(&hinv, &Vector2::new(x as f64, y as f64));
                let nearest = grid
                    .decode()
                    .iter()
                    .map(|&(ox, oy)| (back - Vector2::new(ox as f64, oy as f64)).norm())
                    .fold(f64::INFINITY, f64::min);
                assert!(nearest <= 1.0, "seed {seed}: round trip off by {nearest}");
            }
        }
    }

    #[test]
    fn correspondence_identity_pattern() {
        let h = Homography::translation(0.0, 0.0);
        let m = build_correspondence_matrix(&h, 64, 48, 8.0);
        let n = (64 / CELL) * (48 / CELL);
        for c in 0..n {
            assert!(m.valid[c]);
            assert_eq!(m.target_of(c), Some(c));
        }
    }

    #[test]
    fn correspondence_shift_pairs_right_neighbor() {
        let h = Homography::translation(8.0, 0.0);
        let m = build_correspondence_matrix(&h, 64, 48, 8.0);
        let wc = 64 / CELL;
        for r in 0..48 / CELL {
            for c in 0..wc {
                let idx = r * wc + c;
                if c + 1 < wc {
                    assert_eq!(m.target_of(idx), Some(idx + 1));
                } else {
                    assert!(!m.valid[idx], "mapped center left the image");
                    assert_eq!(m.target_of(idx), None);
                }
            }
        }
    }

    #[test]
    fn correspondence_matches_brute_force_and_rows_bounded() {
        let cfg = HomographyConfig::new(96, 64);
        for seed in 0..15u64 {
            let h = crate::geometry::sample_homography(&cfg, 1000 + seed);
            let eps = if seed % 3 == 0 { 3.0 } else { 8.0 };
            let m = build_correspondence_matrix(&h, 96, 64, eps);
            let (wc, hc) = (96 / CELL, 64 / CELL);
            let n = wc * hc;
            for c in 0..n {
                assert!(m.s.row(c).iter().map(|&v| v as usize).sum::<usize>() <= 1);
                let q = apply_homography(
                    &h,
                    &cell_center(c / wc, c % wc),
                );
                let in_bounds =
                    q.x >= 0.0 && q.y >= 0.0 && q.x <= 95.0 && q.y <= 63.0;
                assert_eq!(m.valid[c], in_bounds);
                // brute force: first argmin over all target cells
                let mut best: Option<(usize, f64)> = None;
                for t in 0..n {
                    let d = (q - cell_center(t / wc, t % wc)).norm();
                    if best.map_or(true, |(_, bd)| d < bd) {
                        best = Some((t, d));
                    }
                }
                let expect = match best {
                    Some((t, d)) if in_bounds && d <= eps => Some(t),
                    _ => None,
                };
                assert_eq!(m.target_of(c), expect, "seed {seed} cell {c}");
            }
        }
    }

    #[test]
    fn frame_targets_ignore_undecided_cells() {
        let rig = test_rig();
        let intr = rig.intrinsics;
        let mk = |id: u64, x: f64, n: usize, depth: Option<f64>| {
            manual_track(
                id,
                (0..n)
                    .map(|f| TrackObservation {
                        frame: f,
                        left: Vector2::new(x, 40.0),
                        right: depth.map(|d| Vector2::new(x - intr.fx * 0.12 / d, 40.0)),
                        depth,
                        descriptor: Vec::new(),
                    })
                    .collect(),
            )
        };
        let tracks = vec![mk(0, 20.0, 4, Some(4.0)), mk(1, 50.0, 2, None)];
        let vo = VOResult {
            relative_poses: vec![PoseSE3::identity(); 3],
            tracks: tracks.clone(),
            inlier_counts: vec![0; 3],
            failures: vec![false; 3],
        };
        let verdicts = score_tracks(&vo, &rig, &SupervisionConfig::default());
        assert_eq!(verdicts[0].verdict, Verdict::Good);
        assert_eq!(verdicts[1].verdict, Verdict::Undecided);
        let (grid, ignore) = build_frame_targets(&tracks, &verdicts, 0, 128, 96);
        assert_eq!(grid.labels[(5, 2)], (40 % 8 * 8 + 20 % 8) as u8);
        assert!(ignore[(5, 6)], "undecided keypoint cell must be ignored");
        assert!(!ignore[(5, 2)], "good keypoint cell stays supervised");
        assert_eq!(ignore.iter().filter(|&&b| b).count(), 1);
    }

    #[test]
    fn label_and_verdict_files_round_trip() {
        let dir = std::env::temp_dir().join("featrack_supervision");
        std::fs::create_dir_all(&dir).unwrap();
        let grid = build_label_grid(
            &[
                LabeledPixel { x: 9, y: 17, residual: 0.1 },
                LabeledPixel { x: 55, y: 3, residual: 0.2 },
            ],
            64,
            48,
        );
        let lp = dir.join("000000.csv");
        write_label_grid(&lp, &grid).unwrap();
        let back = read_label_grid(&lp, 64, 48).unwrap();
        assert_eq!(back, grid);

        let verdicts = vec![
            GoodFeatureVerdict {
                track_id: 0,
                verdict: Verdict::Good,
                mean_residual: Some(0.125),
                track_length: 5,
                stereo_consistent: true,
            },
            GoodFeatureVerdict {
                track_id: 3,
                verdict: Verdict::Undecided,
                mean_residual: None,
                track_length: 1,
                stereo_consistent: true,
            },
        ];
        let vp = dir.join("verdicts.csv");
        write_verdicts(&vp, &verdicts).unwrap();
        let back = read_verdicts(&vp).unwrap();
        assert_eq!(back, verdicts);
    }

    #[test]
    fn config_validation() {
        assert!(SupervisionConfig::default().validate().is_ok());
        assert!(SupervisionConfig { tau_px: 0.0, ..Default::default() }.validate().is_err());
        assert!(SupervisionConfig { l_min: 0, ..Default::default() }.validate().is_err());
        assert!(SupervisionConfig { eps_cell: -1.0, ..Default::default() }.validate().is_err());
    }
}
