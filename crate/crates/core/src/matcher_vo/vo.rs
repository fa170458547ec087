//! Frame-to-frame odometry over per-frame keypoint observations. The
//! observation layer is pluggable so the same estimator loop can run on real
//! detections (descriptor matching) or on exact landmark projections (id
//! matching), which isolates estimator error from matcher error in tests.

use nalgebra::{Vector2, Vector3};
use std::collections::BTreeMap;

use crate::features::FeatureExtractor;
use crate::geometry::{CameraIntrinsics, PoseSE3, StereoRig};
use crate::synthscene::{landmark_projections, StereoFrame, SyntheticDataset};

use super::pnp::{estimate_relative_pose, RansacConfig};
use super::{
    match_descriptor_sets, stereo_match, Match, MatchParams, Track, TrackObservation, VOResult,
    VoError,
};

#[derive(Debug, Clone, PartialEq)]
pub struct ObservedKeypoint {
    pub left: Vector2<f64>,
    pub right: Option<Vector2<f64>>,
    /// Depth in the left camera, meters; None when disparity was unusable.
    pub depth: Option<f64>,
    pub descriptor: Vec<f64>,
    /// Landmark identity, set only by the oracle observation source.
    pub oracle_id: Option<usize>,
}

#[derive(Debug, Clone, Default)]
pub struct FrameObservations {
    pub keypoints: Vec<ObservedKeypoint>,
}

#[derive(Debug, Clone, Copy)]
pub enum TemporalMatching {
    Descriptor(MatchParams),
    /// Pair keypoints with equal oracle ids.
    OracleId,
}

#[derive(Debug, Clone)]
pub struct VoParams {
    pub match_params: MatchParams,
    /// Epipolar row tolerance for stereo matching, px.
    pub stereo_band: f64,
    /// Disparity floor below which depth is left unknown, px.
    pub min_disparity: f64,
    pub ransac: RansacConfig,
}

impl Default for VoParams {
    fn default() -> Self {
        VoParams {
            match_params: MatchParams::default(),
            stereo_band: 1.0,
            min_disparity: 0.5,
            ransac: RansacConfig::default(),
        }
    }
}

/// Detect keypoints on both images of every frame, stereo-match them, and
/// attach triangulated depths to the left-image keypoints.
pub fn observations_from_extractor(
    frames: &[StereoFrame],
    extractor: &dyn FeatureExtractor,
    rig: &StereoRig,
    params: &VoParams,
) -> Vec<FrameObservations> {
    frames
        .iter()
        .map(|f| {
            let left = extractor.extract(&f.left);
            let right = extractor.extract(&f.right);
            let stereo = stereo_match(
                &left,
                &right,
                rig,
                params.stereo_band,
                params.min_disparity,
                &params.match_params,
            );
            let mut right_of: Vec<Option<(Vector2<f64>, Option<f64>)>> = vec![None; left.len()];
            for s in &stereo {
                let r = &right[s.m.idx_b];
                right_of[s.m.idx_a] = Some((Vector2::new(r.x as f64, r.y as f64), s.depth));
            }
            let keypoints = left
                .into_iter()
                .zip(right_of)
                .map(|(k, r)| ObservedKeypoint {
                    left: Vector2::new(k.x as f64, k.y as f64),
                    right: r.map(|(p, _)| p),
                    depth: r.and_then(|(_, d)| d),
                    descriptor: k.descriptor,
                    oracle_id: None,
                })
                .collect();
            FrameObservations { keypoints }
        })
        .collect()
}

/// Exact landmark projections with exact depths, carrying landmark ids for
/// identity-based temporal matching.
pub fn oracle_observations(ds: &SyntheticDataset, rig: &StereoRig) -> Vec<FrameObservations> {
    (0..ds.frames.len())
        .map(|f| FrameObservations {
            keypoints: landmark_projections(ds, rig, f)
                .into_iter()
                .map(|o| ObservedKeypoint {
                    left: o.left,
                    right: Some(o.right),
                    depth: Some(o.depth),
                    descriptor: Vec::new(),
                    oracle_id: Some(o.id),
                })
                .collect(),
        })
        .collect()
}

fn temporal_matches(
    a: &FrameObservations,
    b: &FrameObservations,
    mode: &TemporalMatching,
) -> Vec<Match> {
    match mode {
        TemporalMatching::Descriptor(params) => {
            let da: Vec<Vec<f64>> = a.keypoints.iter().map(|k| k.descriptor.clone()).collect();
            let db: Vec<Vec<f64>> = b.keypoints.iter().map(|k| k.descriptor.clone()).collect();
            match_descriptor_sets(&da, &db, params)
        }
        TemporalMatching::OracleId => {
            let by_id: BTreeMap<usize, usize> = b
                .keypoints
                .iter()
                .enumerate()
                .filter_map(|(j, k)| k.oracle_id.map(|id| (id, j)))
                .collect();
            a.keypoints
                .iter()
                .enumerate()
                .filter_map(|(i, k)| {
                    let id = k.oracle_id?;
                    by_id.get(&id).map(|&j| Match { idx_a: i, idx_b: j, similarity: 1.0 })
                })
                .collect()
        }
    }
}

/// Chains relative poses over consecutive frames. Each pair solves
/// perspective pose from the previous frame's triangulated points against
/// current-frame pixels; a pair without a usable solution records identity
/// and a failure flag. Tracks extend through every accepted temporal match,
/// inlier or not, so downstream supervision judges the geometry itself.
pub fn vo_from_observations(
    observations: &[FrameObservations],
    intr: &CameraIntrinsics,
    params: &VoParams,
    temporal: &TemporalMatching,
) -> Result<VOResult, VoError> {
    let n = observations.len();
    if n < 2 {
        return Err(VoError::TooFewFrames(n));
    }
    let mut tracks: Vec<Track> = Vec::new();
    let open_track = |tracks: &mut Vec<Track>| -> u64 {
        let id = tracks.len() as u64;
        tracks.push(Track { id, observations: Vec::new() });
        id
    };

    let mut prev_tids: Vec<u64> = Vec::with_capacity(observations[0].keypoints.len());
    for _ in &observations[0].keypoints {
        prev_tids.push(open_track(&mut tracks));
    }
    record_frame(&mut tracks, &prev_tids, &observations[0], 0);

    let mut relative_poses = Vec::with_capacity(n - 1);
    let mut inlier_counts = Vec::with_capacity(n - 1);
    let mut failures = Vec::with_capacity(n - 1);
    for t in 1..n {
        let (prev, cur) = (&observations[t - 1], &observations[t]);
        let matches = temporal_matches(prev, cur, temporal);

        let data: Vec<(Vector3<f64>, Vector2<f64>)> = matches
            .iter()
            .filter_map(|m| {
                let depth = prev.keypoints[m.idx_a].depth?;
                let point = intr.unproject(&prev.keypoints[m.idx_a].left, depth).ok()?;
                Some((point, cur.keypoints[m.idx_b].left))
            })
            .collect();
        let cfg = RansacConfig {
            seed: params.ransac.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
            ..params.ransac
        };
        match estimate_relative_pose(&data, intr, &cfg) {
            Ok((pose, mask)) => {
                relative_poses.push(pose);
                inlier_counts.push(mask.iter().filter(|&&b| b).count());
                failures.push(false);
            }
            Err(_) => {
                relative_poses.push(PoseSE3::identity());
                inlier_counts.push(0);
                failures.push(true);
            }
        }

        let mut cur_tids: Vec<Option<u64>> = vec![None; cur.keypoints.len()];
        for m in &matches {
            if cur_tids[m.idx_b].is_none() {
                cur_tids[m.idx_b] = Some(prev_tids[m.idx_a]);
            }
        }
        let cur_tids: Vec<u64> = cur_tids
            .into_iter()
            .map(|tid| tid.unwrap_or_else(|| open_track(&mut tracks)))
            .collect();
        record_frame(&mut tracks, &cur_tids, cur, t);
        prev_tids = cur_tids;
    }

    Ok(VOResult { relative_poses, tracks, inlier_counts, failures })
}

fn record_frame(tracks: &mut [Track], tids: &[u64], obs: &FrameObservations, frame: usize) {
    for (tid, k) in tids.iter().zip(&obs.keypoints) {
        tracks[*tid as usize].observations.push(TrackObservation {
            frame,
            left: k.left,
            right: k.right,
            depth: k.depth,
            descriptor: k.descriptor.clone(),
        });
    }
}

/// Full real-feature odometry over a rendered stereo sequence.
pub fn run_vo(
    frames: &[StereoFrame],
    extractor: &dyn FeatureExtractor,
    rig: &StereoRig,
    params: &VoParams,
) -> Result<VOResult, VoError> {
    let obs = observations_from_extractor(frames, extractor, rig, params);
    vo_from_observations(
        &obs,
        &rig.intrinsics,
        params,
        &TemporalMatching::Descriptor(params.match_params),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::ClassicalExtractor;
    use crate::synthscene::{example_rig, render_sequence, sway_trajectory, SceneSpec, TexturedRect};

    fn small_dataset(n: usize, step: f64) -> (SyntheticDataset, StereoRig) {
        let spec = SceneSpec::example(7, 128, 96);
        let rig = example_rig(128, 96);
        let traj = sway_trajectory(n, step);
        (render_sequence(&spec, &traj, &rig).unwrap(), rig)
    }

    #[test]
    fn static_camera_gives_identity_poses() {
        let mut spec = SceneSpec::example(11, 128, 96);
        // fully static world: park the dynamic region out of sight behind
        // the back wall
        spec.dynamic_region.center = Vector3::new(0.9, 1.29, 40.0);
        let rig = example_rig(128, 96);
        let traj = vec![PoseSE3::identity(); 3];
        let ds = render_sequence(&spec, &traj, &rig).unwrap();
        let res =
            run_vo(&ds.frames, &ClassicalExtractor::default(), &rig, &VoParams::default()).unwrap();
        assert_eq!(res.relative_poses.len(), 2);
        assert_eq!(res.failure_count(), 0);
        for p in &res.relative_poses {
            let (dr, dt) = PoseSE3::difference(&PoseSE3::identity(), p);
            assert!(dr.to_degrees() < 0.01, "rotation {} deg", dr.to_degrees());
            assert!(dt < 1e-3, "translation {dt} m");
        }
    }

    #[test]
    fn oracle_vo_recovers_trajectory_exactly() {
        let (ds, rig) = small_dataset(6, 0.05);
        let obs = oracle_observations(&ds, &rig);
        assert!(obs.iter().all(|f| f.keypoints.len() >= 20));
        let res = vo_from_observations(
            &obs,
            &rig.intrinsics,
            &VoParams::default(),
            &TemporalMatching::OracleId,
        )
        .unwrap();
        assert_eq!(res.failure_count(), 0);
        let traj = res.absolute_trajectory(&ds.gt_poses[0]);
        for (est, gt) in traj.iter().zip(&ds.gt_poses) {
            let (dr, dt) = PoseSE3::difference(est, gt);
            assert!(dr < 1e-7, "rotation error {dr}");
            assert!(dt < 1e-7, "translation error {dt}");
        }
    }

    #[test]
    fn oracle_tracks_are_subpixel_exact() {
        let (ds, rig) = small_dataset(4, 0.04);
        let obs = oracle_observations(&ds, &rig);
        let res = vo_from_observations(
            &obs,
            &rig.intrinsics,
            &VoParams::default(),
            &TemporalMatching::OracleId,
        )
        .unwrap();
        // every track observation must coincide with some exact projection
        for (f, frame_obs) in obs.iter().enumerate() {
            let mut seen = 0usize;
            for t in &res.tracks {
                for o in t.observations.iter().filter(|o| o.frame == f) {
                    seen += 1;
                    assert!(frame_obs
                        .keypoints
                        .iter()
                        .any(|k| (k.left - o.left).norm() < 1e-12));
                }
            }
            assert_eq!(seen, frame_obs.keypoints.len());
        }
    }

    #[test]
    fn track_frames_strictly_increase_and_partition_keypoints() {
        let (ds, rig) = small_dataset(4, 0.05);
        let res =
            run_vo(&ds.frames, &ClassicalExtractor::default(), &rig, &VoParams::default()).unwrap();
        let mut per_frame_counts = vec![0usize; ds.frames.len()];
        for t in &res.tracks {
            assert!(!t.observations.is_empty());
            for w in t.observations.windows(2) {
                assert!(w[0].frame < w[1].frame);
            }
            for o in &t.observations {
                per_frame_counts[o.frame] += 1;
            }
        }
        let extractor = ClassicalExtractor::default();
        for (f, frame) in ds.frames.iter().enumerate() {
            assert_eq!(per_frame_counts[f], extractor.extract(&frame.left).len());
        }
    }

    /// Fronto-parallel wall placed so ground-truth disparity is exactly 4 px:
    /// integer keypoints then triangulate to millimeter-exact depth.
    #[test]
    fn stereo_depth_integer_disparity_scene() {
        let wall = TexturedRect {
            center: Vector3::new(0.0, 0.0, 6.0),
            axis_u: Vector3::new(8.0, 0.0, 0.0),
            axis_v: Vector3::new(0.0, 6.0, 0.0),
            richness: 0.9,
        };
        let hidden = TexturedRect {
            center: Vector3::new(0.0, 0.0, 40.0),
            axis_u: Vector3::new(1.0, 0.0, 0.0),
            axis_v: Vector3::new(0.0, 1.0, 0.0),
            richness: 0.1,
        };
        let spec = SceneSpec {
            seed: 21,
            width: 160,
            height: 120,
            static_planes: vec![wall],
            dynamic_region: hidden,
            landmark_count: 90,
            brightness: 1.0,
        };
        let rig = StereoRig {
            intrinsics: CameraIntrinsics {
                fx: 200.0,
                fy: 200.0,
                cx: 79.5,
                cy: 59.5,
                width: 160,
                height: 120,
            },
            baseline: 0.12,
        };
        let ds = render_sequence(&spec, &[PoseSE3::identity()], &rig).unwrap();
        let extractor = ClassicalExtractor::default();
        let left = extractor.extract(&ds.frames[0].left);
        let right = extractor.extract(&ds.frames[0].right);
        assert!(left.len() >= 30, "only {} keypoints", left.len());
        let params = VoParams::default();
        let matches = stereo_match(
            &left,
            &right,
            &rig,
            params.stereo_band,
            params.min_disparity,
            &params.match_params,
        );
        assert!(matches.len() >= 25, "only {} stereo matches", matches.len());
        let good = matches
            .iter()
            .filter(|s| s.depth.map_or(false, |d| (d - 6.0).abs() < 1e-3))
            .count();
        assert!(
            good as f64 >= 0.95 * matches.len() as f64,
            "{good}/{} within a millimeter",
            matches.len()
        );
    }
}
