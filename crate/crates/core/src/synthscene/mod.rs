//! Deterministic synthetic stereo sequences with exact ground truth. A scene
//! is a handful of textured rectangles; one rectangle ("the pond") resamples
//! its texture every frame to mimic water, reflections, and other surfaces
//! that defeat geometric consistency. Rendering is per-pixel ray casting, so
//! depth ground truth is exact and every test oracle can re-trace rays.

mod io;
mod texture;

pub use io::{load_dataset, read_scene_cfg, save_dataset, write_scene_cfg};
pub use texture::{hash64, hash_unit};

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{PoseSE3, StereoRig};
use crate::image::{DepthMap, GrayImage, RegionMask};
use texture::{value_noise, Blob, BlobField};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene invalid: {0}")]
    Invalid(String),
    #[error("camera center lies on plane {plane} at frame {frame}")]
    CameraOnPlane { frame: usize, plane: usize },
    #[error("scene config malformed: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Image(#[from] crate::image::ImageError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Finite textured rectangle: center plus two orthogonal half-extent vectors.
/// Points on the surface are center + a*û + b*v̂ with (a, b) in meters,
/// |a| <= |axis_u|, |b| <= |axis_v|.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedRect {
    pub center: Vector3<f64>,
    pub axis_u: Vector3<f64>,
    pub axis_v: Vector3<f64>,
    /// In [0, 1]; scales how many landmark blobs this surface receives.
    pub richness: f64,
}

impl TexturedRect {
    pub fn normal(&self) -> Vector3<f64> {
        self.axis_u.cross(&self.axis_v).normalize()
    }

    pub fn area(&self) -> f64 {
        4.0 * self.axis_u.norm() * self.axis_v.norm()
    }

    /// Ray-rectangle intersection. Returns (t, a, b): distance along `dir`
    /// and metric local coordinates of the hit. `dir` need not be unit; with
    /// camera rays of z = 1 in camera coordinates, t equals the depth.
    pub fn intersect(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let n = self.normal();
        let denom = n.dot(dir);
        if denom.abs() < 1e-12 {
            return None;
        }
        let t = n.dot(&(self.center - origin)) / denom;
        if t <= 1e-9 {
            return None;
        }
        let p = origin + dir * t - self.center;
        let eu = self.axis_u.norm();
        let ev = self.axis_v.norm();
        let a = p.dot(&self.axis_u) / eu;
        let b = p.dot(&self.axis_v) / ev;
        if a.abs() <= eu && b.abs() <= ev {
            Some((t, a, b))
        } else {
            None
        }
    }

    /// Signed distance of a point to the rectangle's supporting plane.
    fn plane_distance(&self, p: &Vector3<f64>) -> f64 {
        self.normal().dot(&(p - self.center))
    }

    fn within_bounds(&self, p: &Vector3<f64>) -> bool {
        let d = p - self.center;
        d.dot(&self.axis_u).abs() / self.axis_u.norm() <= self.axis_u.norm()
            && d.dot(&self.axis_v).abs() / self.axis_v.norm() <= self.axis_v.norm()
    }
}

/// Full description of a renderable scene; everything downstream (textures,
/// landmarks, the pond) derives deterministically from these fields.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub static_planes: Vec<TexturedRect>,
    pub dynamic_region: TexturedRect,
    pub landmark_count: usize,
    pub brightness: f64,
}

/// A high-contrast blob on a static plane; doubles as the identity oracle
/// for correspondence tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub plane: usize,
    /// Metric in-plane offsets from the plane center.
    pub local: (f64, f64),
    pub world: Vector3<f64>,
}

impl SceneSpec {
    /// Room-like scene: back wall, two side walls, floor, and a dynamic
    /// "pond" rectangle floating just above the floor in the lower right.
    /// The camera path is expected to start near the origin looking +z.
    pub fn example(seed: u64, width: usize, height: usize) -> SceneSpec {
        let static_planes = vec![
            // back wall, facing the camera
            TexturedRect {
                center: Vector3::new(0.0, 0.0, 6.5),
                axis_u: Vector3::new(4.0, 0.0, 0.0),
                axis_v: Vector3::new(0.0, 3.0, 0.0),
                richness: 0.9,
            },
            // left wall
            TexturedRect {
                center: Vector3::new(-2.6, 0.0, 3.5),
                axis_u: Vector3::new(0.0, 0.0, 3.2),
                axis_v: Vector3::new(0.0, 2.6, 0.0),
                richness: 0.7,
            },
            // right wall
            TexturedRect {
                center: Vector3::new(2.6, 0.0, 3.5),
                axis_u: Vector3::new(0.0, 0.0, 3.2),
                axis_v: Vector3::new(0.0, 2.6, 0.0),
                richness: 0.5,
            },
            // floor (+y is down in camera coordinates)
            TexturedRect {
                center: Vector3::new(0.0, 1.3, 3.5),
                axis_u: Vector3::new(2.6, 0.0, 0.0),
                axis_v: Vector3::new(0.0, 0.0, 3.2),
                richness: 0.6,
            },
        ];
        // Pond sits 1 cm above the floor so it occludes it cleanly.
        let dynamic_region = TexturedRect {
            center: Vector3::new(0.9, 1.29, 3.6),
            axis_u: Vector3::new(1.0, 0.0, 0.0),
            axis_v: Vector3::new(0.0, 0.0, 1.4),
            richness: 0.8,
        };
        SceneSpec {
            seed,
            width,
            height,
            static_planes,
            dynamic_region,
            landmark_count: 140,
            brightness: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.landmark_count == 0 {
            return Err(SceneError::Invalid("landmark_count must be > 0".into()));
        }
        if self.width % 8 != 0 || self.height % 8 != 0 {
            return Err(SceneError::Invalid(format!(
                "image size {}x{} not divisible by 8",
                self.width, self.height
            )));
        }
        if self.static_planes.is_empty() {
            return Err(SceneError::Invalid("need at least one static plane".into()));
        }
        for (i, r) in self.all_rects().enumerate() {
            if r.axis_u.norm() < 1e-9 || r.axis_v.norm() < 1e-9 {
                return Err(SceneError::Invalid(format!("plane {i} has a degenerate axis")));
            }
            let cosang = r.axis_u.dot(&r.axis_v) / (r.axis_u.norm() * r.axis_v.norm());
            if cosang.abs() > 1e-9 {
                return Err(SceneError::Invalid(format!("plane {i} axes not orthogonal")));
            }
            if !(0.0..=1.0).contains(&r.richness) {
                return Err(SceneError::Invalid(format!("plane {i} richness outside [0,1]")));
            }
        }
        if !(self.brightness > 0.0) {
            return Err(SceneError::Invalid("brightness must be positive".into()));
        }
        Ok(())
    }

    fn all_rects(&self) -> impl Iterator<Item = &TexturedRect> {
        self.static_planes.iter().chain(std::iter::once(&self.dynamic_region))
    }

    /// Landmark blobs distributed over static planes, count proportional to
    /// richness * area (largest-remainder rounding keeps the total exact).
    pub fn landmarks(&self) -> Vec<Landmark> {
        let weights: Vec<f64> = self.static_planes.iter().map(|r| r.richness * r.area()).collect();
        let total_w: f64 = weights.iter().sum();
        let mut counts: Vec<usize> = Vec::with_capacity(weights.len());
        let mut remainders: Vec<(usize, f64)> = Vec::new();
        let mut assigned = 0usize;
        for (i, w) in weights.iter().enumerate() {
            let exact = self.landmark_count as f64 * w / total_w;
            let floor = exact.floor() as usize;
            counts.push(floor);
            assigned += floor;
            remainders.push((i, exact - floor as f64));
        }
        remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        for k in 0..(self.landmark_count - assigned) {
            counts[remainders[k % remainders.len()].0] += 1;
        }

        let mut out = Vec::with_capacity(self.landmark_count);
        for (plane, (rect, n)) in self.static_planes.iter().zip(&counts).enumerate() {
            let eu = rect.axis_u.norm();
            let ev = rect.axis_v.norm();
            for k in 0..*n {
                // keep blobs off the rim so their support stays on the surface
                let key = hash64(self.seed ^ 0x4C414E44 ^ ((plane as u64) << 32) ^ k as u64);
                let a = (hash_unit(key) * 2.0 - 1.0) * 0.9 * eu;
                let b = (hash_unit(key ^ 1) * 2.0 - 1.0) * 0.9 * ev;
                let world = rect.center + rect.axis_u / eu * a + rect.axis_v / ev * b;
                out.push(Landmark { plane, local: (a, b), world });
            }
        }
        out
    }

    /// Blob set rendered onto one static plane (all its landmarks).
    fn blob_field(&self, plane: usize) -> BlobField {
        let blobs: Vec<Blob> = self
            .landmarks()
            .into_iter()
            .filter(|l| l.plane == plane)
            .enumerate()
            .map(|(k, l)| {
                let key = hash64(self.seed ^ 0xB10B ^ ((plane as u64) << 40) ^ k as u64);
                let sigma = 0.035 + 0.045 * hash_unit(key);
                let sign = if hash64(key ^ 2) & 1 == 0 { 1.0 } else { -1.0 };
                let amplitude = sign * (0.55 + 0.3 * hash_unit(key ^ 3));
                Blob { x: l.local.0, y: l.local.1, sigma, amplitude }
            })
            .collect();
        BlobField::new(blobs)
    }

    /// Per-frame sparkle blobs on the dynamic region; resampled every frame.
    fn dynamic_blobs(&self, frame: usize) -> BlobField {
        let eu = self.dynamic_region.axis_u.norm();
        let ev = self.dynamic_region.axis_v.norm();
        let n = ((self.dynamic_region.area() * 12.0).round() as usize).max(8);
        let blobs: Vec<Blob> = (0..n)
            .map(|k| {
                let key = hash64(self.seed ^ 0xD1AC ^ ((frame as u64) << 24) ^ k as u64);
                Blob {
                    x: (hash_unit(key) * 2.0 - 1.0) * 0.92 * eu,
                    y: (hash_unit(key ^ 1) * 2.0 - 1.0) * 0.92 * ev,
                    sigma: 0.02 + 0.03 * hash_unit(key ^ 2),
                    amplitude: if hash64(key ^ 3) & 1 == 0 { 0.9 } else { -0.9 },
                }
            })
            .collect();
        BlobField::new(blobs)
    }
}

/// Canonical rig for synthetic datasets: the field of view is fixed (focal
/// length scales with image height), so the same scene framing holds at any
/// resolution. Baseline 0.12 m.
pub fn example_rig(width: usize, height: usize) -> StereoRig {
    StereoRig {
        intrinsics: crate::geometry::CameraIntrinsics {
            fx: height as f64 * (200.0 / 192.0),
            fy: height as f64 * (200.0 / 192.0),
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        },
        baseline: 0.12,
    }
}

/// One rectified stereo pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StereoFrame {
    pub left: GrayImage,
    pub right: GrayImage,
}

/// Rendered sequence plus every ground-truth channel needed by the oracles.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub spec: SceneSpec,
    pub frames: Vec<StereoFrame>,
    /// Left-camera pose per frame, camera-to-world.
    pub gt_poses: Vec<PoseSE3>,
    pub gt_depth: Vec<DepthMap>,
    pub gt_region_mask: Vec<RegionMask>,
    pub landmarks: Vec<Landmark>,
}

/// Which surface a ray hit first.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Hit {
    Static { plane: usize, t: f64, a: f64, b: f64 },
    Dynamic { t: f64, a: f64, b: f64 },
}

impl Hit {
    fn t(&self) -> f64 {
        match *self {
            Hit::Static { t, .. } | Hit::Dynamic { t, .. } => t,
        }
    }
}

fn trace(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, rect) in spec.static_planes.iter().enumerate() {
        if let Some((t, a, b)) = rect.intersect(origin, dir) {
            if best.as_ref().map_or(true, |h| t < h.t()) {
                best = Some(Hit::Static { plane: i, t, a, b });
            }
        }
    }
    if let Some((t, a, b)) = spec.dynamic_region.intersect(origin, dir) {
        if best.as_ref().map_or(true, |h| t < h.t()) {
            best = Some(Hit::Dynamic { t, a, b });
        }
    }
    best
}

/// Depth along the pixel ray of the nearest surface, by analytic
/// intersection. The camera ray has unit z in camera coordinates, so the
/// returned t is the pinhole depth.
pub fn trace_depth(spec: &SceneSpec, rig: &StereoRig, pose: &PoseSE3, pix: &Vector2<f64>) -> Option<f64> {
    let intr = &rig.intrinsics;
    let dir_cam = Vector3::new((pix.x - intr.cx) / intr.fx, (pix.y - intr.cy) / intr.fy, 1.0);
    let dir_world = pose.rotation * dir_cam;
    trace(spec, &pose.translation, &dir_world).map(|h| h.t())
}

/// True when the nearest surface under the pixel ray is the dynamic region.
pub fn hits_dynamic(spec: &SceneSpec, rig: &StereoRig, pose: &PoseSE3, pix: &Vector2<f64>) -> bool {
    let intr = &rig.intrinsics;
    let dir_cam = Vector3::new((pix.x - intr.cx) / intr.fx, (pix.y - intr.cy) / intr.fy, 1.0);
    let dir_world = pose.rotation * dir_cam;
    matches!(trace(spec, &pose.translation, &dir_world), Some(Hit::Dynamic { .. }))
}

fn shade(
    spec: &SceneSpec,
    statics: &[BlobField],
    dynamic: &BlobField,
    frame: usize,
    hit: &Hit,
) -> u8 {
    let v = match *hit {
        Hit::Static { plane, a, b, .. } => {
            let key = hash64(spec.seed ^ 0x7E47 ^ plane as u64);
            0.5 + 0.5 * value_noise(key, a, b, 3.0) + statics[plane].eval(a, b)
        }
        Hit::Dynamic { a, b, .. } => {
            let key = hash64(spec.seed ^ 0xD1AC0FF ^ (frame as u64).wrapping_mul(0x517CC1B727220A95));
            0.5 + 0.5 * value_noise(key, a, b, 6.0) + dynamic.eval(a, b)
        }
    };
    (v * spec.brightness * 255.0).round().clamp(0.0, 255.0) as u8
}

fn render_view(
    spec: &SceneSpec,
    statics: &[BlobField],
    dynamic: &BlobField,
    frame: usize,
    rig: &StereoRig,
    pose: &PoseSE3,
) -> (GrayImage, DepthMap, RegionMask) {
    let (w, h) = (spec.width, spec.height);
    let intr = &rig.intrinsics;
    let mut img = GrayImage::new(w, h);
    let mut depth = DepthMap::new(w, h);
    let mut mask = RegionMask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let dir_cam =
                Vector3::new((x as f64 - intr.cx) / intr.fx, (y as f64 - intr.cy) / intr.fy, 1.0);
            let dir_world = pose.rotation * dir_cam;
            if let Some(hit) = trace(spec, &pose.translation, &dir_world) {
                img.set(x, y, shade(spec, statics, dynamic, frame, &hit));
                depth.set(x, y, hit.t());
                if matches!(hit, Hit::Dynamic { .. }) {
                    mask.set(x, y, true);
                }
            }
        }
    }
    (img, depth, mask)
}

/// Renders the stereo sequence along a trajectory of left-camera poses.
/// Deterministic in (spec, trajectory, rig); fails if any camera center sits
/// on a scene surface.
pub fn render_sequence(
    spec: &SceneSpec,
    trajectory: &[PoseSE3],
    rig: &StereoRig,
) -> Result<SyntheticDataset, SceneError> {
    spec.validate()?;
    if trajectory.is_empty() {
        return Err(SceneError::Invalid("trajectory is empty".into()));
    }
    for (f, pose) in trajectory.iter().enumerate() {
        for cam in 0..2 {
            let center = if cam == 0 {
                pose.translation
            } else {
                pose.transform(&Vector3::new(rig.baseline, 0.0, 0.0))
            };
            for (i, rect) in spec.all_rects().enumerate() {
                if rect.plane_distance(&center).abs() < 1e-2 && rect.within_bounds(&center) {
                    return Err(SceneError::CameraOnPlane { frame: f, plane: i });
                }
            }
        }
    }

    let statics: Vec<BlobField> =
        (0..spec.static_planes.len()).map(|i| spec.blob_field(i)).collect();
    let mut frames = Vec::with_capacity(trajectory.len());
    let mut gt_depth = Vec::with_capacity(trajectory.len());
    let mut gt_region_mask = Vec::with_capacity(trajectory.len());
    for (f, pose) in trajectory.iter().enumerate() {
        let dynamic = spec.dynamic_blobs(f);
        let (left, depth, mask) = render_view(spec, &statics, &dynamic, f, rig, pose);
        let right_pose =
            PoseSE3::new(pose.rotation, pose.transform(&Vector3::new(rig.baseline, 0.0, 0.0)));
        let (right, _, _) = render_view(spec, &statics, &dynamic, f, rig, &right_pose);
        frames.push(StereoFrame { left, right });
        gt_depth.push(depth);
        gt_region_mask.push(mask);
    }
    let landmarks = spec.landmarks();
    Ok(SyntheticDataset {
        spec: spec.clone(),
        frames,
        gt_poses: trajectory.to_vec(),
        gt_depth,
        gt_region_mask,
        landmarks,
    })
}

/// Ground-truth correspondence between left images: unproject `pix` in frame
/// i by analytic depth, transform through the ground-truth poses, reproject
/// into frame j. None when the source has no surface or is dynamic, the
/// target leaves the view, or the point is occluded in frame j (surface more
/// than 1 cm in front of it).
pub fn gt_correspondence(
    ds: &SyntheticDataset,
    frame_i: usize,
    pix: &Vector2<f64>,
    frame_j: usize,
    rig: &StereoRig,
) -> Option<Vector2<f64>> {
    let intr = &rig.intrinsics;
    if !intr.contains(pix) {
        return None;
    }
    let pose_i = &ds.gt_poses[frame_i];
    if hits_dynamic(&ds.spec, rig, pose_i, pix) {
        return None;
    }
    let depth = trace_depth(&ds.spec, rig, pose_i, pix)?;
    let p_cam_i = intr.unproject(pix, depth).ok()?;
    let world = pose_i.transform(&p_cam_i);
    if frame_i == frame_j {
        return Some(*pix);
    }
    let pose_j = &ds.gt_poses[frame_j];
    let p_cam_j = pose_j.inverse().transform(&world);
    let proj = intr.project(&p_cam_j).ok()?;
    if !intr.contains(&proj) {
        return None;
    }
    let depth_j = trace_depth(&ds.spec, rig, pose_j, &proj)?;
    // Surface identity: the nearest surface under the target pixel must be
    // the transformed point itself. A plain 1 cm occlusion margin leaves an
    // ambiguity band at grazing surface junctions where the forward and
    // reverse queries resolve to different surfaces, so the tolerance here is
    // a strict 1e-6 m; anything nearer counts as occluded.
    if (depth_j - p_cam_j.z).abs() > 1e-6 {
        return None;
    }
    Some(proj)
}

/// Projection of one landmark into one frame's stereo pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LandmarkObservation {
    pub id: usize,
    pub left: Vector2<f64>,
    pub right: Vector2<f64>,
    /// Depth in the left camera, meters.
    pub depth: f64,
}

/// Landmarks visible (in view and unoccluded in both cameras) at a frame,
/// with exact subpixel projections. Oracle input for the matcher-free
/// visual-odometry and labeling tests.
pub fn landmark_projections(ds: &SyntheticDataset, rig: &StereoRig, frame: usize) -> Vec<LandmarkObservation> {
    let intr = &rig.intrinsics;
    let pose = &ds.gt_poses[frame];
    let right_pose = PoseSE3::new(pose.rotation, pose.transform(&Vector3::new(rig.baseline, 0.0, 0.0)));
    let mut out = Vec::new();
    for (id, lm) in ds.landmarks.iter().enumerate() {
        let p_left = pose.inverse().transform(&lm.world);
        if p_left.z <= 0.05 {
            continue;
        }
        let (Ok(left), Ok(right)) = (intr.project(&p_left), rig.project_right(&p_left)) else {
            continue;
        };
        if !intr.contains(&left) || !intr.contains(&right) {
            continue;
        }
        let visible = |view_pose: &PoseSE3, pix: &Vector2<f64>, z: f64| {
            trace_depth(&ds.spec, rig, view_pose, pix).is_some_and(|t| (t - z).abs() <= 1e-6)
        };
        let p_right_z = p_left.z;
        if visible(pose, &left, p_left.z) && visible(&right_pose, &right, p_right_z) {
            out.push(LandmarkObservation { id, left, right, depth: p_left.z });
        }
    }
    out
}

/// Forward walk along +z with gentle lateral sway and yaw so that rotation
/// and translation are both exercised. Step in meters per frame.
pub fn sway_trajectory(n: usize, step: f64) -> Vec<PoseSE3> {
    use nalgebra::Rotation3;
    (0..n)
        .map(|i| {
            let fi = i as f64;
            let x = 0.05 * (0.25 * fi).sin();
            let yaw = 0.02 * (0.18 * fi).sin();
            PoseSE3::new(
                Rotation3::from_axis_angle(&Vector3::y_axis(), yaw),
                Vector3::new(x, 0.0, step * fi),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_rig(width: usize, height: usize) -> StereoRig {
        example_rig(width, height)
    }

    #[test]
    fn same_seed_bit_identical() {
        let spec = SceneSpec::example(5, 64, 48);
        let rig = test_rig(64, 48);
        let traj = sway_trajectory(3, 0.1);
        let a = render_sequence(&spec, &traj, &rig).unwrap();
        let b = render_sequence(&spec, &traj, &rig).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.left, fb.left);
            assert_eq!(fa.right, fb.right);
        }
        assert_eq!(a.gt_depth[0], b.gt_depth[0]);
    }

    #[test]
    fn static_world_static_camera_differs_only_in_pond() {
        let spec = SceneSpec::example(9, 96, 64);
        let rig = test_rig(96, 64);
        let traj = vec![PoseSE3::identity(), PoseSE3::identity()];
        let ds = render_sequence(&spec, &traj, &rig).unwrap();
        let mut dynamic_diffs = 0usize;
        for y in 0..64 {
            for x in 0..96 {
                let d = ds.frames[0].left.get(x, y) != ds.frames[1].left.get(x, y);
                if ds.gt_region_mask[0].get(x, y) {
                    dynamic_diffs += d as usize;
                } else {
                    assert!(!d, "static pixel ({x},{y}) changed between identical poses");
                }
            }
        }
        assert!(dynamic_diffs > 20, "pond barely changed: {dynamic_diffs} px");
    }

    #[test]
    fn forward_motion_disparity_example() {
        // Landmark pinned at 5 m depth in camera frame: disparity must equal
        // fx * baseline / z = 200 * 0.12 / 5 = 4.8 px.
        let rig = test_rig(256, 192);
        let world = Vector3::new(0.3, -0.2, 7.0);
        let traj = (0..21)
            .map(|i| PoseSE3::new(nalgebra::Rotation3::identity(), Vector3::new(0.0, 0.0, 0.1 * i as f64)))
            .collect::<Vec<_>>();
        // frame 20: camera z = 2.0, depth = 5.0
        let p_cam = traj[20].inverse().transform(&world);
        assert!((p_cam.z - 5.0).abs() < 1e-12);
        let left = rig.intrinsics.project(&p_cam).unwrap();
        let right = rig.project_right(&p_cam).unwrap();
        assert!((left.x - right.x - 4.8).abs() < 1e-9);
        assert!((left.y - right.y).abs() < 1e-12);
    }

    #[test]
    fn correspondence_identity_and_dynamic() {
        let spec = SceneSpec::example(3, 96, 64);
        let rig = test_rig(96, 64);
        let ds = render_sequence(&spec, &sway_trajectory(4, 0.1), &rig).unwrap();
        // identity
        let pix = Vector2::new(48.0, 20.0);
        assert_eq!(gt_correspondence(&ds, 1, &pix, 1, &rig), Some(pix));
        // a pixel on the pond returns none
        let mut pond_pix = None;
        'outer: for y in 0..64 {
            for x in 0..96 {
                if ds.gt_region_mask[0].get(x, y) {
                    pond_pix = Some(Vector2::new(x as f64, y as f64));
                    break 'outer;
                }
            }
        }
        let pond_pix = pond_pix.expect("pond not visible in test scene");
        assert_eq!(gt_correspondence(&ds, 0, &pond_pix, 1, &rig), None);
    }

    #[test]
    fn correspondence_round_trip() {
        let spec = SceneSpec::example(17, 96, 64);
        let rig = test_rig(96, 64);
        let ds = render_sequence(&spec, &sway_trajectory(3, 0.12), &rig).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut checked = 0;
        while checked < 1000 {
            let pix = Vector2::new(rng.gen::<f64>() * 95.0, rng.gen::<f64>() * 63.0);
            let Some(fwd) = gt_correspondence(&ds, 0, &pix, 1, &rig) else { continue };
            let Some(back) = gt_correspondence(&ds, 1, &fwd, 0, &rig) else { continue };
            let err = (back - pix).norm();
            assert!(err < 1e-6, "round trip error {err} at {pix:?}");
            checked += 1;
        }
    }

    #[test]
    fn dynamic_region_decorrelates_static_does_not() {
        let spec = SceneSpec::example(23, 128, 96);
        let rig = test_rig(128, 96);
        let traj = vec![PoseSE3::identity(); 6];
        let ds = render_sequence(&spec, &traj, &rig).unwrap();

        let ncc = |a: &GrayImage, b: &GrayImage, select: &dyn Fn(usize, usize) -> bool| -> f64 {
            let mut va = Vec::new();
            let mut vb = Vec::new();
            for y in 0..96 {
                for x in 0..128 {
                    if select(x, y) {
                        va.push(a.get(x, y) as f64);
                        vb.push(b.get(x, y) as f64);
                    }
                }
            }
            let n = va.len() as f64;
            let ma = va.iter().sum::<f64>() / n;
            let mb = vb.iter().sum::<f64>() / n;
            let mut num = 0.0;
            let mut da = 0.0;
            let mut db = 0.0;
            for (x, y) in va.iter().zip(&vb) {
                num += (x - ma) * (y - mb);
                da += (x - ma).powi(2);
                db += (y - mb).powi(2);
            }
            num / (da.sqrt() * db.sqrt()).max(1e-12)
        };

        let mask = &ds.gt_region_mask[0];
        assert!(mask.count() > 200, "pond too small for the NCC check: {}", mask.count());
        let mut dyn_sum = 0.0;
        let mut stat_sum = 0.0;
        for f in 0..5 {
            dyn_sum += ncc(&ds.frames[f].left, &ds.frames[f + 1].left, &|x, y| mask.get(x, y));
            stat_sum += ncc(&ds.frames[f].left, &ds.frames[f + 1].left, &|x, y| {
                !mask.get(x, y) && ds.gt_depth[0].get(x, y) > 0.0
            });
        }
        let dyn_mean = dyn_sum / 5.0;
        let stat_mean = stat_sum / 5.0;
        assert!(dyn_mean < 0.2, "dynamic NCC {dyn_mean} too high");
        assert!(stat_mean > 0.9, "static NCC {stat_mean} too low");
    }

    #[test]
    fn camera_on_plane_rejected() {
        let spec = SceneSpec::example(1, 64, 48);
        let rig = test_rig(64, 48);
        // place the camera exactly on the floor plane
        let on_floor = PoseSE3::new(nalgebra::Rotation3::identity(), Vector3::new(0.0, 1.3, 3.5));
        let err = render_sequence(&spec, &[on_floor], &rig);
        assert!(matches!(err, Err(SceneError::CameraOnPlane { .. })));
    }

    #[test]
    fn landmark_projections_consistent_with_correspondence() {
        let spec = SceneSpec::example(8, 96, 64);
        let rig = test_rig(96, 64);
        let ds = render_sequence(&spec, &sway_trajectory(3, 0.1), &rig).unwrap();
        let obs0 = landmark_projections(&ds, &rig, 0);
        let obs1 = landmark_projections(&ds, &rig, 1);
        assert!(obs0.len() > 20, "only {} landmarks visible", obs0.len());
        let mut tested = 0;
        for o in &obs0 {
            if let Some(o1) = obs1.iter().find(|m| m.id == o.id) {
                if let Some(fwd) = gt_correspondence(&ds, 0, &o.left, 1, &rig) {
                    assert!((fwd - o1.left).norm() < 1e-6);
                    tested += 1;
                }
            }
        }
        assert!(tested > 10, "too few cross-checked landmarks: {tested}");
    }
}
