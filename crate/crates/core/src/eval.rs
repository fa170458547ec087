//! Measurement kit: keypoint coverage statistics, trajectory error against
//! ground truth, detector repeatability under a known homography, keypoint
//! overlays for eyeballing, and the plain-text comparison table.

use std::fmt::Write as _;

use nalgebra::{Vector2, Vector3};

use crate::features::{FeatureExtractor, Keypoint};
use crate::geometry::{apply_homography, Homography, PoseSE3};
use crate::image::{GrayImage, RegionMask};
use crate::matcher_vo::rigid_align;

/// Occupancy histogram side for the entropy statistic.
pub const COVERAGE_GRID: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoverageReport {
    pub keypoint_count: usize,
    /// Entropy of the 8x8 occupancy histogram normalized by ln 64, so 0 is
    /// everything in one bucket and 1 is perfectly even spread.
    pub occupancy_entropy: f64,
    /// Fraction of keypoints that land on the moving part of the scene.
    pub dynamic_fraction: f64,
}

pub fn coverage(
    keypoints: &[Keypoint],
    width: usize,
    height: usize,
    dynamic: Option<&RegionMask>,
) -> CoverageReport {
    let g = COVERAGE_GRID;
    let mut counts = vec![0usize; g * g];
    let mut on_dynamic = 0usize;
    for k in keypoints {
        debug_assert!(k.x < width && k.y < height);
        let cx = (k.x * g / width).min(g - 1);
        let cy = (k.y * g / height).min(g - 1);
        counts[cy * g + cx] += 1;
        if let Some(m) = dynamic {
            if m.get(k.x, k.y) {
                on_dynamic += 1;
            }
        }
    }
    let n = keypoints.len();
    if n == 0 {
        return CoverageReport { keypoint_count: 0, occupancy_entropy: 0.0, dynamic_fraction: 0.0 };
    }
    let mut entropy = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n as f64;
            entropy -= p * p.ln();
        }
    }
    CoverageReport {
        keypoint_count: n,
        occupancy_entropy: entropy / ((g * g) as f64).ln(),
        dynamic_fraction: on_dynamic as f64 / n as f64,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryError {
    /// RMSE of camera positions after a closed-form rigid alignment of the
    /// estimated trajectory onto the ground truth (no scale).
    pub ate_rmse: f64,
    /// Mean translation error of consecutive relative poses, meters/frame.
    pub rpe_trans: f64,
    /// Mean rotation error of consecutive relative poses, degrees/frame.
    pub rpe_rot_deg: f64,
    pub failure_count: usize,
}

/// Both trajectories are absolute camera-to-world poses of equal length.
pub fn trajectory_error(est: &[PoseSE3], gt: &[PoseSE3], failures: &[bool]) -> TrajectoryError {
    assert_eq!(est.len(), gt.len(), "trajectory length mismatch");
    assert!(!est.is_empty(), "empty trajectory");
    let pe: Vec<Vector3<f64>> = est.iter().map(|p| p.translation).collect();
    let pg: Vec<Vector3<f64>> = gt.iter().map(|p| p.translation).collect();
    let align = rigid_align(&pe, &pg);
    let mut sq = 0.0;
    for (e, g) in pe.iter().zip(&pg) {
        sq += (align.transform(e) - g).norm_squared();
    }
    let ate_rmse = (sq / pe.len() as f64).sqrt();

    let pairs = est.len() - 1;
    let mut rpe_trans = 0.0;
    let mut rpe_rot = 0.0;
    for i in 0..pairs {
        let er = est[i].inverse().compose(&est[i + 1]);
        let gr = gt[i].inverse().compose(&gt[i + 1]);
        let (ang, dist) = PoseSE3::difference(&gr, &er);
        rpe_rot += ang.to_degrees();
        rpe_trans += dist;
    }
    if pairs > 0 {
        rpe_trans /= pairs as f64;
        rpe_rot /= pairs as f64;
    }
    TrajectoryError {
        ate_rmse,
        rpe_trans,
        rpe_rot_deg: rpe_rot,
        failure_count: failures.iter().filter(|&&f| f).count(),
    }
}

/// Repeatability from already-extracted keypoints: a keypoint counts as
/// repeated when its position mapped into the other image (h maps a -> b)
/// has a keypoint within `rho` pixels there. Counted in both directions over
/// keypoints whose mapped position stays in bounds; None when no keypoint
/// qualifies in either direction.
pub fn repeatability_from_keypoints(
    kps_a: &[Keypoint],
    kps_b: &[Keypoint],
    h: &Homography,
    width: usize,
    height: usize,
    rho: f64,
) -> Option<f64> {
    let h_inv = h.inverse();
    let near = |q: &Vector2<f64>, kps: &[Keypoint]| {
        kps.iter().any(|k| (Vector2::new(k.x as f64, k.y as f64) - q).norm() <= rho)
    };
    let mut valid = 0usize;
    let mut repeated = 0usize;
    let mut side = |from: &[Keypoint], to: &[Keypoint], map: &Homography| {
        for k in from {
            let q = apply_homography(map, &Vector2::new(k.x as f64, k.y as f64));
            if q.x < 0.0 || q.y < 0.0 || q.x > (width - 1) as f64 || q.y > (height - 1) as f64 {
                continue;
            }
            valid += 1;
            if near(&q, to) {
                repeated += 1;
            }
        }
    };
    side(kps_a, kps_b, h);
    if let Some(hi) = &h_inv {
        side(kps_b, kps_a, hi);
    }
    if valid == 0 {
        None
    } else {
        Some(repeated as f64 / valid as f64)
    }
}

/// Extracts on both images and scores detection repeatability under `h`.
pub fn repeatability(
    extractor: &dyn FeatureExtractor,
    img_a: &GrayImage,
    img_b: &GrayImage,
    h: &Homography,
    rho: f64,
) -> Option<f64> {
    let kps_a = extractor.extract(img_a);
    let kps_b = extractor.extract(img_b);
    repeatability_from_keypoints(&kps_a, &kps_b, h, img_b.width(), img_b.height(), rho)
}

/// Copy of the image with a white 5-pixel cross at every keypoint. No
/// keypoints means a byte-identical copy.
pub fn render_overlay(img: &GrayImage, keypoints: &[Keypoint]) -> GrayImage {
    let mut out = img.clone();
    let (w, h) = (img.width() as isize, img.height() as isize);
    for k in keypoints {
        let (cx, cy) = (k.x as isize, k.y as isize);
        for d in -2..=2isize {
            for &(x, y) in &[(cx + d, cy), (cx, cy + d)] {
                if x >= 0 && x < w && y >= 0 && y < h {
                    out.set(x as usize, y as usize, 255);
                }
            }
        }
    }
    out
}

/// Normalized cross-correlation of two equal-length sample sets, in
/// [-1, 1]; None when either side has no variance.
pub fn ncc(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "ncc inputs must have equal length");
    if a.is_empty() {
        return None;
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 1e-24 || vb <= 1e-24 {
        return None;
    }
    Some(cov / (va.sqrt() * vb.sqrt()))
}

/// One evaluated extraction method in the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub method: String,
    pub mean_keypoints: f64,
    pub occupancy_entropy: f64,
    pub dynamic_fraction: f64,
    /// None prints as "n/a" (no valid keypoints to score).
    pub repeatability: Option<f64>,
    pub ate_rmse: f64,
    pub vo_failures: usize,
}

/// Fixed-width plain-text table; identical inputs give identical bytes.
pub fn format_comparison(rows: &[ComparisonRow]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>10} {:>9} {:>9} {:>8} {:>12} {:>9}",
        "method", "keypoints", "entropy", "dyn_frac", "repeat", "ate_rmse_m", "failures"
    );
    let _ = writeln!(out, "{}", "-".repeat(77));
    for r in rows {
        let rep = match r.repeatability {
            Some(v) => format!("{v:.3}"),
            None => "n/a".to_string(),
        };
        let _ = writeln!(
            out,
            "{:<14} {:>10.1} {:>9.3} {:>9.3} {:>8} {:>12.6} {:>9}",
            r.method,
            r.mean_keypoints,
            r.occupancy_entropy,
            r.dynamic_fraction,
            rep,
            r.ate_rmse,
            r.vo_failures
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kp(x: usize, y: usize) -> Keypoint {
        Keypoint { x, y, score: 1.0, descriptor: vec![1.0] }
    }

    #[test]
    fn coverage_entropy_extremes() {
        // all keypoints in one bucket
        let clustered: Vec<Keypoint> = (0..10).map(|i| kp(i, i)).collect();
        let r = coverage(&clustered, 256, 256, None);
        assert_eq!(r.keypoint_count, 10);
        assert!(r.occupancy_entropy.abs() < 1e-12);

        // one keypoint per bucket: entropy exactly 1
        let mut spread = Vec::new();
        for by in 0..8 {
            for bx in 0..8 {
                spread.push(kp(bx * 32 + 5, by * 32 + 7));
            }
        }
        let r = coverage(&spread, 256, 256, None);
        assert!((r.occupancy_entropy - 1.0).abs() < 1e-12);

        let r = coverage(&[], 256, 256, None);
        assert_eq!(r.keypoint_count, 0);
        assert_eq!(r.occupancy_entropy, 0.0);
    }

    #[test]
    fn coverage_dynamic_fraction() {
        let mut mask = RegionMask::new(64, 64);
        for y in 0..64 {
            for x in 0..32 {
                mask.set(x, y, true);
            }
        }
        let kps = vec![kp(10, 10), kp(20, 30), kp(40, 10), kp(50, 50)];
        let r = coverage(&kps, 64, 64, Some(&mask));
        assert!((r.dynamic_fraction - 0.5).abs() < 1e-12);
    }

    fn sway(n: usize) -> Vec<PoseSE3> {
        (0..n)
            .map(|i| {
                PoseSE3::new(
                    Rotation3::from_euler_angles(0.0, 0.02 * (i as f64).sin(), 0.0),
                    Vector3::new(0.05 * (0.3 * i as f64).sin(), 0.0, 0.1 * i as f64),
                )
            })
            .collect()
    }

    #[test]
    fn rigidly_moved_trajectory_has_zero_ate() {
        let gt = sway(12);
        let offset = PoseSE3::new(
            Rotation3::from_euler_angles(0.1, -0.2, 0.3),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let est: Vec<PoseSE3> = gt.iter().map(|p| offset.compose(p)).collect();
        let e = trajectory_error(&est, &gt, &vec![false; 11]);
        assert!(e.ate_rmse < 1e-9, "ate {}", e.ate_rmse);
        assert!(e.rpe_trans < 1e-9);
        assert!(e.rpe_rot_deg < 1e-9);
        assert_eq!(e.failure_count, 0);
    }

    #[test]
    fn known_relative_offset_gives_exact_rpe() {
        let gt = vec![PoseSE3::identity(), PoseSE3::identity()];
        let est = vec![
            PoseSE3::identity(),
            PoseSE3::new(Rotation3::identity(), Vector3::new(0.3, 0.0, 0.4)),
        ];
        let e = trajectory_error(&est, &gt, &[true]);
        assert!((e.rpe_trans - 0.5).abs() < 1e-12);
        assert!(e.rpe_rot_deg.abs() < 1e-12);
        assert_eq!(e.failure_count, 1);
        // two points, one displaced by 0.5: best rigid alignment can rotate
        // the segment but not shrink it, so ATE stays positive
        assert!(e.ate_rmse > 0.1);
    }

    #[test]
    fn noisy_trajectory_ate_bounded_by_noise() {
        let gt = sway(20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let est: Vec<PoseSE3> = gt
            .iter()
            .map(|p| {
                let mut q = *p;
                q.translation += Vector3::new(rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>())
                    * 0.01
                    - Vector3::repeat(0.005);
                q
            })
            .collect();
        let e = trajectory_error(&est, &gt, &vec![false; 19]);
        assert!(e.ate_rmse > 0.0);
        assert!(e.ate_rmse < 0.01, "ate {}", e.ate_rmse);
    }

    #[test]
    fn repeatability_identity_is_one() {
        let kps = vec![kp(10, 12), kp(40, 20), kp(33, 48)];
        let h = Homography::translation(0.0, 0.0);
        let r = repeatability_from_keypoints(&kps, &kps, &h, 64, 64, 1.0).unwrap();
        assert_eq!(r, 1.0);
    }

    #[test]
    fn repeatability_counts_by_hand() {
        // shift by 10: a-keypoints map onto b at x+10
        let h = Homography::translation(10.0, 0.0);
        let a = vec![kp(10, 10), kp(30, 30), kp(58, 40)];
        let b = vec![kp(20, 10), kp(41, 30)];
        // forward: (20,10) hit, (40,30) within 1.0 of (41,30) hit, (68,40)
        // out of bounds; backward through inverse: (10,10) hit, (31,30) hit
        let r = repeatability_from_keypoints(&a, &b, &h, 64, 64, 1.0).unwrap();
        assert!((r - 1.0).abs() < 1e-12);

        let b_missing = vec![kp(20, 10)];
        let r = repeatability_from_keypoints(&a, &b_missing, &h, 64, 64, 1.0).unwrap();
        // forward: hit, miss (out of bounds skips third); backward: hit
        assert!((r - 2.0 / 3.0).abs() < 1e-12);

        assert_eq!(repeatability_from_keypoints(&[], &[], &h, 64, 64, 1.0), None);
    }

    #[test]
    fn overlay_without_keypoints_is_byte_identical() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut img = GrayImage::new(40, 32);
        for y in 0..32 {
            for x in 0..40 {
                img.set(x, y, rng.gen());
            }
        }
        let out = render_overlay(&img, &[]);
        assert_eq!(out.as_bytes(), img.as_bytes());

        let out = render_overlay(&img, &[kp(5, 5)]);
        assert_ne!(out.as_bytes(), img.as_bytes());
        assert_eq!(out.get(5, 5), 255);
        assert_eq!(out.get(7, 5), 255);
        assert_eq!(out.get(5, 3), 255);
        // corner keypoint must not panic or wrap
        let _ = render_overlay(&img, &[kp(0, 0), kp(39, 31)]);
    }

    #[test]
    fn ncc_reference_cases() {
        let a = vec![1.0, 2.0, 3.0, 4.0];
        assert!((ncc(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((ncc(&a, &neg).unwrap() + 1.0).abs() < 1e-12);
        let flat = vec![2.0; 4];
        assert_eq!(ncc(&a, &flat), None);
        // affine invariance
        let scaled: Vec<f64> = a.iter().map(|v| 3.0 * v + 7.0).collect();
        assert!((ncc(&a, &scaled).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn comparison_table_is_stable() {
        let rows = vec![
            ComparisonRow {
                method: "classical".into(),
                mean_keypoints: 120.25,
                occupancy_entropy: 0.8123,
                dynamic_fraction: 0.15,
                repeatability: Some(0.7012),
                ate_rmse: 0.012345,
                vo_failures: 0,
            },
            ComparisonRow {
                method: "net-random".into(),
                mean_keypoints: 80.0,
                occupancy_entropy: 0.5,
                dynamic_fraction: 0.3,
                repeatability: None,
                ate_rmse: 0.2,
                vo_failures: 2,
            },
        ];
        let t1 = format_comparison(&rows);
        let t2 = format_comparison(&rows);
        assert_eq!(t1, t2);
        assert!(t1.contains("classical"));
        assert!(t1.contains("n/a"));
        assert!(t1.lines().count() == 4);
        for line in t1.lines() {
            assert!(!line.trim().is_empty());
        }
    }
}
