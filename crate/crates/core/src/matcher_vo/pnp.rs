//! Pose from 3D-2D correspondences: Grunert's three-point resection solved
//! through the companion-matrix quartic, RANSAC over minimal samples, and a
//! damped Gauss-Newton polish on the inliers.

use nalgebra::{Complex, Matrix3, Matrix4, Matrix6, Rotation3, SMatrix, Vector2, Vector3, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geometry::{CameraIntrinsics, PoseSE3};

#[derive(Debug, Error)]
pub enum PnpError {
    #[error("need at least 4 correspondences with depth, got {0}")]
    TooFewPoints(usize),
    #[error("degenerate estimate: {inliers} inliers < required {required}")]
    Degenerate { inliers: usize, required: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RansacConfig {
    pub iterations: usize,
    pub inlier_px: f64,
    pub min_inliers: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { iterations: 200, inlier_px: 2.0, min_inliers: 12, seed: 0 }
    }
}

/// Real roots of a quartic, via the companion matrix of the monic polynomial
/// followed by Newton polishing. Coefficients ordered c[0]*v^4 .. c[4].
fn quartic_roots(c: [f64; 5]) -> Vec<f64> {
    let scale = c.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if scale == 0.0 || c[0].abs() < 1e-14 * scale {
        return Vec::new();
    }
    let c3 = c[1] / c[0];
    let c2 = c[2] / c[0];
    let c1 = c[3] / c[0];
    let c0 = c[4] / c[0];
    let companion = Matrix4::new(
        0.0, 0.0, 0.0, -c0,
        1.0, 0.0, 0.0, -c1,
        0.0, 1.0, 0.0, -c2,
        0.0, 0.0, 1.0, -c3,
    );
    let eigs: nalgebra::Vector4<Complex<f64>> = companion.complex_eigenvalues();
    let p = |v: f64| (((v + c3) * v + c2) * v + c1) * v + c0;
    let dp = |v: f64| ((4.0 * v + 3.0 * c3) * v + 2.0 * c2) * v + c1;
    let mut roots = Vec::new();
    for e in eigs.iter() {
        if e.im.abs() > 1e-6 * (1.0 + e.re.abs()) {
            continue;
        }
        let mut v = e.re;
        for _ in 0..3 {
            let d = dp(v);
            if d.abs() < 1e-14 {
                break;
            }
            v -= p(v) / d;
        }
        roots.push(v);
    }
    roots
}

/// Rigid transform mapping point set `from` onto `to` (least squares, SVD
/// with reflection fix).
pub fn rigid_align(from: &[Vector3<f64>], to: &[Vector3<f64>]) -> PoseSE3 {
    assert_eq!(from.len(), to.len());
    let n = from.len() as f64;
    let cf: Vector3<f64> = from.iter().sum::<Vector3<f64>>() / n;
    let ct: Vector3<f64> = to.iter().sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (p, q) in from.iter().zip(to) {
        h += (p - cf) * (q - ct).transpose();
    }
    let svd = h.svd(true, true);
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut d = Matrix3::identity();
    if (vt.transpose() * u.transpose()).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    let r = vt.transpose() * d * u.transpose();
    let rot = Rotation3::from_matrix_unchecked(r);
    PoseSE3::new(rot, ct - rot * cf)
}

/// Grunert's P3P: camera poses consistent with three world points seen along
/// three unit bearings. Returns every geometrically valid candidate
/// (positive ray lengths); the caller disambiguates with extra points.
pub fn solve_p3p(points: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<PoseSE3> {
    let (p1, p2, p3) = (points[0], points[1], points[2]);
    let a = (p2 - p3).norm();
    let b = (p1 - p3).norm();
    let c = (p1 - p2).norm();
    if a < 1e-12 || b < 1e-12 || c < 1e-12 {
        return Vec::new();
    }
    let f1 = bearings[0].normalize();
    let f2 = bearings[1].normalize();
    let f3 = bearings[2].normalize();
    let ca = f2.dot(&f3);
    let cb = f1.dot(&f3);
    let cg = f1.dot(&f2);
    let r1 = (a * a) / (b * b);
    let r2 = (c * c) / (b * b);

    // Quartic in v = s3/s1 from eliminating u = s2/s1 in the two law-of-cosine
    // ratios; coefficients follow Grunert's 1841 derivation.
    let a4 = r1 * r1 - 2.0 * r1 * r2 - 2.0 * r1 + r2 * r2 - 4.0 * r2 * ca * ca + 2.0 * r2 + 1.0;
    let a3 = -4.0 * r1 * r1 * cb + 8.0 * r1 * r2 * cb + 4.0 * r1 * ca * cg + 4.0 * r1 * cb
        - 4.0 * r2 * r2 * cb
        + 8.0 * r2 * ca * ca * cb
        + 4.0 * r2 * ca * cg
        - 4.0 * r2 * cb
        - 4.0 * ca * cg;
    let a2 = 4.0 * r1 * r1 * cb * cb + 2.0 * r1 * r1 - 8.0 * r1 * r2 * cb * cb - 4.0 * r1 * r2
        - 8.0 * r1 * ca * cb * cg
        - 4.0 * r1 * cg * cg
        + 4.0 * r2 * r2 * cb * cb
        + 2.0 * r2 * r2
        - 4.0 * r2 * ca * ca
        - 8.0 * r2 * ca * cb * cg
        + 4.0 * ca * ca
        + 4.0 * cg * cg
        - 2.0;
    let a1 = -4.0 * r1 * r1 * cb + 8.0 * r1 * r2 * cb + 4.0 * r1 * ca * cg + 8.0 * r1 * cb * cg * cg
        - 4.0 * r1 * cb
        - 4.0 * r2 * r2 * cb
        + 4.0 * r2 * ca * cg
        + 4.0 * r2 * cb
        - 4.0 * ca * cg;
    let a0 = r1 * r1 - 2.0 * r1 * r2 - 4.0 * r1 * cg * cg + 2.0 * r1 + r2 * r2 - 2.0 * r2 + 1.0;

    let mut poses = Vec::new();
    for v in quartic_roots([a4, a3, a2, a1, a0]) {
        if !(v.is_finite() && v > 1e-9) {
            continue;
        }
        let dn = 2.0 * (cg - v * ca);
        if dn.abs() < 1e-12 {
            continue;
        }
        let num = (r1 - r2) * (1.0 + v * v - 2.0 * v * cb) + 1.0 - v * v;
        let u = num / dn;
        let s1_sq = 1.0 + v * v - 2.0 * v * cb;
        if s1_sq <= 1e-15 {
            continue;
        }
        let s1 = b / s1_sq.sqrt();
        let s2 = u * s1;
        let s3 = v * s1;
        if s2 <= 0.0 || s3 <= 0.0 {
            continue;
        }
        let q1 = f1 * s1;
        let q2 = f2 * s2;
        let q3 = f3 * s3;
        poses.push(rigid_align(&[p1, p2, p3], &[q1, q2, q3]));
    }
    poses
}

fn bearing(intr: &CameraIntrinsics, pix: &Vector2<f64>) -> Vector3<f64> {
    Vector3::new((pix.x - intr.cx) / intr.fx, (pix.y - intr.cy) / intr.fy, 1.0).normalize()
}

fn residual_px(intr: &CameraIntrinsics, pose: &PoseSE3, p: &Vector3<f64>, obs: &Vector2<f64>) -> f64 {
    let y = pose.transform(p);
    if y.z <= 1e-9 {
        return f64::INFINITY;
    }
    let u = intr.fx * y.x / y.z + intr.cx;
    let v = intr.fy * y.y / y.z + intr.cy;
    ((u - obs.x).powi(2) + (v - obs.y).powi(2)).sqrt()
}

fn rms(intr: &CameraIntrinsics, pose: &PoseSE3, data: &[(Vector3<f64>, Vector2<f64>)], mask: &[bool]) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, (p, obs)) in data.iter().enumerate() {
        if mask[i] {
            let r = residual_px(intr, pose, p, obs);
            sum += r * r;
            n += 1;
        }
    }
    if n == 0 {
        f64::INFINITY
    } else {
        (sum / n as f64).sqrt()
    }
}

/// One Gauss-Newton pass with step halving: left-multiplicative se(3)
/// updates, accepted only when the inlier RMS does not increase. Stops after
/// `max_iters` or when the accepted step norm falls below 1e-10.
fn refine_pose(
    intr: &CameraIntrinsics,
    initial: &PoseSE3,
    data: &[(Vector3<f64>, Vector2<f64>)],
    mask: &[bool],
    max_iters: usize,
) -> PoseSE3 {
    let mut pose = *initial;
    let mut current_rms = rms(intr, &pose, data, mask);
    for _ in 0..max_iters {
        let mut jtj = Matrix6::<f64>::zeros();
        let mut jtr = Vector6::<f64>::zeros();
        for (i, (p, obs)) in data.iter().enumerate() {
            if !mask[i] {
                continue;
            }
            let y = pose.transform(p);
            if y.z <= 1e-9 {
                continue;
            }
            let iz = 1.0 / y.z;
            let u = intr.fx * y.x * iz + intr.cx;
            let v = intr.fy * y.y * iz + intr.cy;
            let r = Vector2::new(u - obs.x, v - obs.y);
            // d(projection)/dY
            let a = SMatrix::<f64, 2, 3>::new(
                intr.fx * iz, 0.0, -intr.fx * y.x * iz * iz,
                0.0, intr.fy * iz, -intr.fy * y.y * iz * iz,
            );
            // dY/d(omega, tau) for Y' = exp(omega)Y + tau: [-[Y]x | I]
            let skew = Matrix3::new(
                0.0, -y.z, y.y,
                y.z, 0.0, -y.x,
                -y.y, y.x, 0.0,
            );
            let mut j = SMatrix::<f64, 2, 6>::zeros();
            j.fixed_view_mut::<2, 3>(0, 0).copy_from(&(-a * skew));
            j.fixed_view_mut::<2, 3>(0, 3).copy_from(&a);
            jtj += j.transpose() * j;
            jtr += j.transpose() * r;
        }
        let Some(delta) = jtj.lu().solve(&(-jtr)) else { break };
        let mut step = 1.0;
        let mut accepted = false;
        for _ in 0..20 {
            let d = delta * step;
            let omega = Vector3::new(d[0], d[1], d[2]);
            let tau = Vector3::new(d[3], d[4], d[5]);
            let rot = Rotation3::new(omega);
            let candidate = PoseSE3::new(rot * pose.rotation, rot * pose.translation + tau);
            let candidate_rms = rms(intr, &candidate, data, mask);
            if candidate_rms <= current_rms {
                pose = candidate;
                current_rms = candidate_rms;
                accepted = true;
                if (delta * step).norm() < 1e-10 {
                    return pose;
                }
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    pose
}

/// P3P-RANSAC followed by Gauss-Newton on the consensus set. `matches3d2d`
/// pairs 3D points in the source frame with pixels in the target frame; the
/// returned pose maps source-frame coordinates into the target frame. The
/// mask marks correspondences within `inlier_px` of the refined pose.
pub fn estimate_relative_pose(
    matches3d2d: &[(Vector3<f64>, Vector2<f64>)],
    intr: &CameraIntrinsics,
    cfg: &RansacConfig,
) -> Result<(PoseSE3, Vec<bool>), PnpError> {
    let n = matches3d2d.len();
    if n < 4 {
        return Err(PnpError::TooFewPoints(n));
    }
    let bearings: Vec<Vector3<f64>> =
        matches3d2d.iter().map(|(_, pix)| bearing(intr, pix)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best_pose: Option<PoseSE3> = None;
    let mut best_count = 0usize;
    let mut best_rms = f64::INFINITY;
    for _ in 0..cfg.iterations {
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let pts = [matches3d2d[i].0, matches3d2d[j].0, matches3d2d[k].0];
        // skip near-collinear samples
        let cross = (pts[1] - pts[0]).cross(&(pts[2] - pts[0])).norm();
        if cross < 1e-10 {
            continue;
        }
        for candidate in solve_p3p(&pts, &[bearings[i], bearings[j], bearings[k]]) {
            let mut count = 0usize;
            let mut sq = 0.0;
            for (p, obs) in matches3d2d {
                let r = residual_px(intr, &candidate, p, obs);
                if r < cfg.inlier_px {
                    count += 1;
                    sq += r * r;
                }
            }
            let cand_rms = if count > 0 { (sq / count as f64).sqrt() } else { f64::INFINITY };
            if count > best_count || (count == best_count && cand_rms < best_rms) {
                best_count = count;
                best_rms = cand_rms;
                best_pose = Some(candidate);
            }
        }
    }
    let Some(pose) = best_pose else {
        return Err(PnpError::Degenerate { inliers: 0, required: cfg.min_inliers });
    };
    let mask: Vec<bool> = matches3d2d
        .iter()
        .map(|(p, obs)| residual_px(intr, &pose, p, obs) < cfg.inlier_px)
        .collect();
    let refined = refine_pose(intr, &pose, matches3d2d, &mask, 50);
    let final_mask: Vec<bool> = matches3d2d
        .iter()
        .map(|(p, obs)| residual_px(intr, &refined, p, obs) < cfg.inlier_px)
        .collect();
    let inliers = final_mask.iter().filter(|&&b| b).count();
    if inliers < cfg.min_inliers {
        return Err(PnpError::Degenerate { inliers, required: cfg.min_inliers });
    }
    Ok((refined, final_mask))
}
